"""Binary file formats: raw sample tensors and training checkpoints.

Raw tensor layout (language-neutral, diffable):

    bytes 0..3    magic "MATE"
    bytes 4..7    format version, uint32 little-endian (currently 1)
    bytes 8..11   rank, uint32 little-endian
    bytes 12..15  reserved, zero
    then          rank dimension sizes, uint32 little-endian each
    then          the values, float64 little-endian, C order

Checkpoints are .npz archives (never pickled) holding every weight array
under a "weight:" prefix, the full run configuration as TOML text, and the
step count.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .errors import DomainError
from .mate import DenoiserWeights, flatten_weights, unflatten_weights

TENSOR_MAGIC = b"MATE"
TENSOR_VERSION = 1
CHECKPOINT_SCHEMA = "matekit-checkpoint/1"

_U32_MAX = 2 ** 32 - 1


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim == 0:
        raise DomainError("rank-0 tensors are not representable")
    arr = np.ascontiguousarray(arr)  # promotes rank 0, hence the check above
    if any(dim > _U32_MAX for dim in arr.shape):
        raise DomainError(f"dimension too large for the format: {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<III", TENSOR_VERSION, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DomainError(f"{path}: truncated header")
    if blob[:4] != TENSOR_MAGIC:
        raise DomainError(f"{path}: bad magic {blob[:4]!r}")
    version, rank, reserved = struct.unpack_from("<III", blob, 4)
    if version != TENSOR_VERSION:
        raise DomainError(f"{path}: unsupported format version {version}")
    if reserved != 0:
        raise DomainError(f"{path}: nonzero reserved field")
    dims_end = 16 + 4 * rank
    if len(blob) < dims_end:
        raise DomainError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, 16)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 0
    if len(blob) != dims_end + 8 * count:
        raise DomainError(f"{path}: payload size does not match dims {dims}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=dims_end)
    return data.reshape(dims).astype(np.float64, copy=True)


def save_checkpoint(path, weights: DenoiserWeights, run_cfg: RunConfig,
                    step: int) -> None:
    arrays = {f"weight:{name}": arr
              for name, arr in flatten_weights(weights).items()}
    np.savez(path,
             schema=np.array(CHECKPOINT_SCHEMA),
             config=np.array(serialize_config(run_cfg)),
             step=np.array(int(step)),
             **arrays)


def load_checkpoint(path) -> tuple[DenoiserWeights, RunConfig, int]:
    with np.load(path, allow_pickle=False) as archive:
        if "schema" not in archive:
            raise DomainError(f"{path}: not a checkpoint (no schema entry)")
        schema = str(archive["schema"])
        if schema != CHECKPOINT_SCHEMA:
            raise DomainError(f"{path}: unsupported checkpoint schema {schema!r}")
        run_cfg = parse_config(str(archive["config"]))
        step = int(archive["step"])
        flat = {name[len("weight:"):]: archive[name].astype(np.float64)
                for name in archive.files if name.startswith("weight:")}
    try:
        weights = unflatten_weights(run_cfg.model, flat)
    except KeyError as exc:
        raise DomainError(f"{path}: checkpoint is missing weight {exc}") from None
    return weights, run_cfg, step
