"""Binary checkpoint files.

Format (all integers little-endian):

    magic   4 bytes  "FWLB"
    version u16      currently 1
    count   u32      number of entries
    entry:  name_len u16, name utf-8 bytes,
            dtype   u8   (0 = float32, 1 = float64, 2 = int64),
            rank    u8,
            extents rank x u64,
            payload raw little-endian array data

A checkpoint holds every model parameter, the batch-norm running statistics,
the optimizer velocity buffers (``opt.velocity.*``) and the iteration
counter (``meta.iter``).  Loading validates the whole file before returning
anything, so a truncated file never yields partial state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError

MAGIC = b"FWLB"
VERSION = 1

_CODE_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_DTYPE_OF_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


def save_entries(path, entries: list[tuple[str, np.ndarray]]):
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_OF_DTYPE:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _CODE_OF_DTYPE[arr.dtype], arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<Q", extent)
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_entries(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPE_OF_CODE:
            raise CheckpointError(f"{path}: entry {name} has unknown dtype code {code}")
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        dtype = _DTYPE_OF_CODE[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        data = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape)
        out[name] = data.astype(dtype.newbyteorder("=")).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def model_entries(model) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in model.named_parameters()]
    entries += [(name, arr) for name, arr in model.state_arrays()]
    return entries


def save_checkpoint(path, model, optimizer=None, iteration: int = 0):
    entries = model_entries(model)
    if optimizer is not None:
        entries += optimizer.state_entries()
    entries.append(("meta.iter", np.asarray(iteration, np.int64)))
    save_entries(path, entries)


def restore_model(model, state: dict[str, np.ndarray]):
    """Copy checkpointed arrays into a built model, strict about shapes."""
    for name, p in model.named_parameters():
        if name not in state:
            raise ShapeError(f"checkpoint is missing parameter {name}")
        if state[name].shape != p.data.shape:
            raise ShapeError(
                f"parameter {name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
        p.data = state[name].astype(p.data.dtype)
    for name, arr in model.state_arrays():
        if name not in state:
            raise ShapeError(f"checkpoint is missing state {name}")
        if state[name].shape != arr.shape:
            raise ShapeError(
                f"state {name}: checkpoint shape {state[name].shape} != model {arr.shape}")
        arr[:] = state[name].astype(arr.dtype)


def restore_optimizer(optimizer, state: dict[str, np.ndarray]):
    for key, vel in optimizer.state_entries():
        if key in state:
            if state[key].shape != vel.shape:
                raise ShapeError(f"{key}: checkpoint shape {state[key].shape} != {vel.shape}")
            vel[:] = state[key].astype(vel.dtype)


def load_iteration(state: dict[str, np.ndarray]) -> int:
    return int(state.get("meta.iter", np.asarray(0)))
