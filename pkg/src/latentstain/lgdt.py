"""Binary tensor and checkpoint file formats.

LGDT tensor blob: magic ``LGDT``, u32-LE rank, rank u32-LE dims, then
row-major little-endian IEEE-754 float32 values.

A checkpoint is a single file holding concatenated named LGDT blobs,
addressed by a CSV index (``name,offset,length``; offsets relative to the
end of the index block):

    magic ``LGDC`` | u32-LE index byte length | index CSV (utf-8) | blobs
"""
from __future__ import annotations

import struct

import numpy as np

TENSOR_MAGIC = b"LGDT"
CHECKPOINT_MAGIC = b"LGDC"


class FormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4", copy=False).tobytes()  # tobytes is C-order


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    arr, consumed = _read_tensor(memoryview(buf), 0)
    if consumed != len(buf):
        raise FormatError(f"{len(buf) - consumed} trailing bytes after tensor")
    return arr


def _read_tensor(view: memoryview, offset: int) -> tuple[np.ndarray, int]:
    if bytes(view[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    (rank,) = struct.unpack_from("<I", view, offset + 4)
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", view, offset + 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    start = offset + 8 + 4 * rank
    end = start + 4 * count
    if end > len(view):
        raise FormatError("tensor data truncated")
    arr = np.frombuffer(view[start:end], dtype="<f4").reshape(dims).astype(np.float32)
    return arr, end


def write_tensor(path, arr: np.ndarray):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    """Write named tensors (name-sorted) as one self-contained file."""
    blobs = []
    rows = ["name,offset,length"]
    offset = 0
    for name in sorted(tensors):
        if "," in name or "\n" in name:
            raise FormatError(f"invalid tensor name {name!r}")
        blob = tensor_to_bytes(tensors[name])
        rows.append(f"{name},{offset},{len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    index = ("\n".join(rows) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(index)))
        f.write(index)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (index_len,) = struct.unpack_from("<I", raw, 4)
    index_end = 8 + index_len
    if index_end > len(raw):
        raise FormatError(f"{path}: truncated index")
    lines = raw[8:index_end].decode("utf-8").splitlines()
    if not lines or lines[0] != "name,offset,length":
        raise FormatError(f"{path}: bad index header")
    view = memoryview(raw)
    out: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        name, off_s, len_s = line.rsplit(",", 2)
        start = index_end + int(off_s)
        blob = view[start:start + int(len_s)]
        if len(blob) != int(len_s):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        out[name] = tensor_from_bytes(bytes(blob))
    return out


def strip_checkpoint(src, dst, drop_prefixes: tuple[str, ...] = ("teacher.", "decoder.")):
    """Copy a checkpoint without parameters under the given name prefixes."""
    state = load_checkpoint(src)
    kept = {k: v for k, v in state.items()
            if not any(k.startswith(p) for p in drop_prefixes)}
    save_checkpoint(dst, kept)
    return sorted(kept)
