"""Binary feature-file I/O.

All cached features (mels, MFCCs, f0 tracks, state sequences) share one
container: magic ``SFTF``, u32 version, u32 rows, u32 cols, then rows*cols
float32 values, row-major, all little-endian.  Model checkpoints reuse the
same container for the flattened parameter block next to a JSON header that
records tensor names, shapes and offsets.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FeatureFileError, InvalidInput

MAGIC = b"SFTF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_matrix(path, mat):
    """Write a 2-D float array to `path` in the shared container format."""
    mat = np.asarray(mat, dtype="<f4")
    if mat.ndim != 2:
        raise InvalidInput(f"feature matrix must be 2-D, got shape {mat.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, mat.shape[0], mat.shape[1]))
        f.write(np.ascontiguousarray(mat).tobytes())


def read_matrix(path):
    """Read a matrix written by write_matrix.  Returns float32 ndarray."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 4 * rows * cols
    if len(raw) != need:
        raise FeatureFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, cols).copy()


def save_tensors(prefix, tensors, header_extra=None):
    """Persist named float arrays as one parameter block plus a JSON header.

    `prefix` is extended to ``<prefix>.sftf`` (all values concatenated as an
    N-by-1 matrix) and ``<prefix>.json`` (tensor table and any extra header
    fields).  float64 inputs are stored as float32; shapes are preserved.
    """
    prefix = Path(prefix)
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    block = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    write_matrix(prefix.with_suffix(".sftf"), block.reshape(-1, 1))
    header = {"tensors": table, "total": int(offset)}
    if header_extra:
        header.update(header_extra)
    with open(prefix.with_suffix(".json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_tensors(prefix):
    """Inverse of save_tensors.  Returns (dict name -> array, header dict)."""
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json")) as f:
        header = json.load(f)
    block = read_matrix(prefix.with_suffix(".sftf")).reshape(-1)
    if block.size != header["total"]:
        raise FeatureFileError(
            f"{prefix}: parameter block holds {block.size} values, "
            f"header says {header['total']}"
        )
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        out[entry["name"]] = block[start : start + n].reshape(shape).copy()
    return out, header
