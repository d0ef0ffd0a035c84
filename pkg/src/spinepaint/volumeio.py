"""Portable on-disk formats: image volumes and model checkpoints.

Both formats are little-endian and fully deterministic (no timestamps or
platform-dependent fields), so artifacts regenerated with the same seed
are byte-identical.

Volume file (.svol):
    magic   6 bytes  b"SPVOL\\x00"
    version u8       1
    dtype   u8       0 = float32, 1 = uint8, 2 = float64, 3 = int64
    ndim    u8
    pad     3 bytes  zeros
    dims    ndim * u32
    spacing ndim * f64   (mm per voxel)
    origin  ndim * f64   (mm of voxel (0,...,0) center)
    data    row-major little-endian array

Checkpoint file (.spckpt):
    magic      7 bytes  b"SPCKPT\\x00"
    version    u8       1
    header_len u32
    header     UTF-8 JSON (sorted keys) with a "arrays" index of
               {name, dtype, shape, offset, nbytes}
    payload    concatenated raw arrays, little-endian C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import VolumeGrid

_VOL_MAGIC = b"SPVOL\x00"
_CKPT_MAGIC = b"SPCKPT\x00"

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("u1"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_volume(path, array: np.ndarray, grid: VolumeGrid) -> None:
    array = np.asarray(array)
    if array.shape != grid.shape:
        raise DataError(f"array shape {array.shape} != grid shape {grid.shape}")
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported volume dtype {array.dtype}")
    ndim = array.ndim
    header = _VOL_MAGIC + struct.pack("<BBB3x", 1, _DTYPE_CODES[dtype], ndim)
    header += struct.pack(f"<{ndim}I", *array.shape)
    header += struct.pack(f"<{ndim}d", *grid.spacing)
    header += struct.pack(f"<{ndim}d", *grid.origin)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_volume(path) -> tuple[np.ndarray, VolumeGrid]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != _VOL_MAGIC:
        raise DataError(f"{path}: not a volume file")
    version, dtype_code, ndim = struct.unpack_from("<BBB", blob, 6)
    if version != 1:
        raise DataError(f"{path}: unsupported volume version {version}")
    off = 12
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    spacing = struct.unpack_from(f"<{ndim}d", blob, off)
    off += 8 * ndim
    origin = struct.unpack_from(f"<{ndim}d", blob, off)
    off += 8 * ndim
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(dims))
    array = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(dims).copy()
    return array, VolumeGrid(tuple(int(d) for d in dims), spacing, origin)


def build_checkpoint_blob(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": arr.nbytes,
        })
        payload += arr.tobytes()
    full_header = dict(header)
    full_header["arrays"] = index
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    return _CKPT_MAGIC + struct.pack("<BI", 1, len(header_bytes)) + header_bytes + bytes(payload)


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a checkpoint; returns its content fingerprint (sha256 hex)."""
    blob = build_checkpoint_blob(header, arrays)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], str]:
    """Read a checkpoint; returns (header, arrays, fingerprint)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:7] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<BI", blob, 7)
    if version != 1:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(blob[off:off + header_len].decode())
    off += header_len
    arrays = {}
    for entry in header.pop("arrays"):
        start = off + entry["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays, hashlib.sha256(blob).hexdigest()


def checkpoint_fingerprint(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)
