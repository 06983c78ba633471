"""Reader/writer for the CVOL raw-volume format.

Layout: 32-byte little-endian header ``magic "CVOL" | version u32 | W H D C
u32 | dtype tag u32 | reserved u32`` followed by the voxel payload in
channel-major, x-fastest order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .volume import OneHotMask, Volume, VolumeError

MAGIC = b"CVOL"
VERSION = 1
HEADER = struct.Struct("<4s6I4x")
DTYPE_F32 = 0
DTYPE_U8 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

assert HEADER.size == 32


def encode(arr: np.ndarray, dtype_tag: int) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise VolumeError(f"CVOL holds (W,H,D[,C]) arrays, got shape {arr.shape}")
    w, h, d, c = arr.shape
    payload = arr.astype(_DTYPES[dtype_tag]).ravel(order="F").tobytes()
    return HEADER.pack(MAGIC, VERSION, w, h, d, c, dtype_tag) + payload


def decode(buf: bytes) -> Tuple[np.ndarray, int]:
    if len(buf) < HEADER.size:
        raise VolumeError("truncated CVOL header")
    magic, version, w, h, d, c, tag = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise VolumeError(f"bad CVOL magic {magic!r}")
    if version != VERSION:
        raise VolumeError(f"unsupported CVOL version {version}")
    if tag not in _DTYPES:
        raise VolumeError(f"unknown CVOL dtype tag {tag}")
    dt = _DTYPES[tag]
    n = w * h * d * c
    if len(buf) != HEADER.size + n * dt.itemsize:
        raise VolumeError("CVOL payload size does not match header")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=HEADER.size)
    return arr.reshape((w, h, d, c), order="F"), tag


def write_volume(path: Union[str, Path], v: Volume) -> None:
    Path(path).write_bytes(encode(v.data, DTYPE_F32))


def write_mask(path: Union[str, Path], m: OneHotMask) -> None:
    Path(path).write_bytes(encode(m.bits, DTYPE_U8))


def read_volume(path: Union[str, Path]) -> Volume:
    arr, _ = decode(Path(path).read_bytes())
    if arr.shape[3] != 1:
        raise VolumeError(f"{path}: expected a single-channel image, got C={arr.shape[3]}")
    return Volume(arr[..., 0].astype(np.float64))


def read_mask(path: Union[str, Path]) -> OneHotMask:
    arr, _ = decode(Path(path).read_bytes())
    return OneHotMask(arr.astype(np.uint8))
