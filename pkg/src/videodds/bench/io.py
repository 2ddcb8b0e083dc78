"""DMV1 video and DMM1 mask containers.

Both are little-endian: a 4-byte magic, unsigned 32-bit dimensions, then the
payload in row-major order (frame, channel, row, column). Videos store
float32 values, masks one byte per pixel in {0, 1}.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .._binio import ContainerError, Reader
from ..tensorcore import DTYPE, ShapeError

VIDEO_MAGIC = b"DMV1"
MASK_MAGIC = b"DMM1"
# 64 frames at 128x128 with 3 channels is the largest shape we promise; the
# cap only guards against absurd headers.
MAX_ELEMENTS = 1 << 28


def _dims(r: Reader, count: int) -> tuple[int, ...]:
    dims = r.u32(count)
    total = int(np.prod(dims, dtype=np.uint64))
    if total > MAX_ELEMENTS:
        raise ContainerError("DIM_OVERFLOW", f"header declares {dims} = {total} elements")
    return dims


def encode_video(video: torch.Tensor) -> bytes:
    if video.dim() != 4:
        raise ShapeError(f"video must be (N, C, H, W), got {tuple(video.shape)}")
    arr = video.detach().to(torch.float32).contiguous().numpy().astype("<f4")
    return VIDEO_MAGIC + struct.pack("<4I", *video.shape) + arr.tobytes()


def decode_video(buf: bytes) -> torch.Tensor:
    r = Reader(buf)
    r.magic(VIDEO_MAGIC)
    n, c, h, w = _dims(r, 4)
    payload = r.take(4 * n * c * h * w)
    if not r.done:
        raise ContainerError("TRAILING_BYTES", f"{len(buf) - r.pos} bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w)
    return torch.from_numpy(arr.astype(np.float32)).to(DTYPE)


def encode_mask(mask: torch.Tensor) -> bytes:
    if mask.dim() != 3:
        raise ShapeError(f"mask must be (N, H, W), got {tuple(mask.shape)}")
    vals = mask.detach()
    if not bool(((vals == 0) | (vals == 1)).all()):
        raise ValueError("mask values must be 0 or 1")
    arr = vals.to(torch.uint8).contiguous().numpy()
    return MASK_MAGIC + struct.pack("<3I", *mask.shape) + arr.tobytes()


def decode_mask(buf: bytes) -> torch.Tensor:
    r = Reader(buf)
    r.magic(MASK_MAGIC)
    n, h, w = _dims(r, 3)
    payload = r.take(n * h * w)
    if not r.done:
        raise ContainerError("TRAILING_BYTES", f"{len(buf) - r.pos} bytes after payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w)
    if (arr > 1).any():
        raise ContainerError("BAD_VALUE", "mask bytes must be 0 or 1")
    return torch.from_numpy(arr.astype(np.float32)).to(DTYPE)


def save_video(video: torch.Tensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_video(video))


def load_video(path: str | Path) -> torch.Tensor:
    return decode_video(Path(path).read_bytes())


def save_mask(mask: torch.Tensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_mask(mask))


def load_mask(path: str | Path) -> torch.Tensor:
    return decode_mask(Path(path).read_bytes())
