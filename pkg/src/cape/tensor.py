"""Dense float64 tensor primitives shared by every other module.

Arrays are plain numpy ndarrays in C (row-major) order; 3-D maps use the
index order (row, column, channel/class). All public operations return
finite values for finite inputs.
"""
from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

__all__ = [
    "as_tensor",
    "softmax_axis",
    "minmax_normalize",
    "bilinear_upsample",
    "rectify",
    "pearson_corr",
    "save_cpt1",
    "load_cpt1",
]

CPT1_MAGIC = b"CPT1"


def as_tensor(values) -> np.ndarray:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


def _normalize_axes(axes: int | Sequence[int], ndim: int) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(a) for a in axes)
    if not axes:
        raise ValueError("axis set must be nonempty")
    resolved = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank-{ndim} tensor")
        resolved.append(a % ndim)
    if len(set(resolved)) != len(resolved):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(resolved))


def softmax_axis(t, axes: int | Sequence[int], temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax normalized jointly over `axes`.

    Slices taken over the complement axes each sum to 1. Uses max
    subtraction so large logits cannot overflow.
    """
    t = as_tensor(t)
    axes = _normalize_axes(axes, t.ndim)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = t / float(temperature)
    shifted = scaled - scaled.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axes, keepdims=True)


def minmax_normalize(t) -> np.ndarray:
    """Affine rescale onto [0, 1]; a constant input maps to all zeros."""
    t = as_tensor(t)
    if t.size == 0:
        raise ValueError("cannot normalize an empty tensor")
    lo = t.min()
    hi = t.max()
    if hi == lo:
        return np.zeros_like(t)
    return (t - lo) / (hi - lo)


def bilinear_upsample(map2d, target: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear upsampling of a 2-D map to `target` (H', W').

    Interpolation is a convex combination of the four neighbours, so the
    output range never exceeds the input range and constants are
    preserved exactly. Shrinking is rejected.
    """
    src = as_tensor(map2d)
    if src.ndim != 2:
        raise ValueError(f"expected a 2-D map, got rank {src.ndim}")
    h, w = src.shape
    th, tw = int(target[0]), int(target[1])
    if th < h or tw < w:
        raise ValueError(f"cannot downsample {src.shape} to {(th, tw)}")

    def _coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        # keep frac = 0 (not base-1, frac = 1) at exact grid hits so source
        # samples pass through bit-exactly
        base = np.floor(pos).astype(np.int64)
        return base, pos - base

    ri, rf = _coords(h, th)
    ci, cf = _coords(w, tw)
    # lerp rows, then columns: a + t*(b - a) keeps results inside [a, b]
    top = src[np.minimum(ri, h - 1), :]
    rows = top + rf[:, None] * (src[np.minimum(ri + 1, h - 1), :] - top)
    left = rows[:, np.minimum(ci, w - 1)]
    return left + cf[None, :] * (rows[:, np.minimum(ci + 1, w - 1)] - left)


def rectify(t) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(as_tensor(t), 0.0)


def pearson_corr(a, b) -> float:
    """Sample Pearson correlation; 0 when either input has no variance."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("correlation needs at least 2 elements")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0))


def save_cpt1(path, arr) -> None:
    """Write a tensor in the CPT1 binary format.

    Layout: magic "CPT1", u32 little-endian rank, rank u64 little-endian
    dims, then the float64 little-endian payload in row-major order.
    """
    arr = as_tensor(arr)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    with open(path, "wb") as fh:
        fh.write(CPT1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_cpt1(path) -> np.ndarray:
    """Read a CPT1 tensor; round-trips through save_cpt1 bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CPT1_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CPT1_MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank < 1:
            raise ValueError(f"{path}: invalid rank {rank}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        if any(d == 0 for d in dims):
            raise ValueError(f"{path}: zero-sized dimension in {dims}")
        count = int(np.prod(dims))
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f8", count=count)
    arr = data.reshape(dims).astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite values in tensor")
    return arr
