"""Deterministic image and flow primitives.

Images are ``(H, W, C)`` float arrays with values nominally in [0, 1].
Flow fields are ``(H, W, 2)`` arrays holding per-pixel displacements
``(u, v)`` in pixels, backward-warping convention: the aligned image at
pixel ``(x, y)`` is sampled from the source at ``(x + u, y + v)``.
Masks are ``(H, W)`` arrays with values in {0, 1}.

All functions here are pure and thread-safe.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "downsample2x",
    "upsample2x",
    "warp_bilinear",
    "difference_map",
    "spatial_gradient",
    "build_pyramid",
    "pad_to_multiple",
    "crop_to",
    "to_gray",
    "tile_flow",
]


def _as_3d(img: np.ndarray) -> np.ndarray:
    """View a (H, W) array as (H, W, 1); pass (H, W, C) through."""
    if img.ndim == 2:
        return img[:, :, None]
    return img


def downsample2x(img: np.ndarray, is_flow: bool = False) -> np.ndarray:
    """2x downsampling by 2x2 block averaging.

    Flow fields additionally have their displacement values halved so
    they stay expressed in pixels of the new resolution.
    """
    a = _as_3d(np.asarray(img))
    h, w, c = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x requires even dimensions, got {h}x{w}")
    out = a.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
    if is_flow:
        out = out * 0.5
    if img.ndim == 2:
        out = out[:, :, 0]
    return out


def _up2_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Separable 2x bilinear upsampling along one axis.

    Output sample j lies at input coordinate j/2 - 1/4, so even outputs
    blend toward the previous input sample and odd outputs toward the
    next, with edge replication.  Constants are preserved exactly.
    """
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.empty((2 * n,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = even
    out[1::2] = odd
    return np.moveaxis(out, 0, axis)


def _up2_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Adjoint of :func:`_up2_axis` (needed by the autodiff engine)."""
    g = np.moveaxis(g, axis, 0)
    ge = g[0::2]
    go = g[1::2]
    out = 0.75 * ge + 0.75 * go
    # prev-neighbour contributions from even outputs
    out[0] += 0.25 * ge[0]
    out[:-1] += 0.25 * ge[1:]
    # next-neighbour contributions from odd outputs
    out[-1] += 0.25 * go[-1]
    out[1:] += 0.25 * go[:-1]
    return np.moveaxis(out, 0, axis)


def upsample2x(field: np.ndarray, is_flow: bool = False) -> np.ndarray:
    """2x bilinear upsampling; flow displacement values are doubled."""
    a = np.asarray(field)
    squeeze = a.ndim == 2
    a = _as_3d(a)
    out = _up2_axis(_up2_axis(a, 0), 1)
    if is_flow:
        out = out * 2.0
    if squeeze:
        out = out[:, :, 0]
    return out


def warp_bilinear(src: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp ``src`` by ``flow`` with bilinear sampling.

    Returns ``(warped, mask)``.  Sampling coordinates are clamped to the
    image border; the mask is 0 wherever the unclamped sample position
    fell outside ``[0, W-1] x [0, H-1]`` and 1 elsewhere.
    """
    src = _as_3d(np.asarray(src))
    flow = np.asarray(flow)
    h, w, _ = src.shape
    if flow.shape[:2] != (h, w) or flow.shape[2] != 2:
        raise ValueError(f"flow shape {flow.shape} does not match image {src.shape}")
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow[:, :, 0]
    sy = ys + flow[:, :, 1]
    mask = ((sx >= 0.0) & (sx <= w - 1) & (sy >= 0.0) & (sy <= h - 1)).astype(src.dtype)
    cx = np.clip(sx, 0.0, w - 1)
    cy = np.clip(sy, 0.0, h - 1)
    x0 = np.clip(np.floor(cx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(cy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0)[:, :, None]
    fy = (cy - y0)[:, :, None]
    out = (
        src[y0, x0] * (1 - fy) * (1 - fx)
        + src[y0, x1] * (1 - fy) * fx
        + src[y1, x0] * fy * (1 - fx)
        + src[y1, x1] * fy * fx
    )
    return out, mask


def difference_map(warped: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel absolute difference."""
    warped = np.asarray(warped)
    key = np.asarray(key)
    if warped.shape != key.shape:
        raise ValueError(f"shape mismatch: {warped.shape} vs {key.shape}")
    return np.abs(warped - key)


def spatial_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference spatial gradients (gx, gy), zero on the last column/row."""
    a = np.asarray(img)
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1, ...] = a[:, 1:, ...] - a[:, :-1, ...]
    gy[:-1, :, ...] = a[1:, :, ...] - a[:-1, :, ...]
    return gx, gy


def pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad so both spatial dims are multiples of ``multiple``.

    Returns the padded image and the original ``(H, W)`` for later
    cropping with :func:`crop_to`.
    """
    a = np.asarray(img)
    h, w = a.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return a, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    return np.pad(a, pad, mode="reflect"), (h, w)


def crop_to(img: np.ndarray, height: int, width: int) -> np.ndarray:
    return img[:height, :width, ...]


def build_pyramid(img: np.ndarray, level_count: int, is_flow: bool = False) -> list[np.ndarray]:
    """Coarse-to-fine pyramid; index 0 is the coarsest level.

    The base dimensions must be divisible by ``2**(level_count - 1)``
    (callers pad via :func:`pad_to_multiple` first).
    """
    a = np.asarray(img)
    levels = [a]
    for _ in range(level_count - 1):
        levels.append(downsample2x(levels[-1], is_flow=is_flow))
    return levels[::-1]


def to_gray(img: np.ndarray) -> np.ndarray:
    """Channel-mean luminance as a (H, W) array."""
    a = np.asarray(img)
    if a.ndim == 2:
        return a
    return a.mean(axis=2)


def tile_flow(vec, height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Tile a 2-vector (u, v) into a uniform flow field."""
    out = np.empty((height, width, 2), dtype=dtype)
    out[:, :, 0] = vec[0]
    out[:, :, 1] = vec[1]
    return out
