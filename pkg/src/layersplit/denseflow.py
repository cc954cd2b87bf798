"""Dense flow estimation between two layer images.

The paper's fixed pretrained flow network is replaced by a classical
coarse-to-fine iterative Lucas-Kanade estimator behind the same
interface, so a learned estimator can be swapped in later.  Flow values
are never differentiated: the estimator output is treated as a constant
by the rest of the system.

Convention: ``estimate_flow(src, dst)`` returns a backward-convention
field ``f`` with ``warp_bilinear(src, f) ~= dst`` on shared content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import core

__all__ = [
    "LucasKanadeEstimator",
    "endpoint_error",
    "read_flo",
    "write_flo",
    "FLO_MAGIC",
]

FLO_MAGIC = 202021.25


@dataclass(frozen=True)
class LucasKanadeEstimator:
    """Coarse-to-fine iterative Lucas-Kanade.

    ``levels`` caps the internal pyramid; the effective depth shrinks so
    the coarsest level keeps a minimum spatial extent.  ``epsilon`` is
    the max-update early-exit threshold per level, in pixels.
    """

    levels: int = 5
    iterations: int = 10
    window: int = 5
    sigma: float = 1.0
    epsilon: float = 1e-3
    min_coarse_size: int = 6
    # the layer motions this estimator sees are homography-smooth, so a
    # per-iteration flow smoothing pass regularizes the locally
    # rank-deficient window solves on low-contrast content
    flow_smoothing: float = 2.0
    regularization: float = 1e-6

    def estimate_flow(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        src = np.asarray(src, dtype=np.float64)
        dst = np.asarray(dst, dtype=np.float64)
        if src.shape != dst.shape:
            raise ValueError(f"estimate_flow: size mismatch {src.shape} vs {dst.shape}")
        a = core.to_gray(src)
        b = core.to_gray(dst)
        h, w = a.shape
        depth = 1
        while (depth < self.levels
               and min(h, w) // (2 ** depth) >= self.min_coarse_size):
            depth += 1
        # pad so every level halves cleanly
        m = 2 ** (depth - 1)
        a_p, orig = core.pad_to_multiple(a, m)
        b_p, _ = core.pad_to_multiple(b, m)
        pyr_a = core.build_pyramid(a_p, depth)
        pyr_b = core.build_pyramid(b_p, depth)
        flow = np.zeros(pyr_a[0].shape + (2,))
        for la, lb in zip(pyr_a, pyr_b):
            if flow.shape[:2] != la.shape:
                flow = core.upsample2x(flow, is_flow=True)
            flow = self._refine_level(la, lb, flow)
        return flow[: orig[0], : orig[1], :]

    def _refine_level(self, a, b, flow):
        a = ndimage.gaussian_filter(a, self.sigma, mode="reflect")
        b = ndimage.gaussian_filter(b, self.sigma, mode="reflect")
        size = self.window
        lam = self.regularization
        for _ in range(self.iterations):
            warped, mask = core.warp_bilinear(a[:, :, None], flow)
            warped = warped[:, :, 0]
            # np.gradient returns d/drow (y) first
            iy, ix = np.gradient(warped)
            err = (b - warped) * mask
            ixx = ndimage.uniform_filter(ix * ix, size, mode="nearest") + lam
            iyy = ndimage.uniform_filter(iy * iy, size, mode="nearest") + lam
            ixy = ndimage.uniform_filter(ix * iy, size, mode="nearest")
            ixe = ndimage.uniform_filter(ix * err, size, mode="nearest")
            iye = ndimage.uniform_filter(iy * err, size, mode="nearest")
            det = ixx * iyy - ixy * ixy
            du = (iyy * ixe - ixy * iye) / det
            dv = (ixx * iye - ixy * ixe) / det
            # cap per-iteration updates for stability
            np.clip(du, -1.0, 1.0, out=du)
            np.clip(dv, -1.0, 1.0, out=dv)
            flow = flow + np.stack([du, dv], axis=2)
            if self.flow_smoothing > 0:
                flow = ndimage.gaussian_filter(
                    flow, (self.flow_smoothing, self.flow_smoothing, 0), mode="nearest")
            if max(np.abs(du).max(), np.abs(dv).max()) < self.epsilon:
                break
        return flow


def endpoint_error(flow: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean Euclidean flow error over mask==1 pixels."""
    if flow.shape != gt.shape or mask.shape != flow.shape[:2]:
        raise ValueError("endpoint_error: shape mismatch")
    sel = mask > 0
    if not sel.any():
        raise ValueError("endpoint_error: empty mask")
    d = flow - gt
    epe = np.sqrt(d[:, :, 0] ** 2 + d[:, :, 1] ** 2)
    return float(epe[sel].mean())


def write_flo(path, flow: np.ndarray) -> None:
    """Middlebury .flo: magic float, width/height i32 LE, interleaved f32 (u, v)."""
    flow = np.asarray(flow)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.ascontiguousarray(flow, dtype="<f4").tofile(f)


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = np.fromfile(f, dtype="<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: invalid .flo magic")
        w, h = np.fromfile(f, dtype="<i4", count=2)
        data = np.fromfile(f, dtype="<f4", count=int(w) * int(h) * 2)
    return data.reshape(int(h), int(w), 2).copy()
