"""Synthetic training and evaluation sequences.

Two independently moving layers are composited per frame: either an
additive blurred, attenuated reflection, or an alpha-masked opaque
obstruction.  Each layer moves along its own homography random walk
(small per-frame corner perturbations), matching footage from a
slightly moving camera.  Every sample stores its exact ground truth, so
the compositing equation holds by construction.

The hermetic corpus is multi-octave value noise; any directory of image
sequences can be used instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .rng import substream

__all__ = [
    "GeneratorConfig",
    "SyntheticSample",
    "procedural_texture",
    "solve_homography_4pt",
    "sample_homography_walk",
    "warp_homography",
    "composite_reflection",
    "generate_sequence",
    "make_texture_corpus",
    "save_sample",
    "load_sample",
    "save_image",
    "load_image",
]


@dataclass
class GeneratorConfig:
    frames: int = 5
    crop_width: int = 160   # paper-scale: 320
    crop_height: int = 96   # paper-scale: 192
    corner_perturbation: float = 2.0  # max per-frame corner offset, px
    translation_only: bool = False
    blur_sigma_range: tuple = (0.2, 3.0)
    attenuation_range: tuple = (0.4, 0.9)
    alpha_coverage: tuple = (0.1, 0.3)
    seed: int = 0

    @property
    def margin(self) -> int:
        # warp headroom around the crop
        return int(np.ceil(self.frames * self.corner_perturbation)) + 4


@dataclass
class SyntheticSample:
    """Input frames plus exact ground truth.

    ``gt_obstruction`` in reflection mode is the composited reflection
    contribution (blurred and attenuated), so ``input = clip(gt_b +
    gt_r)`` holds exactly and the warping-consistency target is
    additive.  ``reflection_raw`` keeps the unblurred layer for
    diagnostics.
    """

    inputs: list
    gt_background: list
    gt_obstruction: list | None
    gt_alpha: list | None
    homographies_background: list
    homographies_obstruction: list
    mode: str
    sigma: float
    beta: float
    seed: int
    reflection_raw: list | None = None


def procedural_texture(seed: int, size: tuple[int, int], channels: int = 3) -> np.ndarray:
    """Deterministic multi-octave value noise in [0, 1], (H, W, C)."""
    h, w = size
    gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x7E87])
    out = np.zeros((h, w, channels))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    amp_total = 0.0
    cells = 4
    amp = 1.0
    while cells <= max(h, w):
        grid = gen.random((cells + 1, cells + 1, channels))
        cy = ys * cells / h
        cx = xs * cells / w
        for c in range(channels):
            out[:, :, c] += amp * ndimage.map_coordinates(
                grid[:, :, c], [cy, cx], order=1, mode="nearest")
        amp_total += amp
        amp *= 0.55
        cells *= 2
    out /= amp_total
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / max(hi - lo, 1e-9)


def solve_homography_4pt(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """DLT solve for H (bottom-right 1) with dst ~ H @ src, 4 correspondences."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src_pts, dst_pts)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def sample_homography_walk(cfg: GeneratorConfig, gen: np.random.Generator,
                           offset: tuple[float, float]) -> list[np.ndarray]:
    """One homography per frame mapping crop coords into source coords.

    Frame 0 is the identity-anchored crop at ``offset``; each following
    frame perturbs the previous frame's four corner positions by i.i.d.
    uniform offsets (or a single shared offset in translation-only mode)
    and solves the 4-point correspondence.
    """
    w, h = cfg.crop_width, cfg.crop_height
    ox, oy = offset
    base = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    corners = base + np.array([ox, oy])
    walks = []
    for t in range(cfg.frames):
        if t > 0:
            r = cfg.corner_perturbation
            if cfg.translation_only:
                step = np.tile(gen.uniform(-r, r, size=(1, 2)), (4, 1))
            else:
                step = gen.uniform(-r, r, size=(4, 2))
            corners = corners + step
        for _ in range(8):
            hm = solve_homography_4pt(base, corners)
            if abs(np.linalg.det(hm)) > 1e-6:
                break
            corners = corners + gen.uniform(-0.5, 0.5, size=(4, 2))
        else:
            raise RuntimeError("degenerate homography after bounded retries")
        walks.append(hm)
    return walks


def warp_homography(img: np.ndarray, h_mat: np.ndarray,
                    out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Backward mapping: out(x) = img(H @ x), bilinear, replicated border."""
    if abs(np.linalg.det(h_mat)) <= 1e-6:
        raise ValueError("non-invertible homography")
    img = np.asarray(img)
    oh, ow = out_shape if out_shape is not None else img.shape[:2]
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    denom = h_mat[2, 0] * xs + h_mat[2, 1] * ys + h_mat[2, 2]
    sx = (h_mat[0, 0] * xs + h_mat[0, 1] * ys + h_mat[0, 2]) / denom
    sy = (h_mat[1, 0] * xs + h_mat[1, 1] * ys + h_mat[1, 2]) / denom
    out = np.empty((oh, ow, img.shape[2]), dtype=img.dtype)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(img[:, :, c], [sy, sx], order=1, mode="nearest")
    return out


def composite_reflection(background: np.ndarray, reflection: np.ndarray,
                         sigma: float, beta: float) -> np.ndarray:
    """I = clip(B + beta * gaussian_blur(R, sigma)), values in [0, 1]."""
    if background.shape != reflection.shape:
        raise ValueError("composite_reflection: shape mismatch")
    if sigma < 0 or not (0 < beta <= 1):
        raise ValueError("composite_reflection: invalid sigma/beta")
    contrib = beta * gaussian_blur(reflection, sigma)
    return np.clip(background + contrib, 0.0, 1.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(img).copy()
    return ndimage.gaussian_filter(np.asarray(img), sigma=(sigma, sigma, 0), mode="reflect")


def _alpha_pattern(cfg: GeneratorConfig, gen: np.random.Generator,
                   size: tuple[int, int]) -> np.ndarray:
    """Fence-like stripe mask with soft edges hitting the coverage band."""
    h, w = size
    lo, hi = cfg.alpha_coverage
    for _ in range(16):
        duty = gen.uniform(lo, hi)
        theta = gen.uniform(0, np.pi)
        period = gen.uniform(14.0, 30.0)
        phase = gen.uniform(0, period)
        cross = gen.random() < 0.5
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        d1 = (xs * np.cos(theta) + ys * np.sin(theta) + phase) % period
        alpha = (d1 < duty * period).astype(np.float64)
        if cross:
            d2 = (-xs * np.sin(theta) + ys * np.cos(theta) + phase) % period
            alpha = np.maximum(alpha, (d2 < duty * period * 0.5).astype(np.float64))
        alpha = ndimage.gaussian_filter(alpha, 0.7, mode="reflect")
        mean_cov = float(alpha.mean())
        if lo * 0.8 <= mean_cov <= hi * 1.2:
            return np.clip(alpha, 0.0, 1.0)
    raise RuntimeError("could not hit alpha coverage band after bounded retries")


def _source_frame(corpus, t: int) -> np.ndarray:
    return corpus[min(t, len(corpus) - 1)]


def generate_sequence(corpus_a, corpus_b, cfg: GeneratorConfig,
                      mode: str = "reflection") -> SyntheticSample:
    """Generate one sample; pure function of (corpora, cfg, cfg.seed)."""
    if mode not in ("reflection", "occlusion"):
        raise ValueError(f"unknown mode {mode!r}")
    w, h = cfg.crop_width, cfg.crop_height
    m = cfg.margin
    for corpus in (corpus_a, corpus_b):
        sh = _source_frame(corpus, 0).shape
        if sh[0] < h + 2 * m or sh[1] < w + 2 * m:
            raise ValueError(f"source {sh[:2]} too small for crop {h}x{w} with margin {m}")
    gen = substream(cfg.seed, f"synthgen/{mode}")
    off_a = (m, m)
    off_b = (m, m)
    walk_a = sample_homography_walk(cfg, gen, off_a)
    walk_b = sample_homography_walk(cfg, gen, off_b)
    sigma = float(gen.uniform(*cfg.blur_sigma_range))
    beta = float(gen.uniform(*cfg.attenuation_range))

    gt_b = [warp_homography(_source_frame(corpus_a, t), walk_a[t], (h, w))
            for t in range(cfg.frames)]

    if mode == "reflection":
        raw_r = [warp_homography(_source_frame(corpus_b, t), walk_b[t], (h, w))
                 for t in range(cfg.frames)]
        gt_r = [beta * gaussian_blur(r, sigma) for r in raw_r]
        inputs = [np.clip(b + r, 0.0, 1.0) for b, r in zip(gt_b, gt_r)]
        return SyntheticSample(inputs=inputs, gt_background=gt_b, gt_obstruction=gt_r,
                               gt_alpha=None, homographies_background=walk_a,
                               homographies_obstruction=walk_b, mode=mode,
                               sigma=sigma, beta=beta, seed=cfg.seed,
                               reflection_raw=raw_r)

    src_o = _source_frame(corpus_b, 0)
    alpha_src = _alpha_pattern(cfg, gen, src_o.shape[:2])
    colors = [warp_homography(_source_frame(corpus_b, t), walk_b[t], (h, w))
              for t in range(cfg.frames)]
    alphas = [warp_homography(alpha_src[:, :, None], walk_b[t], (h, w))[:, :, 0]
              for t in range(cfg.frames)]
    inputs = [(1.0 - a[:, :, None]) * b + a[:, :, None] * o
              for a, b, o in zip(alphas, gt_b, colors)]
    return SyntheticSample(inputs=inputs, gt_background=gt_b, gt_obstruction=colors,
                           gt_alpha=alphas, homographies_background=walk_a,
                           homographies_obstruction=walk_b, mode=mode,
                           sigma=sigma, beta=beta, seed=cfg.seed)


def make_texture_corpus(seed: int, cfg: GeneratorConfig) -> tuple[list, list]:
    """Two single-image noise sequences sized for the configured crop."""
    h = cfg.crop_height + 2 * cfg.margin
    w = cfg.crop_width + 2 * cfg.margin
    gen = substream(seed, "corpus")
    sa = int(gen.integers(0, 2 ** 31))
    sb = int(gen.integers(0, 2 ** 31))
    return [procedural_texture(sa, (h, w))], [procedural_texture(sb, (h, w))]


# ---------------------------------------------------------------------------
# disk layout: seq_<seed>/input_%02d.png, gt_b_%02d.png, gt_r_%02d.png or
# gt_alpha_%02d.png, meta.json.  GT layers use 16-bit PNG.

def save_image(path, img: np.ndarray, bits: int = 16) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    peak = 65535 if bits == 16 else 255
    q = np.round(np.clip(img, 0.0, 1.0) * peak).astype(np.uint16 if bits == 16 else np.uint8)
    if q.shape[2] == 3:
        q = q[:, :, ::-1]  # cv2 stores BGR
    else:
        q = q[:, :, 0]
    if not cv2.imwrite(str(path), q):
        raise IOError(f"failed to write {path}")


def load_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read {path}")
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / peak
    if img.ndim == 2:
        return img[:, :, None]
    return img[:, :, ::-1].copy()


def save_sample(out_dir, sample: SyntheticSample, cfg: GeneratorConfig | None = None) -> Path:
    d = Path(out_dir) / f"seq_{sample.seed}"
    d.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(sample.inputs):
        save_image(d / f"input_{t:02d}.png", img)
    for t, img in enumerate(sample.gt_background):
        save_image(d / f"gt_b_{t:02d}.png", img)
    if sample.mode == "reflection":
        for t, img in enumerate(sample.gt_obstruction):
            save_image(d / f"gt_r_{t:02d}.png", img)
    else:
        for t, a in enumerate(sample.gt_alpha):
            save_image(d / f"gt_alpha_{t:02d}.png", a)
    meta = {
        "seed": sample.seed,
        "mode": sample.mode,
        "sigma": sample.sigma,
        "beta": sample.beta,
        "frames": len(sample.inputs),
        "homographies_background": [h.reshape(-1).tolist() for h in sample.homographies_background],
        "homographies_obstruction": [h.reshape(-1).tolist() for h in sample.homographies_obstruction],
    }
    if cfg is not None:
        meta["generator_config"] = asdict(cfg)
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    return d


def load_sample(seq_dir) -> SyntheticSample:
    d = Path(seq_dir)
    meta = json.loads((d / "meta.json").read_text())
    n = meta["frames"]
    inputs = [load_image(d / f"input_{t:02d}.png") for t in range(n)]
    gt_b = [load_image(d / f"gt_b_{t:02d}.png") for t in range(n)]
    gt_r = None
    gt_alpha = None
    if meta["mode"] == "reflection":
        gt_r = [load_image(d / f"gt_r_{t:02d}.png") for t in range(n)]
    else:
        gt_alpha = [load_image(d / f"gt_alpha_{t:02d}.png")[:, :, 0] for t in range(n)]
    hb = [np.array(h).reshape(3, 3) for h in meta["homographies_background"]]
    ho = [np.array(h).reshape(3, 3) for h in meta["homographies_obstruction"]]
    return SyntheticSample(inputs=inputs, gt_background=gt_b, gt_obstruction=gt_r,
                           gt_alpha=gt_alpha, homographies_background=hb,
                           homographies_obstruction=ho, mode=meta["mode"],
                           sigma=meta["sigma"], beta=meta["beta"], seed=meta["seed"])
