"""Coarsest-level motion decomposition.

A small conv feature extractor runs on the coarsest pyramid level of
every frame; per frame pair, a correlation cost volume (search radius 4)
is concatenated with the source features and a conv + global-average-
pool + fully-connected head regresses two global 2-vectors: one uniform
motion for the background layer and one for the obstruction layer.
Output slot 0 is trained against the background ground truth, which
fixes the channel assignment.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import core

__all__ = [
    "FlowInitModel",
    "build_cost_volume",
    "decomposition_loss",
    "COST_RADIUS",
]

COST_RADIUS = 4


def build_cost_volume(c_j: np.ndarray, c_k: np.ndarray, radius: int = COST_RADIUS) -> np.ndarray:
    """Per-pixel feature correlation over all offsets with |d|_inf <= radius."""
    return ad.correlate_forward(np.asarray(c_j), np.asarray(c_k), radius)


def _conv_init(gen, cin, cout, dtype, zero=False):
    if zero:
        w = np.zeros((3, 3, cin, cout), dtype=dtype)
    else:
        std = np.sqrt(2.0 / (9 * cin))
        w = gen.normal(0.0, std, size=(3, 3, cin, cout)).astype(dtype)
    return w, np.zeros(cout, dtype=dtype)


def _fc_init(gen, n, m, dtype, zero=False):
    if zero:
        w = np.zeros((n, m), dtype=dtype)
    else:
        std = np.sqrt(2.0 / n)
        w = gen.normal(0.0, std, size=(n, m)).astype(dtype)
    return w, np.zeros(m, dtype=dtype)


class FlowInitModel:
    """Feature extractor plus layer-flow head.

    ``predict_pair`` maps features of frames (j, k) to a 4-vector
    ``(uB, vB, uR, vR)`` of coarsest-scale displacements, flow direction
    j -> k (backward-warp convention: warp(frame_j, V) aligns to k).
    """

    def __init__(self, in_channels: int = 3, feature_width: int = 16,
                 hidden: int = 32, radius: int = COST_RADIUS,
                 seed: int = 0, dtype=np.float32):
        self.feature_width = feature_width
        self.radius = radius
        gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xF10])
        side = (2 * radius + 1) ** 2
        p = {}
        p["feat.conv1.w"], p["feat.conv1.b"] = _conv_init(gen, in_channels, feature_width, dtype)
        p["feat.conv2.w"], p["feat.conv2.b"] = _conv_init(gen, feature_width, feature_width, dtype)
        p["feat.conv3.w"], p["feat.conv3.b"] = _conv_init(gen, feature_width, feature_width, dtype)
        p["head.conv1.w"], p["head.conv1.b"] = _conv_init(gen, side + feature_width, hidden, dtype)
        p["head.conv2.w"], p["head.conv2.b"] = _conv_init(gen, hidden, hidden, dtype)
        p["head.fc1.w"], p["head.fc1.b"] = _fc_init(gen, hidden, hidden, dtype)
        p["head.fc2.w"], p["head.fc2.b"] = _fc_init(gen, hidden, 4, dtype, zero=True)
        self.params = {k: ad.Parameter(v, k) for k, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=p.data.dtype).reshape(p.data.shape).copy()

    def _p(self, name):
        return self.params[name]

    def extract_features(self, frame_coarse) -> ad.Tensor:
        """Conv-stack feature map at the coarsest resolution."""
        x = frame_coarse if isinstance(frame_coarse, ad.Tensor) else ad.constant(frame_coarse)
        x = ad.leaky_relu(ad.conv2d(x, self._p("feat.conv1.w"), self._p("feat.conv1.b")))
        x = ad.leaky_relu(ad.conv2d(x, self._p("feat.conv2.w"), self._p("feat.conv2.b")))
        return ad.conv2d(x, self._p("feat.conv3.w"), self._p("feat.conv3.b"))

    def estimate_uniform_flows(self, c_j: ad.Tensor, c_k: ad.Tensor) -> ad.Tensor:
        """Head output for a pair of feature maps; returns a (4,) tensor."""
        cv = ad.correlate(c_j, c_k, self.radius)
        # keep head input O(1) regardless of feature width
        cv = ad.scale(cv, 1.0 / self.feature_width)
        x = ad.concat_channels([cv, c_j])
        x = ad.leaky_relu(ad.conv2d(x, self._p("head.conv1.w"), self._p("head.conv1.b")))
        x = ad.leaky_relu(ad.conv2d(x, self._p("head.conv2.w"), self._p("head.conv2.b")))
        x = ad.global_avg_pool(x)
        x = ad.leaky_relu(ad.fully_connected(x, self._p("head.fc1.w"), self._p("head.fc1.b")))
        return ad.fully_connected(x, self._p("head.fc2.w"), self._p("head.fc2.b"))

    def predict_pair(self, feat_j: ad.Tensor, feat_k: ad.Tensor) -> np.ndarray:
        out = self.estimate_uniform_flows(feat_j, feat_k).data
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite uniform flow prediction")
        return out

    def predict_uniform_flows(self, frames_coarse) -> dict:
        """All ordered-pair predictions for a list of coarsest-level frames.

        Returns ``{(j, k): (vB, vR)}`` with each v a length-2 array.
        """
        feats = [self.extract_features(f) for f in frames_coarse]
        out = {}
        n = len(frames_coarse)
        for k in range(n):
            for j in range(n):
                if j == k:
                    continue
                v = self.predict_pair(feats[j], feats[k])
                out[(j, k)] = (v[0:2].copy(), v[2:4].copy())
        return out


def decomposition_loss(preds: dict, gt_background: dict, gt_obstruction: dict) -> ad.Tensor:
    """Stage-1 supervision: mean-L1 between tiled uniform predictions and
    downsampled ground-truth dense flows, summed over ordered pairs and
    both layers.

    ``preds``: {(j, k): Tensor(4,)}; GT dicts map (j, k) to coarsest
    dense flow fields (H0, W0, 2).
    """
    terms = []
    for pair, out in preds.items():
        if pair not in gt_background or pair not in gt_obstruction:
            raise KeyError(f"missing ground-truth flow for pair {pair}")
        for sl, gt in ((slice(0, 2), gt_background[pair]), (slice(2, 4), gt_obstruction[pair])):
            h, w = gt.shape[:2]
            v = ad.narrow(out, 0, sl.start, sl.stop)
            tiled = ad.tile2d(v, h, w)
            terms.append(ad.mean(ad.abs_(ad.sub(tiled, ad.constant(gt.astype(out.data.dtype))))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
