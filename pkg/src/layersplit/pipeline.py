"""Coarse-to-fine decomposition pipeline, training, and online optimization.

``decompose`` runs the full hierarchy: uniform flow decomposition at the
coarsest level, averaging initialization, then per level residual
reconstruction of both layers followed by dense flow re-estimation on
the reconstructed layers.  ``train_flowinit`` / ``train_fusion``
implement the two-stage supervised training; ``online_finetune`` runs
the unsupervised per-sequence optimization, updating only the
reconstruction networks while flow values are held constant.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import core
from . import fusion as fus
from .denseflow import LucasKanadeEstimator
from .flowinit import FlowInitModel, decomposition_loss
from .losses import LossConfig, online_loss, supervised_loss
from .rng import substream

__all__ = [
    "PipelineConfig",
    "Models",
    "DecompositionResult",
    "decompose",
    "rollout",
    "train_flowinit",
    "train_fusion",
    "online_finetune",
    "validation_loss",
    "prepare_flow_targets",
]


@dataclass
class PipelineConfig:
    frames: int = 5
    levels: int = 4            # hierarchy depth L; pyramid holds L+1 levels
    keyframe: int | None = None  # None -> temporal centre
    mode: str = "reflection"   # or "occlusion"
    flow_init: str = "uniform"  # "uniform" | "zero"
    fusion_method: str = "network"  # "network" | "mean" | "median"
    feature_width: int = 16
    hidden: int = 32
    stage1_iterations: int = 2000   # paper scale: 100k + 100k
    stage2_iterations: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-4     # decays 10x at the halfway point
    online_iterations: int = 200    # paper scale: 1000
    online_learning_rate: float = 1e-4
    online_flow_stride: int = 1     # recompute flows every N online steps
    seed: int = 0

    def resolve_keyframe(self) -> int:
        k = self.frames // 2 if self.keyframe is None else self.keyframe
        if not 0 <= k < self.frames:
            raise ValueError(f"keyframe {k} out of range for {self.frames} frames")
        return k


class Models:
    """Model bundle: flow decomposition net, two fusion nets, flow estimator."""

    def __init__(self, cfg: PipelineConfig, flow_estimator: LucasKanadeEstimator | None = None):
        self.cfg = cfg
        self.flow_init = FlowInitModel(feature_width=cfg.feature_width,
                                       hidden=cfg.hidden, seed=cfg.seed)
        if cfg.mode == "reflection":
            self.fusion_b = fus.FusionNetwork(cfg.frames, "background",
                                              hidden=cfg.hidden, seed=cfg.seed + 1)
            self.fusion_r = fus.FusionNetwork(cfg.frames, "obstruction",
                                              hidden=cfg.hidden, seed=cfg.seed + 2)
        else:
            self.fusion_b = fus.FusionNetwork(cfg.frames, "background_with_alpha",
                                              hidden=cfg.hidden, seed=cfg.seed + 1)
            self.fusion_r = None
        self.flow_estimator = flow_estimator or LucasKanadeEstimator()

    def fusion_parameters(self):
        params = self.fusion_b.parameters()
        if self.fusion_r is not None:
            params += self.fusion_r.parameters()
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"flowinit/{k}": v for k, v in self.flow_init.state_dict().items()}
        out.update({f"fusion_b/{k}": v for k, v in self.fusion_b.state_dict().items()})
        if self.fusion_r is not None:
            out.update({f"fusion_r/{k}": v for k, v in self.fusion_r.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.flow_init.load_state_dict(
            {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith("flowinit/")})
        self.fusion_b.load_state_dict(
            {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith("fusion_b/")})
        if self.fusion_r is not None:
            self.fusion_r.load_state_dict(
                {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith("fusion_r/")})

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(ad.load_checkpoint(path))

    def flowinit_checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.flow_init.params):
            h.update(self.flow_init.params[k].data.tobytes())
        return h.hexdigest()


@dataclass
class DecompositionResult:
    background: np.ndarray
    obstruction: np.ndarray | None
    alpha: np.ndarray | None
    levels_background: list
    levels_obstruction: list
    flows: list                  # per level: {j: {"background": fwd flow, ...}}
    keyframe: int
    original_size: tuple
    trace: list = field(default_factory=list)
    elapsed_seconds: float = 0.0


class _Rollout:
    """Graph-carrying intermediate state of one decomposition pass."""

    def __init__(self):
        self.levels_b: list[ad.Tensor] = []
        self.levels_o: list[ad.Tensor] = []
        self.flows_fwd: list = []   # per level: {layer: {j: (flow, mask)}}
        self.flows_bwd: list = []   # per level: {j: {layer: (flow, mask)}}
        self.pyramids: list = []
        self.keyframe: int = 0
        self.original_size: tuple = (0, 0)
        self.uniform_vectors: dict = {}

    def captured_flows(self):
        return (self.flows_fwd, self.flows_bwd, self.uniform_vectors)


def _zero_flow(shape, dtype=np.float64):
    return np.zeros(shape + (2,), dtype=dtype)


def rollout(frames, models: Models, cfg: PipelineConfig,
            flows_override=None, refine_last=True) -> _Rollout:
    """Run one coarse-to-fine pass, returning per-level layer Tensors.

    ``flows_override``, when given, replaces both the coarsest-level
    decomposition and the per-level dense re-estimation with previously
    captured flows (used by the online loop's flow-recompute stride).
    ``refine_last=False`` skips the dense flow re-estimation at the
    finest level; supervised training never consumes those flows.
    """
    if len(frames) != cfg.frames:
        raise ValueError(f"expected {cfg.frames} frames, got {len(frames)}")
    if cfg.mode not in ("reflection", "occlusion"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    state = _Rollout()
    k = state.keyframe = cfg.resolve_keyframe()
    mult = 2 ** cfg.levels
    padded = []
    for f in frames:
        p, orig = core.pad_to_multiple(np.asarray(f, dtype=np.float32), mult)
        padded.append(p)
    state.original_size = orig
    state.pyramids = [core.build_pyramid(p, cfg.levels + 1) for p in padded]
    t = cfg.frames
    h0, w0 = state.pyramids[0][0].shape[:2]

    # ----- level 0: uniform flow decomposition + averaging init
    if flows_override is not None:
        state.flows_fwd, state.flows_bwd, state.uniform_vectors = flows_override
        fwd0 = state.flows_fwd[0]
    else:
        vecs = {}
        if cfg.flow_init == "uniform":
            coarse = [pyr[0].astype(np.float32) for pyr in state.pyramids]
            feats = [models.flow_init.extract_features(c) for c in coarse]
            for j in range(t):
                for kk in (p for p in range(t) if p != j):
                    vecs[(j, kk)] = models.flow_init.predict_pair(feats[j], feats[kk])
        elif cfg.flow_init != "zero":
            raise ValueError(f"unknown flow_init {cfg.flow_init!r}")
        state.uniform_vectors = vecs

        def uniform_field(pair, sl):
            if pair in vecs:
                return core.tile_flow(vecs[pair][sl], h0, w0)
            return _zero_flow((h0, w0))

        fwd0 = {"background": {}, "obstruction": {}}
        bwd0 = {}
        for j in range(t):
            fb = uniform_field((j, k), slice(0, 2)) if j != k else _zero_flow((h0, w0))
            fr = uniform_field((j, k), slice(2, 4)) if j != k else _zero_flow((h0, w0))
            _, mb = core.warp_bilinear(state.pyramids[j][0], fb)
            _, mr = core.warp_bilinear(state.pyramids[j][0], fr)
            fwd0["background"][j] = (fb, mb)
            fwd0["obstruction"][j] = (fr, mr)
            if j != k:
                bb = uniform_field((k, j), slice(0, 2))
                br = uniform_field((k, j), slice(2, 4))
                bwd0[j] = {"background": (bb, np.ones((h0, w0))),
                           "obstruction": (br, np.ones((h0, w0)))}
        state.flows_fwd = [fwd0]
        state.flows_bwd = [bwd0]

    frames0 = [pyr[0] for pyr in state.pyramids]
    b0, r0 = fus.init_coarse_layers(
        frames0,
        [fwd0["background"][j][0] for j in range(t)],
        [fwd0["obstruction"][j][0] for j in range(t)] if cfg.mode == "reflection" else None)
    state.levels_b = [ad.constant(b0.astype(np.float32))]
    if cfg.mode == "reflection":
        state.levels_o = [ad.constant(r0.astype(np.float32))]
    else:
        state.levels_o = [ad.constant(np.full((h0, w0, 1), 0.5, dtype=np.float32))]

    # ----- levels 1..L: reconstruct, then re-estimate flows
    for lvl in range(1, cfg.levels + 1):
        key_img = state.pyramids[k][lvl]

        def registered(layer):
            warped, diffs, masks = [], [], []
            for j in range(t):
                prev_flow = state.flows_fwd[lvl - 1][layer][j][0]
                fl = core.upsample2x(prev_flow, is_flow=True)
                wimg, m = core.warp_bilinear(state.pyramids[j][lvl], fl)
                warped.append(wimg)
                diffs.append(core.difference_map(wimg, key_img))
                masks.append(m)
            return warped, diffs, masks

        warped_b, diffs_b, masks_b = registered("background")
        prev_b_up = ad.upsample2x(state.levels_b[lvl - 1])
        prev_o_up = ad.upsample2x(state.levels_o[lvl - 1])

        if cfg.mode == "reflection":
            warped_r, diffs_r, masks_r = registered("obstruction")
            if cfg.fusion_method == "network":
                in_b = fus.LevelInputs(warped_b, diffs_b, masks_b, prev_b_up, prev_o_up)
                in_r = fus.LevelInputs(warped_r, diffs_r, masks_r, prev_b_up, prev_o_up)
                b_l = fus.reconstruct_layer(in_b, models.fusion_b)
                o_l = fus.reconstruct_layer(in_r, models.fusion_r)
            else:
                b_l = ad.constant(fus.fuse_baseline(warped_b, masks_b, cfg.fusion_method, k))
                o_l = ad.constant(fus.fuse_baseline(warped_r, masks_r, cfg.fusion_method, k))
        else:
            in_b = fus.LevelInputs(warped_b, diffs_b, masks_b, prev_b_up, prev_o_up)
            if cfg.fusion_method == "network":
                b_l, o_l = fus.reconstruct_with_alpha(in_b, models.fusion_b)
            else:
                b_l = ad.constant(fus.fuse_baseline(warped_b, masks_b, cfg.fusion_method, k))
                o_l = ad.upsample2x(state.levels_o[lvl - 1])
        state.levels_b.append(b_l)
        state.levels_o.append(o_l)

        if flows_override is None and (refine_last or lvl < cfg.levels):
            fwd, bwd = _refine_flows(state, lvl, models, cfg)
            state.flows_fwd.append(fwd)
            state.flows_bwd.append(bwd)
    return state


def _refine_flows(state: _Rollout, lvl: int, models: Models, cfg: PipelineConfig):
    """Dense flow re-estimation at level ``lvl`` on the reconstructed layers.

    Only the keyframe's layers exist, so the other frames' layers are
    approximated by subtracting the complementary layer (warped into the
    frame's geometry with the previous-level flow) from the raw frame.
    The estimator output is a constant for autodiff purposes.
    """
    t = cfg.frames
    k = state.keyframe
    est = models.flow_estimator
    b_val = state.levels_b[lvl].data
    o_val = state.levels_o[lvl].data
    fwd = {"background": {}, "obstruction": {}}
    bwd = {}
    zero = _zero_flow(b_val.shape[:2])
    ones = np.ones(b_val.shape[:2])
    fwd["background"][k] = (zero, ones)
    fwd["obstruction"][k] = (zero.copy(), ones)
    for j in range(t):
        if j == k:
            continue
        frame_j = state.pyramids[j][lvl]
        prev_bwd = state.flows_bwd[lvl - 1][j]
        fb_up = core.upsample2x(prev_bwd["background"][0], is_flow=True)
        if cfg.mode == "reflection":
            fo_up = core.upsample2x(prev_bwd["obstruction"][0], is_flow=True)
            refl_in_j, _ = core.warp_bilinear(o_val, fo_up)
            bg_proxy = frame_j - refl_in_j
            back_in_j, _ = core.warp_bilinear(b_val, fb_up)
            obs_proxy = frame_j - back_in_j
            f_or = est.estimate_flow(obs_proxy, o_val)
            f_ro = est.estimate_flow(o_val, obs_proxy)
            _, m_or = core.warp_bilinear(frame_j, f_or)
            _, m_ro = core.warp_bilinear(o_val, f_ro)
            fwd["obstruction"][j] = (f_or, m_or)
        else:
            bg_proxy = frame_j
        f_bk = est.estimate_flow(bg_proxy, b_val)
        f_kb = est.estimate_flow(b_val, bg_proxy)
        _, m_bk = core.warp_bilinear(frame_j, f_bk)
        _, m_kb = core.warp_bilinear(b_val, f_kb)
        fwd["background"][j] = (f_bk, m_bk)
        bwd[j] = {"background": (f_kb, m_kb)}
        if cfg.mode == "reflection":
            bwd[j]["obstruction"] = (f_ro, m_ro)
    return fwd, bwd


def _result_from_state(state: _Rollout, cfg: PipelineConfig, trace=None,
                       elapsed=0.0) -> DecompositionResult:
    oh, ow = state.original_size
    background = np.clip(core.crop_to(state.levels_b[-1].data.astype(np.float64), oh, ow), 0.0, 1.0)
    obstruction = None
    alpha = None
    final_o = core.crop_to(state.levels_o[-1].data.astype(np.float64), oh, ow)
    if cfg.mode == "reflection":
        obstruction = np.clip(final_o, 0.0, 1.0)
    else:
        alpha = np.clip(final_o[:, :, 0], 0.0, 1.0)
    flows = [{j: {layer: lv[layer][j][0] for layer in lv if j in lv[layer]}
              for j in range(cfg.frames)}
             for lv in state.flows_fwd]
    return DecompositionResult(
        background=background, obstruction=obstruction, alpha=alpha,
        levels_background=[l.data.copy() for l in state.levels_b],
        levels_obstruction=[l.data.copy() for l in state.levels_o],
        flows=flows, keyframe=state.keyframe, original_size=state.original_size,
        trace=trace or [], elapsed_seconds=elapsed)


def decompose(frames, models: Models, cfg: PipelineConfig) -> DecompositionResult:
    """Deterministic full decomposition of one sequence."""
    start = time.perf_counter()
    state = rollout(frames, models, cfg)
    return _result_from_state(state, cfg, elapsed=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# training


def _gt_coarse_pair_flows(sample, models: Models, cfg: PipelineConfig):
    """Ground-truth coarsest-scale dense flows for every ordered pair."""
    est = models.flow_estimator
    mult = 2 ** cfg.levels
    t = cfg.frames

    def coarse_flow(imgs, j, kk):
        a, _ = core.pad_to_multiple(imgs[j], mult)
        b, _ = core.pad_to_multiple(imgs[kk], mult)
        flow = est.estimate_flow(a, b)
        for _ in range(cfg.levels):
            flow = core.downsample2x(flow, is_flow=True)
        return flow

    bg = {}
    obs = {}
    for kk in range(t):
        for j in range(t):
            if j == kk:
                continue
            bg[(j, kk)] = coarse_flow(sample.gt_background, j, kk)
            if cfg.mode == "reflection":
                obs[(j, kk)] = coarse_flow(sample.gt_obstruction, j, kk)
            else:
                obs[(j, kk)] = np.zeros_like(bg[(j, kk)])
    return {"background": bg, "obstruction": obs}


def prepare_flow_targets(samples, models: Models, cfg: PipelineConfig) -> list:
    """Cache stage-1 supervision flows (dense flow on GT layers, downsampled)."""
    return [_gt_coarse_pair_flows(s, models, cfg) for s in samples]


def _learning_rate(cfg, iteration, total):
    return cfg.learning_rate if iteration < total // 2 else cfg.learning_rate * 0.1


def train_flowinit(samples, models: Models, cfg: PipelineConfig,
                   flow_targets=None) -> list:
    """Stage 1: train the flow decomposition network only.  Returns the loss trace."""
    if not samples:
        raise ValueError("train_flowinit: empty dataset")
    if flow_targets is None:
        flow_targets = prepare_flow_targets(samples, models, cfg)
    gen = substream(cfg.seed, "train-init")
    opt = ad.Adam(models.flow_init.parameters(), lr=cfg.learning_rate)
    mult = 2 ** cfg.levels
    coarse_cache = []
    for s in samples:
        padded = [core.pad_to_multiple(np.asarray(f), mult)[0] for f in s.inputs]
        pyr0 = [core.build_pyramid(p, cfg.levels + 1)[0].astype(np.float32) for p in padded]
        coarse_cache.append(pyr0)
    trace = []
    t = cfg.frames
    for it in range(cfg.stage1_iterations):
        opt.lr = _learning_rate(cfg, it, cfg.stage1_iterations)
        idxs = gen.integers(0, len(samples), size=cfg.batch_size)
        batch_terms = []
        for idx in idxs:
            feats = [models.flow_init.extract_features(c) for c in coarse_cache[idx]]
            preds = {}
            for kk in range(t):
                for j in range(t):
                    if j != kk:
                        preds[(j, kk)] = models.flow_init.estimate_uniform_flows(feats[j], feats[kk])
            batch_terms.append(decomposition_loss(
                preds, flow_targets[idx]["background"], flow_targets[idx]["obstruction"]))
        loss = batch_terms[0]
        for term in batch_terms[1:]:
            loss = ad.add(loss, term)
        loss = ad.scale(loss, 1.0 / len(batch_terms))
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"stage-1 loss diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.data))
    return trace


def _gt_pyramids(sample, k, cfg: PipelineConfig):
    mult = 2 ** cfg.levels
    gb, _ = core.pad_to_multiple(np.asarray(sample.gt_background[k]), mult)
    gt_b = core.build_pyramid(gb, cfg.levels + 1)
    if cfg.mode == "reflection":
        go, _ = core.pad_to_multiple(np.asarray(sample.gt_obstruction[k]), mult)
    else:
        go, _ = core.pad_to_multiple(np.asarray(sample.gt_alpha[k])[:, :, None], mult)
    gt_o = core.build_pyramid(go, cfg.levels + 1)
    return gt_b, gt_o


def rollout_supervised_loss(sample, models: Models, cfg: PipelineConfig,
                            loss_cfg: LossConfig = LossConfig()) -> ad.Tensor:
    k = cfg.resolve_keyframe()
    state = rollout(sample.inputs, models, cfg, refine_last=False)
    gt_b, gt_o = _gt_pyramids(sample, k, cfg)
    return supervised_loss(state.levels_b, state.levels_o, gt_b, gt_o,
                           cfg.frames, loss_cfg)


def train_fusion(samples, models: Models, cfg: PipelineConfig,
                 loss_cfg: LossConfig = LossConfig()) -> list:
    """Stage 2: train the reconstruction networks; flow decomposition frozen."""
    if not samples:
        raise ValueError("train_fusion: empty dataset")
    frozen = models.flowinit_checksum()
    gen = substream(cfg.seed, "train-fusion")
    opt = ad.Adam(models.fusion_parameters(), lr=cfg.learning_rate)
    trace = []
    for it in range(cfg.stage2_iterations):
        opt.lr = _learning_rate(cfg, it, cfg.stage2_iterations)
        idxs = gen.integers(0, len(samples), size=cfg.batch_size)
        terms = [rollout_supervised_loss(samples[idx], models, cfg, loss_cfg) for idx in idxs]
        loss = terms[0]
        for term in terms[1:]:
            loss = ad.add(loss, term)
        loss = ad.scale(loss, 1.0 / len(terms))
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"stage-2 loss diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.data))
    if models.flowinit_checksum() != frozen:
        raise AssertionError("stage-2 training modified the frozen flow decomposition network")
    return trace


def validation_loss(samples, models: Models, cfg: PipelineConfig,
                    loss_cfg: LossConfig = LossConfig()) -> float:
    """Mean supervised loss over a held-out set (no parameter updates)."""
    vals = [float(rollout_supervised_loss(s, models, cfg, loss_cfg).data) for s in samples]
    return float(np.mean(vals))


def online_finetune(frames, models: Models, cfg: PipelineConfig,
                    loss_cfg: LossConfig = LossConfig()):
    """Per-sequence unsupervised fine-tuning of the fusion networks.

    Flows are re-estimated every ``online_flow_stride`` iterations and
    treated as constants in between; the best-loss parameter state is
    restored at the end.  Returns (models, DecompositionResult).
    """
    start = time.perf_counter()
    frozen = models.flowinit_checksum()
    opt = ad.Adam(models.fusion_parameters(), lr=cfg.online_learning_rate)
    k = cfg.resolve_keyframe()
    pyramids = None
    cached = None
    trace = []
    best = (np.inf, None)
    for it in range(cfg.online_iterations):
        if cached is None or it % max(cfg.online_flow_stride, 1) == 0:
            state = rollout(frames, models, cfg)
            cached = state.captured_flows()
        else:
            state = rollout(frames, models, cfg, flows_override=cached)
        if pyramids is None:
            pyramids = state.pyramids
        loss = online_loss(state.levels_b, state.levels_o, state.flows_bwd,
                           state.pyramids, k, loss_cfg, mode=cfg.mode)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(
                f"online loss diverged at iteration {it}; trace: {trace[-5:]}")
        trace.append(value)
        if value < best[0]:
            best = (value, {p.name + f"#{i}": p.data.copy()
                            for i, p in enumerate(models.fusion_parameters())})
        opt.zero_grad()
        loss.backward()
        opt.step()
    if best[1] is not None:
        for i, p in enumerate(models.fusion_parameters()):
            p.data = best[1][p.name + f"#{i}"].copy()
    if models.flowinit_checksum() != frozen:
        raise AssertionError("online optimization modified the flow decomposition network")
    state = rollout(frames, models, cfg)
    result = _result_from_state(state, cfg, trace=trace,
                                elapsed=time.perf_counter() - start)
    return models, result
