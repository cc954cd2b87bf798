"""Per-level layer reconstruction.

The coarsest estimate is the average of the flow-registered frames; at
each finer level a small conv network predicts a residual on top of the
upsampled previous estimate.  Input channel layout is fixed:
``[warped frames | difference maps | masks | B_up | R_up]`` (the
obstruction slot becomes the alpha map in occlusion mode).  Background
and obstruction networks share the architecture but never parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import core

__all__ = [
    "FusionNetwork",
    "LevelInputs",
    "init_coarse_layers",
    "fuse_baseline",
    "reconstruct_layer",
    "reconstruct_with_alpha",
]


@dataclass
class LevelInputs:
    """Everything the reconstruction network sees at one level.

    ``prev_background`` / ``prev_obstruction`` are the already-upsampled
    previous-level estimates (Tensors).  In occlusion mode
    ``prev_obstruction`` holds the upsampled alpha map (H, W, 1).
    """

    warped: list            # T arrays (H, W, C)
    diffs: list             # T arrays (H, W, C)
    masks: list             # T arrays (H, W)
    prev_background: ad.Tensor
    prev_obstruction: ad.Tensor


class FusionNetwork:
    """Residual reconstruction network g_B or g_R.

    ``mode`` is one of ``background``, ``obstruction``,
    ``background_with_alpha``; the alpha variant emits one extra output
    channel squashed by a sigmoid.  The last layer is zero-initialized
    so an untrained network is exactly the identity on the upsampled
    previous estimate (and alpha starts at the activation midpoint).
    """

    def __init__(self, frames: int, mode: str = "background", channels: int = 3,
                 hidden: int = 32, seed: int = 0, dtype=np.float32):
        if mode not in ("background", "obstruction", "background_with_alpha"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.frames = frames
        self.channels = channels
        if mode == "background_with_alpha":
            # alpha replaces the obstruction slot in the input stack
            self.in_channels = frames * (2 * channels + 1) + channels + 1
            out_channels = channels + 1
        else:
            self.in_channels = frames * (2 * channels + 1) + 2 * channels
            out_channels = channels
        gen = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xF5])
        from .flowinit import _conv_init
        p = {}
        p["conv1.w"], p["conv1.b"] = _conv_init(gen, self.in_channels, hidden, dtype)
        p["conv2.w"], p["conv2.b"] = _conv_init(gen, hidden, hidden, dtype)
        p["conv3.w"], p["conv3.b"] = _conv_init(gen, hidden, out_channels, dtype, zero=True)
        self.params = {k: ad.Parameter(v, k) for k, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        for k, p in self.params.items():
            p.data = np.asarray(state[k], dtype=p.data.dtype).reshape(p.data.shape).copy()

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if x.data.shape[2] != self.in_channels:
            raise ValueError(
                f"fusion input has {x.data.shape[2]} channels, network expects {self.in_channels}")
        p = self.params
        y = ad.leaky_relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"]))
        y = ad.leaky_relu(ad.conv2d(y, p["conv2.w"], p["conv2.b"]))
        return ad.conv2d(y, p["conv3.w"], p["conv3.b"])


def init_coarse_layers(frames0: list, flows_background: list, flows_obstruction: list | None,
                       dtype=np.float64) -> tuple[np.ndarray, np.ndarray | None]:
    """Coarsest-level estimates by averaging flow-registered frames.

    ``flows_*[j]`` is the (H0, W0, 2) field aligning frame j to the
    keyframe (zero for j == k).  Returns (B0, R0); R0 is None when
    obstruction flows are not supplied (occlusion mode).
    """
    if not frames0:
        raise ValueError("init_coarse_layers: empty frame list")

    def avg(flows):
        acc = np.zeros_like(np.asarray(frames0[0], dtype=dtype))
        for frame, flow in zip(frames0, flows):
            warped, _ = core.warp_bilinear(frame, flow)
            acc += warped
        return acc / len(frames0)

    b0 = avg(flows_background)
    r0 = avg(flows_obstruction) if flows_obstruction is not None else None
    return b0, r0


def fuse_baseline(warped: list, masks: list, method: str = "mean",
                  key_index: int | None = None) -> np.ndarray:
    """Per-pixel temporal mean or median over frames with mask == 1.

    Even counts take the lower of the two middle values, so the median
    is always a selection.  Pixels valid in no frame copy the keyframe's
    warped value.
    """
    if method not in ("mean", "median"):
        raise ValueError(f"unknown fuse method {method!r}")
    stack = np.stack([np.asarray(x, dtype=np.float64) for x in warped])  # (T, H, W, C)
    msk = np.stack([np.asarray(m, dtype=np.float64) for m in masks])[:, :, :, None]
    t = stack.shape[0]
    if key_index is None:
        key_index = t // 2
    counts = msk.sum(axis=0)
    if method == "mean":
        total = (stack * msk).sum(axis=0)
        out = np.where(counts > 0, total / np.maximum(counts, 1), stack[key_index])
    else:
        big = np.where(np.broadcast_to(msk, stack.shape) > 0, stack, np.inf)
        srt = np.sort(big, axis=0)
        n = counts.astype(np.intp)
        pick = np.maximum(n - 1, 0) // 2
        out = np.take_along_axis(srt, pick[None], axis=0)[0]
        out = np.where(counts > 0, out, stack[key_index])
    return out


def _stack_inputs(inputs: LevelInputs, dtype) -> ad.Tensor:
    parts = [ad.constant(np.asarray(w, dtype=dtype)) for w in inputs.warped]
    parts += [ad.constant(np.asarray(d, dtype=dtype)) for d in inputs.diffs]
    parts += [ad.constant(np.asarray(m, dtype=dtype)[:, :, None]) for m in inputs.masks]
    parts += [inputs.prev_background, inputs.prev_obstruction]
    return ad.concat_channels(parts)


def reconstruct_layer(inputs: LevelInputs, net: FusionNetwork) -> ad.Tensor:
    """Residual reconstruction: g(concat(inputs)) + upsampled previous."""
    if net.mode == "background_with_alpha":
        raise ValueError("use reconstruct_with_alpha for the alpha variant")
    x = _stack_inputs(inputs, net.params["conv1.w"].data.dtype)
    prev = inputs.prev_background if net.mode == "background" else inputs.prev_obstruction
    return ad.add(net(x), prev)


def reconstruct_with_alpha(inputs: LevelInputs, net: FusionNetwork) -> tuple[ad.Tensor, ad.Tensor]:
    """Occlusion-mode variant: residual background plus sigmoid alpha map."""
    if net.mode != "background_with_alpha":
        raise ValueError("reconstruct_with_alpha requires a background_with_alpha network")
    x = _stack_inputs(inputs, net.params["conv1.w"].data.dtype)
    y = net(x)
    c = net.channels
    background = ad.add(ad.narrow(y, 2, 0, c), inputs.prev_background)
    alpha = ad.sigmoid(ad.narrow(y, 2, c, c + 1))
    return background, alpha
