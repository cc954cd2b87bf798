"""Training and online-optimization losses.

Supervised training combines a per-level L1 reconstruction loss with a
forward-difference gradient loss (weight 1).  Online optimization
combines a warping-consistency loss (the predicted layers, warped back,
must recomposite every input frame) with a total-variation prior
(weight 0.1).  All L1 terms are per-pixel means so the weights stay
resolution-independent, and every per-(frame, level) term carries the
uniform 1/(T*L) weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = ["LossConfig", "supervised_loss", "online_loss"]


@dataclass(frozen=True)
class LossConfig:
    lambda_grad: float = 1.0
    lambda_tv: float = 0.1


def _grad_l1(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    gx = ad.mean(ad.abs_(ad.sub(ad.grad_x(a), ad.grad_x(b))))
    gy = ad.mean(ad.abs_(ad.sub(ad.grad_y(a), ad.grad_y(b))))
    return ad.add(gx, gy)


def _acc(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def supervised_loss(pred_background: list, pred_obstruction: list,
                    gt_background: list, gt_obstruction: list,
                    frames: int, cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """L1 + gradient loss over all levels and both layers.

    ``pred_*`` are per-level Tensors (coarsest first); ``gt_*`` are the
    matching ground-truth pyramids (arrays).  In occlusion mode the
    obstruction slot carries the alpha maps.  Normalization is
    1/(frames * depth) with depth = level count - 1.
    """
    if len(pred_background) != len(gt_background) or len(pred_obstruction) != len(gt_obstruction):
        raise ValueError("supervised_loss: level-count mismatch")
    depth = max(len(pred_background) - 1, 1)
    weight = 1.0 / (frames * depth)
    terms = []
    for pred_levels, gt_levels in ((pred_background, gt_background),
                                   (pred_obstruction, gt_obstruction)):
        for pred, gt in zip(pred_levels, gt_levels):
            gt_t = ad.constant(np.asarray(gt, dtype=pred.data.dtype))
            pixel = ad.mean(ad.abs_(ad.sub(pred, gt_t)))
            term = ad.add(pixel, ad.scale(_grad_l1(pred, gt_t), cfg.lambda_grad))
            terms.append(ad.scale(term, weight))
    return _acc(terms)


def online_loss(levels_background: list, levels_obstruction: list,
                backward_flows: list, frame_pyramids: list, keyframe: int,
                cfg: LossConfig = LossConfig(), mode: str = "reflection") -> ad.Tensor:
    """Unsupervised warping-consistency + total-variation loss.

    ``backward_flows[l][j]`` holds, for each non-key frame j, the
    constant flow/mask pairs warping the keyframe layers into frame j's
    geometry: ``{"background": (flow, mask), "obstruction": (flow, mask)
    or None}``.  ``frame_pyramids[j][l]`` is frame j at level l.  Warp
    flows are constants; gradients reach only the layer estimates.
    Pixels whose warp left the image are excluded from the mean.

    Occlusion mode composites ``(1 - alpha) * warped_B + alpha * I_k``
    with the alpha map anchored at the keyframe (no obstruction flow).
    """
    depth = max(len(levels_background) - 1, 1)
    frames = len(frame_pyramids)
    weight = 1.0 / (frames * depth)
    terms = []
    for l, (b_l, o_l) in enumerate(zip(levels_background, levels_obstruction)):
        for j, flows in backward_flows[l].items():
            if j == keyframe:
                continue
            target = ad.constant(np.asarray(frame_pyramids[j][l], dtype=b_l.data.dtype))
            bf, bmask = flows["background"]
            warped_b = ad.bilinear_warp(b_l, ad.constant(bf.astype(b_l.data.dtype)))
            if mode == "reflection":
                if flows.get("obstruction") is None:
                    raise KeyError(f"missing obstruction flow for frame {j} level {l}")
                of, omask = flows["obstruction"]
                warped_o = ad.bilinear_warp(o_l, ad.constant(of.astype(o_l.data.dtype)))
                composite = ad.add(warped_b, warped_o)
                mask = bmask * omask
            else:
                # alpha (o_l) stays keyframe-anchored; obstruction colour
                # is carried by the keyframe itself
                key = np.asarray(frame_pyramids[keyframe][l], dtype=b_l.data.dtype)
                alpha3 = ad.concat_channels([o_l] * key.shape[2])
                one = ad.constant(np.ones_like(key))
                composite = ad.add(
                    ad.mul(ad.sub(one, alpha3), warped_b),
                    ad.mul(alpha3, ad.constant(key)))
                mask = bmask
            terms.append(ad.scale(ad.l1_mean(composite, target, mask=mask), weight))
        tv = ad.add(
            ad.add(ad.mean(ad.abs_(ad.grad_x(b_l))), ad.mean(ad.abs_(ad.grad_y(b_l)))),
            ad.add(ad.mean(ad.abs_(ad.grad_x(o_l))), ad.mean(ad.abs_(ad.grad_y(o_l)))))
        terms.append(ad.scale(tv, cfg.lambda_tv * weight))
    return _acc(terms)
