"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supplies exactly the differentiable operations the layer-flow and
layer-reconstruction networks and the online loss need: dense/conv
layers, activations, bilinear resampling (resize and warp), feature
correlation, and elementwise arithmetic.  Graphs are built dynamically;
``Tensor.backward()`` runs a topologically ordered sweep and accumulates
gradients into every reachable node that requires them.

Arrays keep whatever float dtype they are given; tests run the whole
engine in float64 to make gradient checks decisive, runtime code uses
float32.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import _up2_axis, _up2_axis_adjoint

__all__ = [
    "Tensor",
    "Parameter",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "abs_",
    "total_sum",
    "mean",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "narrow",
    "tile2d",
    "conv2d",
    "fully_connected",
    "global_avg_pool",
    "upsample2x",
    "bilinear_warp",
    "correlate",
    "grad_x",
    "grad_y",
    "l1_mean",
    "Adam",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]


class Tensor:
    """A node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = tuple(parents)
        self._grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def _toposort(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self):
        """Populate ``grad`` on every reachable node requiring gradients.

        The loss must be scalar.  Grads of reachable nodes are reset
        first, so calling backward twice yields identical results.
        """
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar loss")
        order = self._toposort()
        for node in order:
            node.grad = None
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None or g is node.grad else g
                else:
                    parent.grad = parent.grad + g


class Parameter(Tensor):
    """A named trainable tensor; shape is fixed at creation."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return Tensor(a.data + b.data, parents=(a, b), grad_fn=lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), grad_fn=lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    return Tensor(a.data - b.data, parents=(a, b), grad_fn=lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    return Tensor(a.data * b.data, parents=(a, b),
                  grad_fn=lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, parents=(a,), grad_fn=lambda g: (g * s,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    return Tensor(np.abs(a.data), parents=(a,),
                  grad_fn=lambda g: (g * np.sign(a.data),))


def total_sum(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype),)
    return Tensor(a.data.sum(), parents=(a,), grad_fn=grad_fn)


def mean(a: Tensor) -> Tensor:
    return scale(total_sum(a), 1.0 / a.data.size)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    # tie-break: x == 0 takes the negative-slope branch
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope)
    return Tensor(a.data * factor, parents=(a,), grad_fn=lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(s, parents=(a,), grad_fn=lambda g: (g * s * (1.0 - s),))


def concat_channels(tensors) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    hw = tensors[0].data.shape[:2]
    for t in tensors:
        if t.data.ndim != 3 or t.data.shape[:2] != hw:
            raise ValueError("concat_channels: all inputs must be (H, W, C) with equal H, W")
    sizes = [t.data.shape[2] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, :, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=2),
                  parents=tuple(tensors), grad_fn=grad_fn)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor(a.data[idx], parents=(a,), grad_fn=grad_fn)


def tile2d(a: Tensor, height: int, width: int) -> Tensor:
    """Broadcast a (C,) vector to a (H, W, C) map; gradient sums over pixels."""
    if a.data.ndim != 1:
        raise ValueError("tile2d expects a 1-D tensor")
    out = np.broadcast_to(a.data, (height, width, a.data.shape[0])).copy()
    return Tensor(out, parents=(a,), grad_fn=lambda g: (g.sum(axis=(0, 1)),))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 'same'.

    ``x``: (H, W, Cin); ``weight``: (3, 3, Cin, Cout); ``bias``: (Cout,).
    """
    h, w, cin = x.data.shape
    if weight.data.shape[:3] != (3, 3, cin):
        raise ValueError(f"conv2d: weight {weight.data.shape} incompatible with input {x.data.shape}")
    cout = weight.data.shape[3]
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias.data, (h, w, cout)).astype(x.data.dtype).copy()
    for ky in range(3):
        for kx in range(3):
            patch = xp[ky:ky + h, kx:kx + w, :].reshape(h * w, cin)
            out += (patch @ weight.data[ky, kx]).reshape(h, w, cout)

    def grad_fn(g):
        gf = g.reshape(h * w, cout)
        dw = np.zeros_like(weight.data)
        dxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                patch = xp[ky:ky + h, kx:kx + w, :].reshape(h * w, cin)
                dw[ky, kx] = patch.T @ gf
                dxp[ky:ky + h, kx:kx + w, :] += (gf @ weight.data[ky, kx].T).reshape(h, w, cin)
        db = gf.sum(axis=0)
        return (dxp[1:-1, 1:-1, :], dw, db)

    return Tensor(out, parents=(x, weight, bias), grad_fn=grad_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x``: (N,); ``weight``: (N, M); ``bias``: (M,)."""
    if x.data.ndim != 1 or weight.data.shape[0] != x.data.shape[0]:
        raise ValueError("fully_connected: incompatible shapes")

    def grad_fn(g):
        return (weight.data @ g, np.outer(x.data, g), g)

    return Tensor(x.data @ weight.data + bias.data,
                  parents=(x, weight, bias), grad_fn=grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(H, W, C) -> (C,) spatial mean."""
    h, w, c = x.data.shape
    n = h * w

    def grad_fn(g):
        return (np.broadcast_to(g / n, (h, w, c)).astype(x.data.dtype),)

    return Tensor(x.data.mean(axis=(0, 1)), parents=(x,), grad_fn=grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Differentiable 2x bilinear upsampling (same numerics as core.upsample2x)."""
    out = _up2_axis(_up2_axis(x.data, 0), 1)

    def grad_fn(g):
        return (_up2_axis_adjoint(_up2_axis_adjoint(g, 1), 0),)

    return Tensor(out, parents=(x,), grad_fn=grad_fn)


def _warp_indices(shape, flow):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow[:, :, 0]
    sy = ys + flow[:, :, 1]
    inx = (sx >= 0.0) & (sx <= w - 1)
    iny = (sy >= 0.0) & (sy <= h - 1)
    cx = np.clip(sx, 0.0, w - 1)
    cy = np.clip(sy, 0.0, h - 1)
    x0 = np.clip(np.floor(cx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(cy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    return x0, x1, y0, y1, fx, fy, inx, iny


def bilinear_warp(src: Tensor, flow: Tensor) -> Tensor:
    """Backward warp, differentiable w.r.t. both image and flow.

    Matches :func:`layersplit.core.warp_bilinear` values (clamped border
    sampling); the validity mask is not part of the graph.  Where the
    sample coordinate is clamped, the flow gradient in that direction
    is zero.
    """
    sd = src.data
    fd = flow.data
    h, w, c = sd.shape
    x0, x1, y0, y1, fx, fy, inx, iny = _warp_indices((h, w), fd)
    fxc = fx[:, :, None]
    fyc = fy[:, :, None]
    w00 = (1 - fyc) * (1 - fxc)
    w01 = (1 - fyc) * fxc
    w10 = fyc * (1 - fxc)
    w11 = fyc * fxc
    out = sd[y0, x0] * w00 + sd[y0, x1] * w01 + sd[y1, x0] * w10 + sd[y1, x1] * w11

    def grad_fn(g):
        dsrc = None
        if src.requires_grad:
            dsrc = np.zeros_like(sd)
            np.add.at(dsrc, (y0, x0), g * w00)
            np.add.at(dsrc, (y0, x1), g * w01)
            np.add.at(dsrc, (y1, x0), g * w10)
            np.add.at(dsrc, (y1, x1), g * w11)
        dflow = None
        if flow.requires_grad:
            ddx = ((1 - fyc) * (sd[y0, x1] - sd[y0, x0]) + fyc * (sd[y1, x1] - sd[y1, x0]))
            ddy = ((1 - fxc) * (sd[y1, x0] - sd[y0, x0]) + fxc * (sd[y1, x1] - sd[y0, x1]))
            du = (g * ddx).sum(axis=2) * inx
            dv = (g * ddy).sum(axis=2) * iny
            dflow = np.stack([du, dv], axis=2)
        return (dsrc, dflow)

    return Tensor(out, parents=(src, flow), grad_fn=grad_fn)


def _shift2d(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift so that out[y, x] = a[y + dy, x + dx], zero-filled."""
    h, w = a.shape[:2]
    out = np.zeros_like(a)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[ys0:ys1, xs0:xs1] = a[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
    return out


def correlate_forward(cj: np.ndarray, ck: np.ndarray, radius: int) -> np.ndarray:
    """Cost volume: out[x, d] = <cj(x), ck(x + d)> for |d|_inf <= radius.

    Out-of-range samples contribute zero.  Channel ordering enumerates
    dy in [-r, r] outer, dx inner.
    """
    if cj.shape != ck.shape:
        raise ValueError(f"correlate: shape mismatch {cj.shape} vs {ck.shape}")
    h, w, _ = cj.shape
    side = 2 * radius + 1
    out = np.empty((h, w, side * side), dtype=cj.dtype)
    idx = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            out[:, :, idx] = (cj * _shift2d(ck, dy, dx)).sum(axis=2)
            idx += 1
    return out


def correlate(cj: Tensor, ck: Tensor, radius: int = 4) -> Tensor:
    """Differentiable feature correlation over a bounded window."""
    out = correlate_forward(cj.data, ck.data, radius)

    def grad_fn(g):
        dcj = np.zeros_like(cj.data)
        dck = np.zeros_like(ck.data)
        idx = 0
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                gc = g[:, :, idx:idx + 1]
                dcj += gc * _shift2d(ck.data, dy, dx)
                dck += _shift2d(gc * cj.data, -dy, -dx)
                idx += 1
        return (dcj, dck)

    return Tensor(out, parents=(cj, ck), grad_fn=grad_fn)


def grad_x(a: Tensor) -> Tensor:
    """Forward difference along x; last column zero."""
    out = np.zeros_like(a.data)
    out[:, :-1, ...] = a.data[:, 1:, ...] - a.data[:, :-1, ...]

    def grad_fn(g):
        d = np.zeros_like(a.data)
        d[:, 1:, ...] += g[:, :-1, ...]
        d[:, :-1, ...] -= g[:, :-1, ...]
        return (d,)

    return Tensor(out, parents=(a,), grad_fn=grad_fn)


def grad_y(a: Tensor) -> Tensor:
    """Forward difference along y; last row zero."""
    out = np.zeros_like(a.data)
    out[:-1, :, ...] = a.data[1:, :, ...] - a.data[:-1, :, ...]

    def grad_fn(g):
        d = np.zeros_like(a.data)
        d[1:, :, ...] += g[:-1, :, ...]
        d[:-1, :, ...] -= g[:-1, :, ...]
        return (d,)

    return Tensor(out, parents=(a,), grad_fn=grad_fn)


def l1_mean(a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference, optionally restricted to mask==1 pixels.

    ``mask`` is a constant (H, W) array; with an empty mask the term is 0.
    """
    d = abs_(sub(a, b))
    if mask is None:
        return mean(d)
    count = float(mask.sum()) * d.data.shape[2]
    if count == 0:
        return Tensor(np.zeros((), dtype=d.data.dtype))
    m = np.broadcast_to(mask[:, :, None], d.data.shape).astype(d.data.dtype)
    return scale(total_sum(mul(d, Tensor(m))), 1.0 / count)


class Adam:
    """Adam optimizer with bias correction over a list of Parameters."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {getattr(p, 'name', i)}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1 ** t)
            vhat = self.v[i] / (1 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(loss_fn, param: Parameter, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds and returns the scalar loss Tensor from current
    parameter values.  Relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    loss = loss_fn()
    loss.backward()
    analytic = param.grad
    if analytic is None:
        analytic = np.zeros_like(param.data)
    analytic = analytic.copy()
    flat = param.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = float(loss_fn().data)
        flat[i] = orig - eps
        lm = float(loss_fn().data)
        flat[i] = orig
        numeric[i] = (lp - lm) / (2 * eps)
    numeric = numeric.reshape(param.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


CHECKPOINT_MAGIC = b"LSCKPT1\n"


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Flat binary container: magic, then per tensor id/rank/dims/f32 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in params.items():
            ident = name.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a layersplit checkpoint")
        out: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            out[name] = data.copy()
    return out
