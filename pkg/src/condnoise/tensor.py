"""Minimal dense tensors with tape-based reverse-mode differentiation.

Each op that sees a tracked input returns a Tensor holding its parents and
a closure mapping the output gradient to parent gradients. ``backward``
orders the reachable graph topologically and replays it in reverse.
Everything is float64; broadcasting follows numpy and gradients are summed
back to the input shapes.
"""
from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import kernels
from .errors import NotScalar, ShapeMismatch, UntrackedGraph

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor."""

    __slots__ = ("trainable", "init")

    def __init__(self, data, name: str = "", trainable: bool = True, init=None):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.init = init


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- reductions ---------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)
    return _make(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pixel_unshuffle(x, r: int = 2) -> Tensor:
    """Space-to-depth: (B, C, H, W) -> (B, C*r*r, H/r, W/r)."""
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeMismatch(f"spatial size {h}x{w} not divisible by {r}")
    t = reshape(x, (b, c, h // r, r, w // r, r))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (b, c * r * r, h // r, w // r))


def pixel_shuffle(x, r: int = 2) -> Tensor:
    """Depth-to-space: (B, C*r*r, H, W) -> (B, C, H*r, W*r)."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeMismatch(f"{c} channels not divisible by {r * r}")
    t = reshape(x, (b, c // (r * r), r, r, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (b, c // (r * r), h * r, w * r))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def l2_normalize(a, axis=-1, eps: float = 1e-12) -> Tensor:
    """``a / max(||a||, eps)`` along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = a.data / safe

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        inside = norm > eps
        return (np.where(inside, (g - out * proj) / safe, g / safe),)

    return _make(out, (a,), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for x of shape (..., in) and w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    out = matmul(x, transpose(w, (1, 0)))
    return add(out, b) if b is not None else out


# -- convolutions (NCHW) --------------------------------------------------------

def conv1x1(x, w, b=None) -> Tensor:
    """Pointwise convolution: x (B, Cin, H, W), w (Cout, Cin), b (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1x1: input {x.shape} vs weight {w.shape}")
    bsz, cin, h, wd = x.shape
    xf = x.data.reshape(bsz, cin, h * wd)
    out = np.matmul(w.data, xf).reshape(bsz, w.shape[0], h, wd)

    def bw(g):
        gf = g.reshape(bsz, w.shape[0], h * wd)
        gx = np.matmul(w.data.T, gf).reshape(x.shape)
        gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))
        return gx, gw

    res = _make(out, (x, w), bw)
    if b is not None:
        res = add(res, reshape(b, (1, -1, 1, 1)))
    return res


def depthwise_conv3x3(x, w, b=None) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding 1; keeps H, W."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.shape != (x.shape[1], 3, 3):
        raise ShapeMismatch(f"depthwise_conv3x3: input {x.shape} vs weight {w.shape}")
    out = kernels.depthwise3x3(x.data, w.data)
    res = _make(out, (x, w), lambda g: kernels.depthwise3x3_backward(g, x.data, w.data))
    if b is not None:
        res = add(res, reshape(b, (1, -1, 1, 1)))
    return res


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense 2-D cross-correlation. w: (Cout, Cin, k, k); zero padding k//2 by default."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    bsz, cin = x.shape[0], x.shape[1]
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are output pixels, columns are (cin, ki, kj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, wd = x.shape[2], x.shape[3]
        return gxp[:, :, pad:pad + h, pad:pad + wd], gw

    res = _make(out, (x, w), bw)
    if b is not None:
        res = add(res, reshape(b, (1, -1, 1, 1)))
    return res


def layer_norm_channels(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel across channels (axis 1) of an NCHW tensor."""
    x = as_tensor(x)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    c = x.shape[1]

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _make(xhat, (x,), bw)
    if weight is not None:
        out = mul(out, reshape(weight, (1, c, 1, 1)))
    if bias is not None:
        out = add(out, reshape(bias, (1, c, 1, 1)))
    return out


# -- losses ---------------------------------------------------------------------

def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == target."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff) / n
    return _make(np.abs(diff).mean(), (pred, target), lambda g: (g * sign, -g * sign))


# -- reverse pass ---------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tracked leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise UntrackedGraph("loss does not depend on any tracked tensor")
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- optimisation ---------------------------------------------------------------

def adam_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One Adam update in place. ``state`` is keyed by parameter name.

    A nonzero ``weight_decay`` applies decoupled (AdamW) decay.
    """
    b1, b2 = betas
    for p, g in zip(params, grads):
        if g is None:
            continue
        st = state.setdefault(p.name, {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        st["t"] += 1
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        mhat = st["m"] / (1.0 - b1 ** st["t"])
        vhat = st["v"] / (1.0 - b2 ** st["t"])
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.trainable]
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 1e-6) -> float:
    if total <= 1:
        return lr_max
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t))


# -- finite-difference checking ---------------------------------------------------

def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradcheck(fn, inputs, probes: int = 100, h: float = 1e-5, seed: int = 0):
    """Compare backward() against central differences at random coordinates.

    ``fn(*inputs)`` returns a Tensor; it is projected onto a fixed random
    tensor to get a scalar. Probes cycle over the inputs so each one is
    visited. Returns the list of relative errors.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    backward(tsum(mul(out, proj)))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        with no_grad():
            return np.array(fn(*inputs).data, copy=True)

    errors = []
    for p in range(probes):
        k = p % len(inputs)
        t = inputs[k]
        idx = tuple(int(rng.integers(n)) for n in t.shape)
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = value()
        t.data[idx] = orig - h
        down = value()
        t.data[idx] = orig
        numeric = float(np.sum((up - down) * proj)) / (2.0 * h)
        errors.append(rel_error(float(analytic[k][idx]), numeric))
    return errors


# -- checkpoints ------------------------------------------------------------------

_MAGIC = b"CNCKPT01"
_DTYPE_F8 = 1


def save_checkpoint(params, path, extra: dict | None = None) -> Path:
    """Write parameters to ``path`` and a JSON manifest to ``path + '.json'``.

    Binary layout per parameter: u32 name length, UTF-8 name, u8 dtype tag
    (1 = float64), u32 rank, rank x u64 extents, little-endian payload.
    """
    path = Path(path)
    items = list(params.items()) if isinstance(params, dict) else [(p.name, p) for p in params]
    chunks = [_MAGIC, struct.pack("<I", len(items))]
    for name, t in items:
        data = np.ascontiguousarray(t.data, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BI", _DTYPE_F8, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "condnoise-checkpoint/1", "parameters": [
        {"name": n, "shape": list(t.shape)} for n, t in items]}
    if extra:
        manifest.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a condnoise checkpoint")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        if tag != _DTYPE_F8:
            raise ValueError(f"unsupported dtype tag {tag}")
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count_el = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count_el, offset=pos).reshape(shape).copy()
        pos += 8 * count_el
    return out


def load_manifest(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
