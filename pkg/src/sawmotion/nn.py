"""Small reverse-mode autodiff over float64 numpy arrays.

Operations run eagerly.  Inside ``with Tape() as tape:`` every op whose
inputs require gradients is recorded in execution order (a topological
order); ``tape.gradient(loss, sources)`` replays it backwards once,
accumulating at fan-out.  Outside a tape nothing is recorded, so frozen
inference costs only the forward pass.

Shapes are explicit: elementwise ops need equal shapes, the only implicit
expansion is a bias/gain vector over the last axis in ``linear`` and
``layer_norm``.  Use ``expand`` / ``reshape`` otherwise.

GELU is the tanh form 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))),
and its derivative is taken of exactly that expression.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', grad' if self.requires_grad else ''})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops executed in this thread while active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.data.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(Tensor(ad * bd), (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(Tensor(a.data * c), (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(Tensor(np.where(mask, a.data, 0.0)), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _record(Tensor(out), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(Tensor(s), (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(Tensor(np.clip(a.data, lo, hi)), (a,), lambda g: (g * inside,))


# -- shape ops -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _record(Tensor(out), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(Tensor(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def expand(a, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of length ``n``."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _record(Tensor(out), (a,), lambda g: (g.sum(axis=0),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _record(Tensor(np.concatenate([t.data for t in ts], axis=ax)), tuple(ts),
                   lambda g: tuple(np.split(g, cuts, axis=ax)))


def slice_(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of shape {a.shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(Tensor(a.data[idx]), (a,), backward)


def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(Tensor(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(sum_(a), 1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(..., n, k) @ (..., k, m) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(Tensor(ad @ bd), (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x, W, b=None) -> Tensor:
    """x (..., in) @ W (in, out) + b (out,)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    Wd = W.data

    def backward(g):
        g2 = g.reshape(-1, Wd.shape[1])
        gx = (g2 @ Wd.T).reshape(lead + (Wd.shape[0],))
        gW = x2.T @ g2
        return (gx, gW, g2.sum(axis=0)) if b is not None else (gx, gW)

    inputs = (x, W, b) if b is not None else (x, W)
    return _record(Tensor(out.reshape(lead + (Wd.shape[1],))), inputs, backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(Tensor(s), (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optional per-feature gain and bias."""
    x = as_tensor(x)
    n = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and as_tensor(p).shape != (n,):
            raise ShapeError(f"layer_norm: parameter {as_tensor(p).shape} does not match features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = None if gamma is None else as_tensor(gamma).data
    out = xhat if gd is None else xhat * gd
    if beta is not None:
        out = out + as_tensor(beta).data
    inputs = [x]
    if gamma is not None:
        inputs.append(as_tensor(gamma))
    if beta is not None:
        inputs.append(as_tensor(beta))
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g if gd is None else g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=red))
        if beta is not None:
            res.append(g.sum(axis=red))
        return tuple(res)

    return _record(Tensor(out), tuple(inputs), backward)


def attention(q, k, v, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on projected inputs.

    q is (B, Tq, d), k and v are (B, Tk, d); 2-D inputs are treated as a
    batch of one.  Heads are concatenated back to (B, Tq, d); the output
    projection is the caller's.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    B, Tq, d = q.shape
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != d:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if d % n_heads:
        raise ShapeError(f"attention: model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    Tk = k.shape[1]

    def heads(t, T):
        return transpose(reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q, Tq), heads(k, Tk), heads(v, Tk)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = matmul(softmax(scores, axis=-1), vh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, Tq, d))
    return reshape(out, (Tq, d)) if squeeze else out


# -- losses ----------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Per-element binary cross-entropy, numerically stable."""
    z = as_tensor(logits)
    y = as_tensor(targets).data
    if y.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs targets {y.shape}")
    x = z.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _record(Tensor(out), (z,), lambda g: (g * (_sigmoid(x) - y),))


# -- gradient check --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    Error per coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    x = Tensor(np.array(x.data), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {y.shape}")
    (g_ad,) = tape.gradient(y, [x])
    g_fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        g_fd.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(err.max()) if err.size else 0.0


# -- optimizer -------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict (updated in place)."""

    def __init__(self, params: dict, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient {g.shape} does not match parameter {k} {p.data.shape}")
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return self.params
