"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the memory model and the view policy need are provided:
3D convolution (3x3x3 or 1x1x1, stride 1, zero "same" padding), pointwise
gates, concatenation, voxel gathers, a linear layer and the training losses.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise GraphError("backward called on a tensor that is not part of a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean()), (a,), backward)


def gather_voxels(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Columns of a (C, D, H, W) tensor at flattened voxel indices -> (C, P)."""
    C = x.shape[0]
    flat_index = np.asarray(flat_index, dtype=np.int64)
    src = x.data.reshape(C, -1)

    def backward(g):
        acc = np.zeros_like(src)
        np.add.at(acc.T, flat_index, g.T)
        x._accumulate(acc.reshape(x.shape))

    return _make(src[:, flat_index], (x,), backward)


def mean_columns(a: Tensor) -> Tensor:
    """(C, P) -> (C,) mean over the second axis."""
    P = a.shape[1]

    def backward(g):
        a._accumulate(np.repeat(g[:, None] / P, P, axis=1))

    return _make(a.data.mean(axis=1), (a,), backward)


# --- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, D, H, W) -> (C*k^3, D*H*W) patch matrix over the zero-padded input."""
    C, D, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((C, k, k, k, D, H, W), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, a, b, c] = xp[:, a : a + D, b : b + H, c : c + W]
    return cols.reshape(C * k**3, D * H * W)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    C, D, H, W = shape
    p = k // 2
    cols = cols.reshape(C, k, k, k, D, H, W)
    xp = np.zeros((C, D + 2 * p, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xp[:, a : a + D, b : b + H, c : c + W] += cols[:, a, b, c]
    return xp[:, p : p + D, p : p + H, p : p + W]


def conv3d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    C_out, k = w.shape[0], w.shape[-1]
    out = (w.reshape(C_out, -1) @ _im2col(x, k)).reshape((C_out,) + x.shape[1:])
    if b is not None:
        out = out + b[:, None, None, None]
    return out


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero "same" padding, stride 1.

    x: (C_in, D, H, W); w: (C_out, C_in, k, k, k) with k in {1, 3}; b: (C_out,).
    """
    x, w = _wrap(x), _wrap(w)
    if w.data.ndim != 5 or w.shape[2:] not in ((1, 1, 1), (3, 3, 3)):
        raise ValueError(f"kernel shape {w.shape} must be (C_out, C_in, k, k, k) with k in (1, 3)")
    if x.data.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"input channels {x.shape[0] if x.data.ndim else None} do not match kernel C_in {w.shape[1]}")
    C_out, k = w.shape[0], w.shape[-1]
    cols = _im2col(x.data, k)
    w2 = w.data.reshape(C_out, -1)
    out = (w2 @ cols).reshape((C_out,) + x.shape[1:])
    if b is not None:
        out = out + b.data[:, None, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(C_out, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            x._accumulate(_col2im(w2.T @ g2, x.shape, k))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=1))

    return _make(out, parents, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = w @ x + b for a feature vector x."""
    x, w = _wrap(x), _wrap(w)
    out = w.data @ x.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.outer(g, x.data))
        if x.requires_grad:
            x._accumulate(w.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(g)

    return _make(out, parents, backward)


# --- losses ------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].

    `pos_weight` scales the positive-target term; 1 gives the plain loss.
    """
    pred = _wrap(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {t.shape}")
    raw = pred.data
    p = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    w = pos_weight
    val = -(w * t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    inside = (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)

    def backward(g):
        dp = (-w * t / p + (1.0 - t) / (1.0 - p)) / n
        pred._accumulate(g * np.where(inside, dp, 0.0))

    return _make(np.asarray(val, dtype=pred.data.dtype), (pred,), backward)


def log_softmax_masked(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-probabilities with invalid entries at -inf (their gradient is zero)."""
    logits = _wrap(logits)
    z = logits.data.astype(np.float64)
    valid = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid entries in the action mask")
    zm = np.where(valid, z, -np.inf)
    m = zm.max()
    lse = m + math.log(np.exp(zm - m).sum())
    out = zm - lse
    prob = np.exp(out)

    def backward(g):
        gv = np.where(valid, g, 0.0)
        logits._accumulate((gv - prob * gv.sum()).astype(logits.data.dtype))

    return _make(out.astype(logits.data.dtype), (logits,), backward)


def pick(a: Tensor, index: int) -> Tensor:
    def backward(g):
        acc = np.zeros_like(a.data)
        acc[index] = g
        a._accumulate(acc)

    return _make(np.asarray(a.data[index]), (a,), backward)


def masked_entropy(logp: Tensor, mask: np.ndarray) -> Tensor:
    """-sum p log p over valid entries, from log-probabilities."""
    valid = np.asarray(mask, dtype=bool)
    lp = np.where(valid, logp.data, 0.0)
    p = np.where(valid, np.exp(lp), 0.0)

    def backward(g):
        logp._accumulate(np.where(valid, -g * p * (lp + 1.0), 0.0))

    return _make(np.asarray(-(p * lp).sum()), (logp,), backward)


def softmax_ce(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of a logit vector against an integer label."""
    lp = log_softmax_masked(logits)
    return neg(pick(lp, int(label)))


def contrastive_loss(ea: Tensor, eb: Tensor, same: np.ndarray, margin: float = 1.0) -> Tensor:
    """Mean over pairs of ||ea-eb||^2 (same) or max(0, margin - ||ea-eb||)^2 (different).

    ea, eb: (E, P) embeddings of the two members of each pair.
    """
    ea, eb = _wrap(ea), _wrap(eb)
    same = np.asarray(same, dtype=bool)
    P = same.size
    if P == 0:
        raise ValueError("contrastive loss needs at least one pair")
    diff = ea.data - eb.data
    d2 = (diff * diff).sum(axis=0)
    d = np.sqrt(d2)
    hinge = np.maximum(0.0, margin - d)
    val = np.where(same, d2, hinge * hinge).mean()

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef_diff = np.where(d > 0, -2.0 * hinge / d, 0.0)
        coef = np.where(same, 2.0, coef_diff) * (g / P)
        gd = diff * coef[None, :]
        if ea.requires_grad:
            ea._accumulate(gd)
        if eb.requires_grad:
            eb._accumulate(-gd)

    return _make(np.asarray(val, dtype=ea.data.dtype), (ea, eb), backward)


# --- parameters & optimization -------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else shape[0]) * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SGD:
    """SGD with classical momentum; parameters are updated in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.05, momentum: float = 0.9, ascent: bool = False):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.sign = 1.0 if ascent else -1.0
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, scale: float = 1.0) -> float:
        """Apply accumulated gradients times `scale`; returns the gradient norm."""
        sq = 0.0
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            sq += float((g.astype(np.float64) ** 2).sum())
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data += (self.sign * self.lr) * v
        return math.sqrt(sq)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f() with respect to array x (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
