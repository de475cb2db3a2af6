"""Dense float64 tensors with reverse-mode gradients.

A Tensor wraps a numpy array and remembers how it was produced, so
calling ``backward()`` on a scalar walks the graph in reverse
topological order and accumulates gradients into every reachable
Parameter.  Every operation that participates in training defines its
own backward rule here; there is no symbolic differentiation and no
external framework.

All arithmetic is float64.  Gradients accumulate across uses of the
same tensor within one graph (a parameter consumed twice receives the
sum of both contributions), and across backward calls until the
parameter is explicitly zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        # order lists parents before consumers; walk it backwards so each
        # node's grad is complete before it pushes to its parents.
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, s):
        return scale(self, s)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, trainable tensor with a persistent gradient buffer.

    Frozen parameters take part in forward computation but are excluded
    from the graph: their gradient stays all-zero and optimizers skip
    them, so their bytes never change.
    """

    __slots__ = ("name", "frozen")

    def __init__(self, value, name: str = "", frozen: bool = False):
        super().__init__(np.array(value, dtype=np.float64, copy=True),
                         requires_grad=not frozen)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad[...] = 0.0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting expanded it."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    """Matrix product; batched inputs contract over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.shape} and {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (covers bias and residual)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shapes do not broadcast: {a.shape} and {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (temperature, loss weights)."""
    a = as_tensor(a)
    s = float(s)
    out = a.data * s

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _result(out, (a,), backward)


def row_normalize(z, eps: float = 1e-12) -> Tensor:
    """Scale each row of a [B x d] matrix to unit Euclidean norm.

    A row with norm <= eps is divided by eps instead, so zero rows pass
    through as zero rather than NaN.
    """
    z = as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"row_normalize needs a 2-D input, got shape {z.shape}")
    norms = np.sqrt(np.sum(z.data * z.data, axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = z.data / denom

    def backward(g: np.ndarray) -> None:
        # on the unit sphere the gradient is the tangential component of g
        dot = np.sum(g * out, axis=1, keepdims=True)
        gz = np.where(norms > eps, (g - out * dot) / denom, g / eps)
        _accumulate(z, gz)

    return _result(out, (z,), backward)


def softmax_cross_entropy_rows(logits, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer targets.

    Stabilized by subtracting the row max before exponentiation, so it
    is exact for large-magnitude logits.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(
            f"cross-entropy needs [rows x classes] logits, got shape {logits.shape}")
    rows, cols = logits.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != rows:
        raise DimensionError(
            f"targets shape {idx.shape} does not match {rows} logit rows")
    if idx.size and (idx.min() < 0 or idx.max() >= cols):
        bad = int(idx[(idx < 0) | (idx >= cols)][0])
        raise IndexError(f"target index {bad} out of range for {cols} columns")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -float(np.mean(logp[np.arange(rows), idx]))

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[np.arange(rows), idx] -= 1.0
        _accumulate(logits, (float(g) / rows) * grad)

    return _result(np.float64(loss), (logits,), backward)


def softmax_last(x) -> Tensor:
    """Softmax over the last axis (attention weights)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, p * (g - np.sum(p * g, axis=-1, keepdims=True)))

    return _result(p, (x,), backward)


def elementwise_max_over_tokens(seq) -> Tensor:
    """Coordinate-wise max over the token axis: [.. x T x d] -> [.. x d].

    The gradient routes each coordinate to the single winning token;
    ties go to the lowest token index.
    """
    seq = as_tensor(seq)
    if seq.ndim < 2:
        raise DimensionError(f"max-pool needs a token axis, got shape {seq.shape}")
    if seq.shape[-2] == 0:
        raise DimensionError(f"max-pool over an empty token axis, shape {seq.shape}")
    out = seq.data.max(axis=-2)
    winners = seq.data.argmax(axis=-2)  # argmax takes the first = lowest index

    def backward(g: np.ndarray) -> None:
        gs = np.zeros_like(seq.data)
        np.put_along_axis(gs, winners[..., None, :], g[..., None, :], axis=-2)
        _accumulate(seq, gs)

    return _result(out, (seq,), backward)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _result(out, (x, gain, bias), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient back."""
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat shapes do not line up: {shapes}")
    sizes = [p.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(sl)])
            offset += n

    return _result(out, tuple(parts), backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow [{start}:{start + length}] exceeds axis {axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    out = x.data[tuple(sl)].copy()

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[tuple(sl)] = g
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(old))

    return _result(out, (x,), backward)


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes).copy()
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return _result(out, (x,), backward)


def broadcast_rows(x, count: int) -> Tensor:
    """Repeat a [n x d] tensor into [count x n x d] (prompt over a batch).

    The backward rule sums the per-batch gradients, so a shared block
    receives one combined gradient.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"broadcast_rows needs a 2-D input, got shape {x.shape}")
    out = np.broadcast_to(x.data, (count,) + x.shape).copy()

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.sum(axis=0))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckResult:
    """Worst-case relative disagreement between tape and finite differences."""

    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]


def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
               h: float = 1e-4) -> GradCheckResult:
    """Compare tape gradients against central differences, coordinate by
    coordinate.  Relative error is |a - n| / max(|a|, |n|, 1e-8); frozen
    parameters are asserted to have all-zero gradients and skipped.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    base = loss.item()
    if not math.isfinite(base):
        raise NumericError(f"loss is not finite during grad check: {base}")
    loss.backward()

    worst = 0.0
    worst_name = ""
    per_param: dict[str, float] = {}
    for p in params:
        if p.frozen:
            if np.any(p.grad != 0.0):
                raise NumericError(f"frozen parameter {p.name!r} received gradient")
            continue
        analytic = p.grad.copy().reshape(-1)
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(analytic)
        with no_grad():
            for i in range(flat.size):
                kept = flat[i]
                flat[i] = kept + h
                up = loss_fn().item()
                flat[i] = kept - h
                down = loss_fn().item()
                flat[i] = kept
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(
                        f"loss not finite while perturbing {p.name!r}[{i}]")
                numeric[i] = (up - down) / (2.0 * h)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        p_max = float(rel.max()) if rel.size else 0.0
        per_param[p.name] = p_max
        if p_max > worst:
            worst = p_max
            worst_name = p.name
    return GradCheckResult(worst, worst_name, per_param)


# ---------------------------------------------------------------------------
# random streams


class Rng:
    """Deterministic random stream over the Philox counter-based generator.

    Streams split into independent children via SeedSequence spawning,
    so every consumer (init, shuffling, noise) owns its own stream and
    adding a consumer never disturbs the others.
    """

    def __init__(self, seed: int | None = None,
                 _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(_seq=child) for child in self._seq.spawn(n)]

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def glorot(self, fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._gen.uniform(-limit, limit, size=(fan_in, fan_out))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape: tuple[int, ...] = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)
