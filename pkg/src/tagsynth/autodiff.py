"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every primitive operation appends one record to the active tape in execution
order, which is automatically a topological order, so a backward sweep visits
records exactly once in reverse. Gradient propagation runs through a
per-call table and only at the end folds results into ``Tensor.grad``; that
keeps the tape reusable, and a second backward pass from the same scalar
doubles the accumulated gradients instead of corrupting them.

With no tape active (evaluation, sampling) the same operations run as plain
numpy forward math and record nothing.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# Half-log-variance heads are clamped to this range before exponentiation,
# so predicted sigmas live in [exp(-6), exp(6)].
HALF_LOG_VAR_MIN = -6.0
HALF_LOG_VAR_MAX = 6.0

# Probabilities are pushed this far inside (0, 1) before any logarithm.
PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Operand values fall outside an operation's numeric domain."""


class GradientError(RuntimeError):
    """Backward-pass contract violation, e.g. a non-scalar loss."""


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.values.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values that no gradient flows into."""
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # arithmetic sugar; all routes through the module-level primitives

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.values.size if axis is None else self.values.shape[axis]
        return tensor_sum(self, axis=axis) * (1.0 / n)


@dataclass
class Parameter:
    """A named trainable tensor. Names must be unique within a model."""

    name: str
    tensor: Tensor


def check_unique_names(params: Sequence[Parameter]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name: {p.name!r}")
        seen.add(p.name)


@dataclass
class TapeRecord:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    # maps the output gradient to one contribution per input (None = skip)
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of primitive ops for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward`` on the scalar loss. The tape is rebuilt per forward pass;
    one tape belongs to one training run.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._ids: dict[int, int] = {}
        self._tensors: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[key] = nid
            self._tensors[nid] = t
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable) -> None:
        input_ids = tuple(self.node_id(t) for t in inputs)
        output_id = self.node_id(output)
        self.records.append(TapeRecord(op, input_ids, output_id, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every requires_grad tensor."""
        if loss.values.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None:
            raise GradientError("loss tensor was not computed on this tape")
        table: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.values)}
        for rec in reversed(self.records):
            g = table.get(rec.output_id)
            if g is None:
                continue
            for input_id, contrib in zip(rec.input_ids, rec.backward_fn(g)):
                if contrib is None:
                    continue
                held = table.get(input_id)
                table[input_id] = contrib if held is None else held + contrib
        for nid, g in table.items():
            t = self._tensors[nid]
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, inputs: tuple[Tensor, ...], values: np.ndarray,
          backward_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape numpy broadcast it from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and linear-algebra primitives --------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    values = a.values + b.values

    def backward_fn(g):
        return (
            _unbroadcast(g, a.values.shape) if a.requires_grad else None,
            _unbroadcast(g, b.values.shape) if b.requires_grad else None,
        )

    return _make("add", (a, b), values, backward_fn)


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    values = a.values - b.values

    def backward_fn(g):
        return (
            _unbroadcast(g, a.values.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.values.shape) if b.requires_grad else None,
        )

    return _make("sub", (a, b), values, backward_fn)


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    values = a.values * b.values
    av, bv = a.values, b.values

    def backward_fn(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _make("mul", (a, b), values, backward_fn)


def div(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    av, bv = a.values, b.values
    values = av / bv

    def backward_fn(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * av / (bv * bv), bv.shape) if b.requires_grad else None,
        )

    return _make("div", (a, b), values, backward_fn)


def neg(a) -> Tensor:
    a = _ensure_tensor(a)

    def backward_fn(g):
        return ((-g) if a.requires_grad else None,)

    return _make("neg", (a,), -a.values, backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(
            f"matmul expects (p,q) @ (q,r); got {a.values.shape} and {b.values.shape}"
        )
    av, bv = a.values, b.values
    values = av @ bv

    def backward_fn(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        )

    return _make("matmul", (a, b), values, backward_fn)


def transpose(a) -> Tensor:
    a = _ensure_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.values.shape}")

    def backward_fn(g):
        return (g.T if a.requires_grad else None,)

    return _make("transpose", (a,), a.values.T.copy(), backward_fn)


def exp(a) -> Tensor:
    a = _ensure_tensor(a)
    values = np.exp(a.values)

    def backward_fn(g):
        return ((g * values) if a.requires_grad else None,)

    return _make("exp", (a,), values, backward_fn)


def log(a) -> Tensor:
    a = _ensure_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log needs strictly positive inputs; clamp first")
    av = a.values

    def backward_fn(g):
        return ((g / av) if a.requires_grad else None,)

    return _make("log", (a,), np.log(av), backward_fn)


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    av = a.values
    values = np.empty_like(av)
    pos = av >= 0
    values[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    expv = np.exp(av[~pos])
    values[~pos] = expv / (1.0 + expv)

    def backward_fn(g):
        return ((g * values * (1.0 - values)) if a.requires_grad else None,)

    return _make("sigmoid", (a,), values, backward_fn)


def tanh(a) -> Tensor:
    a = _ensure_tensor(a)
    values = np.tanh(a.values)

    def backward_fn(g):
        return ((g * (1.0 - values * values)) if a.requires_grad else None,)

    return _make("tanh", (a,), values, backward_fn)


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = _ensure_tensor(a)
    av = a.values
    values = np.where(av > 0.0, av, negative_slope * av)

    def backward_fn(g):
        return ((g * np.where(av > 0.0, 1.0, negative_slope)) if a.requires_grad else None,)

    return _make("leaky_relu", (a,), values, backward_fn)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where nothing clipped."""
    a = _ensure_tensor(a)
    av = a.values
    values = np.clip(av, lo, hi)
    inside = (av >= lo) & (av <= hi)

    def backward_fn(g):
        return ((g * inside) if a.requires_grad else None,)

    return _make("clamp", (a,), values, backward_fn)


def tensor_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _ensure_tensor(a)
    av = a.values
    values = av.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _make("sum", (a,), values, backward_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(_ensure_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    values = np.concatenate([p.values for p in parts], axis=axis)
    widths = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        out = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return _make("concat", parts, values, backward_fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _ensure_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-d tensor, got shape {a.values.shape}")
    av = a.values
    values = av[:, start:stop].copy()

    def backward_fn(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(av)
        full[:, start:stop] = g
        return (full,)

    return _make("slice_cols", (a,), values, backward_fn)


def where_rows(mask, a, b) -> Tensor:
    """Row-wise select: rows where mask is true come from a, else from b."""
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    m = np.asarray(mask, dtype=bool)
    if a.values.shape != b.values.shape or m.shape != (a.values.shape[0],):
        raise ShapeError(
            f"where_rows needs equal operand shapes and a row mask; "
            f"got {a.values.shape}, {b.values.shape}, mask {m.shape}"
        )
    col = m[:, None] if a.values.ndim == 2 else m
    values = np.where(col, a.values, b.values)

    def backward_fn(g):
        return (
            (g * col) if a.requires_grad else None,
            (g * ~col) if b.requires_grad else None,
        )

    return _make("where_rows", (a, b), values, backward_fn)


# -- stochastic and divergence building blocks --------------------------------


def reparam_sample(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """Draw z = mu + sigma * eps with gradients to mu and sigma only."""
    mu, sigma = _ensure_tensor(mu), _ensure_tensor(sigma)
    eps_values = eps.values if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if mu.values.shape != sigma.values.shape or mu.values.shape != eps_values.shape:
        raise ShapeError(
            f"reparam_sample needs matching shapes; got mu {mu.values.shape}, "
            f"sigma {sigma.values.shape}, eps {eps_values.shape}"
        )
    return add(mu, mul(sigma, Tensor(eps_values)))


def kl_diag_gaussian_vs_std_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over every element.

    Closed form per element: -(1/2) (1 + log sigma^2 - mu^2 - sigma^2).
    Callers working on batches divide by the row count to get a batch mean.
    """
    mu, sigma = _ensure_tensor(mu), _ensure_tensor(sigma)
    if mu.values.shape != sigma.values.shape:
        raise ShapeError(f"mu/sigma shapes differ: {mu.values.shape} vs {sigma.values.shape}")
    if np.any(sigma.values <= 0.0):
        raise DomainError("sigma must be strictly positive")
    inner = add(1.0, sub(mul(2.0, log(sigma)), add(mul(mu, mu), mul(sigma, sigma))))
    return mul(-0.5, tensor_sum(inner))


def kl_bernoulli_vec(q: Tensor, p: Tensor) -> Tensor:
    """Sum over elements of KL(Bern(q_i) || Bern(p_i)); inputs in open (0,1)."""
    q, p = _ensure_tensor(q), _ensure_tensor(p)
    if q.values.shape != p.values.shape:
        raise ShapeError(f"q/p shapes differ: {q.values.shape} vs {p.values.shape}")
    for name, t in (("q", q), ("p", p)):
        if np.any(t.values <= 0.0) or np.any(t.values >= 1.0):
            raise DomainError(f"{name} must lie strictly inside (0, 1); clamp first")
    one_m_q = sub(1.0, q)
    one_m_p = sub(1.0, p)
    tern = add(
        mul(q, sub(log(q), log(p))),
        mul(one_m_q, sub(log(one_m_q), log(one_m_p))),
    )
    return tensor_sum(tern)


def gaussian_log_likelihood(x, mu: Tensor, sigma: Tensor) -> Tensor:
    """log N(x; mu, diag sigma^2), summed over every element."""
    x, mu, sigma = _ensure_tensor(x), _ensure_tensor(mu), _ensure_tensor(sigma)
    if not (x.values.shape == mu.values.shape == sigma.values.shape):
        raise ShapeError(
            f"x/mu/sigma shapes differ: {x.values.shape}, {mu.values.shape}, {sigma.values.shape}"
        )
    if np.any(sigma.values <= 0.0):
        raise DomainError("sigma must be strictly positive")
    resid = sub(x, mu)
    quad = div(mul(resid, resid), mul(2.0, mul(sigma, sigma)))
    per_elem = sub(mul(-0.5 * LOG_2PI, np.ones_like(x.values)), add(log(sigma), quad))
    return tensor_sum(per_elem)


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    """-sum[t log q + (1-t) log(1-q)] over all elements; q in open (0,1).

    ``targets`` is treated as a constant even if a Tensor is passed.
    """
    probs = _ensure_tensor(probs)
    tv = targets.values if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if probs.values.shape != tv.shape:
        raise ShapeError(f"probs/targets shapes differ: {probs.values.shape} vs {tv.shape}")
    if np.any(probs.values <= 0.0) or np.any(probs.values >= 1.0):
        raise DomainError("probs must lie strictly inside (0, 1); clamp first")
    t = Tensor(tv)
    pos = mul(t, log(probs))
    negt = mul(sub(1.0, t), log(sub(1.0, probs)))
    return neg(tensor_sum(add(pos, negt)))


def bernoulli_entropy(probs: Tensor) -> Tensor:
    """-sum[q log q + (1-q) log(1-q)] over all elements; q in open (0,1)."""
    probs = _ensure_tensor(probs)
    if np.any(probs.values <= 0.0) or np.any(probs.values >= 1.0):
        raise DomainError("probs must lie strictly inside (0, 1); clamp first")
    one_m = sub(1.0, probs)
    return neg(tensor_sum(add(mul(probs, log(probs)), mul(one_m, log(one_m)))))
