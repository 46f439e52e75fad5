"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Ops executed inside a ``with Tape():`` block are recorded; ``backward(loss)``
then walks the recording in reverse and accumulates gradients into every
reachable tensor that requires them. Outside a tape, ops just compute values
(cheap inference mode).

Reductions are performed in numpy's fixed row-major order, so forward and
backward results are bitwise reproducible for identical inputs on the same
machine. One tape is single-threaded; independent tapes may run on separate
threads as long as they share no mutable tensors (the tape stack is
thread-local).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind not in "fc":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


class Tape:
    """Ordered recording of ops; recording order is a topological order."""

    def __init__(self):
        self.ops: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.ops)


_LOCAL = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = active_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        out.node = _Node(parents=parents, vjp=vjp, tape=tape)
        tape.ops.append(out)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dL/dx into every tracked tensor reachable from ``loss``.

    Contributions across fan-out sum. Requires ``loss`` to be a scalar
    recorded on a tape.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not recorded on a tape")
    tape = loss.node.tape
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for t in reversed(tape.ops):
        if t.grad is None or t.node is None:
            continue
        grads_in = t.node.vjp(t.grad)
        for parent, g in zip(t.node.parents, grads_in):
            if g is None or not _tracked(parent):
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a bias row over the last dim."""
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)

        def vjp(g):
            return g, g

    elif b.data.ndim == 1 and a.data.ndim >= 2 and b.data.shape[0] == a.data.shape[-1]:
        out = Tensor(a.data + b.data)
        n = b.data.shape[0]

        def vjp(g):
            return g, g.reshape(-1, n).sum(axis=0)

    else:
        raise ShapeError("add", a.data.shape, b.data.shape)
    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("mul", a.data.shape, b.data.shape)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def vjp(g):
        return (g * c,)

    return _record(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``b`` may be 2-D (shared weight) or match ``a``'s batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul", ad.shape, bd.shape)
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd)
        k, n = bd.shape

        def vjp(g):
            ga = gb = None
            if _tracked(a):
                ga = g @ bd.T
            if _tracked(b):
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise ShapeError("matmul", ad.shape, bd.shape)
        out = Tensor(ad @ bd)

        def vjp(g):
            ga = gb = None
            if _tracked(a):
                ga = g @ bd.swapaxes(-1, -2)
            if _tracked(b):
                gb = ad.swapaxes(-1, -2) @ g
            return ga, gb

    return _record(out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = Tensor(np.where(keep, a.data, 0.0))

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _record(out, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def vjp(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _record(out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis (numerically shifted)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm", a.data.shape, gain.data.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    gd = gain.data

    def vjp(g):
        ga = gg = gb = None
        if _tracked(a):
            gy = g * gd
            # d/dx of (x - mu)/sigma: remove the mean and the xhat projection
            ga = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        if _tracked(gain):
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if _tracked(bias):
            gb = g.reshape(-1, d).sum(axis=0)
        return ga, gg, gb

    return _record(out, (a, gain, bias), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; ``ids`` is a plain integer array (not differentiable)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    rows, dim = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ValueError(f"embedding: id out of range [0, {rows})")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _record(out, (table,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record(out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _record(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shape = a.data.shape
    dt = a.data.dtype

    def vjp(g):
        return (np.full(shape, g, dtype=dt),)

    return _record(out, (a,), vjp)


def scatter_add(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Return ``base`` with ``values`` added at flat row-major coordinates ``index``.

    ``index`` must be strictly increasing (unique coordinates).
    """
    index = np.asarray(index)
    if values.data.ndim != 1 or index.shape != values.data.shape:
        raise ShapeError("scatter_add", index.shape, values.data.shape)
    if index.size and (np.any(np.diff(index) <= 0) or index[0] < 0 or index[-1] >= base.data.size):
        raise ValueError("scatter_add: index must be strictly increasing and in range")
    flat = base.data.reshape(-1).copy()
    flat[index] += values.data
    out = Tensor(flat.reshape(base.data.shape))

    def vjp(g):
        gb = g if _tracked(base) else None
        gv = g.reshape(-1)[index] if _tracked(values) else None
        return gb, gv

    return _record(out, (base, values), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax.

    Rows whose target equals ``ignore_index`` are excluded from the mean.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", logits.data.shape)
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise ShapeError("cross_entropy", logits.data.shape, targets.shape)
    n, v = logits.data.shape
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no valid targets")
    safe_t = np.where(valid, targets, 0)
    if safe_t.min() < 0 or safe_t.max() >= v:
        raise ValueError(f"cross_entropy: target out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    nll = -logp[rows, safe_t]
    out = Tensor(np.asarray((nll * valid).sum() / n_valid, dtype=logits.data.dtype))

    def vjp(g):
        p = np.exp(logp)
        p[rows, safe_t] -= 1.0
        p[~valid] = 0.0
        return (p * (g / n_valid),)

    return _record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: tuple[str, int] | None = None
    checked: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 8,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values;
    it is invoked once under a tape for the analytic pass and twice per
    sampled coordinate for the difference quotient. Coordinates are sampled
    per tensor (all coordinates when a tensor has at most ``samples``).
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    report = GradCheckReport(max_rel_err=0.0, tol=tol, passed=True)
    for name, p in params.items():
        numel = p.data.size
        if numel <= samples:
            coords = np.arange(numel)
        else:
            coords = rng.choice(numel, size=samples, replace=False)
        flat = p.data.reshape(-1)
        worst_here = 0.0
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn().item()
            flat[c] = orig - eps
            down = loss_fn().item()
            flat[c] = orig
            fd = (up - down) / (2 * eps)
            an = float(analytic[name].reshape(-1)[c])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            report.checked += 1
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (name, c)
        report.per_tensor[name] = worst_here
    report.passed = report.max_rel_err < tol
    return report
