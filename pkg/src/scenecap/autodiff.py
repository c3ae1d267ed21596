"""Reverse-mode autodiff over dense float64 matrices.

Every value is a 2-D, C-contiguous float64 ndarray.  Operations build a
Tape of primitive records; ``Tape.backward`` walks the records in reverse
and accumulates gradients, ``Tape.replay`` re-executes the forward
closures in order (used to assert the forward pass is reproducible
bit-for-bit).  A tape is single-writer: one training step owns one tape.

Backward closures depend only on (upstream gradient, input values, output
value), never on captured intermediates, so a replayed tape stays
consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

L2_ZERO_GUARD = 1e-12
LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EvaluationError(ArithmeticError):
    """A forward evaluation produced a non-finite value."""


def as_matrix(x) -> np.ndarray:
    """Coerce scalars / lists / 1-D arrays to a float64 row-major matrix.

    1-D input becomes a single row; scalars become 1x1.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise EvaluationError(f"{op} produced non-finite values")


class Node:
    """One matrix value on a tape, with space for its gradient."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", name: Optional[str] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or "node"
        return f"<{tag} {self.value.shape[0]}x{self.value.shape[1]}>"


class Tape:
    """Ordered record of primitive ops for one forward/backward pass."""

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list = []  # (out, inputs, forward_fn, backward_fn)

    def param(self, name: str, value) -> Node:
        v = as_matrix(value)
        _check_finite(v, f"param {name}")
        return Node(v, self, name=name)

    def constant(self, value, name: Optional[str] = None) -> Node:
        v = as_matrix(value)
        _check_finite(v, name or "constant")
        return Node(v, self, name=name)

    def apply(self, op: str, forward: Callable, backward: Callable,
              inputs: Sequence[Node]) -> Node:
        out_val = forward(*[n.value for n in inputs])
        _check_finite(out_val, op)
        out = Node(out_val, self, name=op)
        if self.record:
            self._records.append((out, tuple(inputs), forward, backward))
        return out

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into .grad for every reachable node.

        Nodes the loss does not depend on keep grad None; read them
        through :func:`grad_of`, which substitutes zeros.
        """
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 scalar loss, got {loss.value.shape}")
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        for out, inputs, _, _ in self._records:
            out.grad = None
            for n in inputs:
                n.grad = None
        loss.grad = np.ones((1, 1))
        for out, inputs, _, bwd in reversed(self._records):
            if out.grad is None:
                continue
            grads = bwd(out.grad, *[n.value for n in inputs], out.value)
            for n, g in zip(inputs, grads):
                if g is None:
                    continue
                if n.grad is None:
                    n.grad = g.copy() if g.base is not None or g is out.grad else g
                else:
                    n.grad = n.grad + g

    def replay(self) -> None:
        """Re-execute every recorded forward closure in order, in place."""
        for out, inputs, fwd, _ in self._records:
            out.value = fwd(*[n.value for n in inputs])

    def __len__(self):
        return len(self._records)


def grad_of(node: Node) -> np.ndarray:
    """Gradient accumulated on ``node``; zeros if the loss never reached it."""
    if node.grad is None:
        return np.zeros_like(node.value)
    return node.grad


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return like.tape.constant(x)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Node, b) -> Node:
    b = _lift(b, a)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: ({a.value.shape[0]}x{a.value.shape[1]}) x "
            f"({b.value.shape[0]}x{b.value.shape[1]})"
        )

    def fwd(av, bv):
        return av @ bv

    def bwd(g, av, bv, ov):
        return g @ bv.T, av.T @ g

    return a.tape.apply("matmul", fwd, bwd, (a, b))


def transpose(a: Node) -> Node:
    def fwd(av):
        return np.ascontiguousarray(av.T)

    def bwd(g, av, ov):
        return (np.ascontiguousarray(g.T),)

    return a.tape.apply("transpose", fwd, bwd, (a,))


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum the broadcast axes of g back down to ``shape``."""
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcast_ok(sa, sb) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))


def add(a: Node, b) -> Node:
    b = _lift(b, a)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeError(f"add: {a.value.shape} vs {b.value.shape}")

    def fwd(av, bv):
        return av + bv

    def bwd(g, av, bv, ov):
        return _reduce_to(g, av.shape), _reduce_to(g, bv.shape)

    return a.tape.apply("add", fwd, bwd, (a, b))


def sub(a: Node, b) -> Node:
    return add(a, scale(_lift(b, a), -1.0))


def mul(a: Node, b) -> Node:
    b = _lift(b, a)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeError(f"mul: {a.value.shape} vs {b.value.shape}")

    def fwd(av, bv):
        return av * bv

    def bwd(g, av, bv, ov):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return a.tape.apply("mul", fwd, bwd, (a, b))


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def fwd(av):
        return av * c

    def bwd(g, av, ov):
        return (g * c,)

    return a.tape.apply("scale", fwd, bwd, (a,))


def linear(x: Node, w: Node, b: Optional[Node] = None) -> Node:
    """x @ w (+ bias row broadcast over rows)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax_rows_array(m: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row softmax with max-subtraction; optional boolean keep-mask."""
    if mask is not None:
        m = np.where(mask, m, -np.inf)
    mx = m.max(axis=1, keepdims=True)
    e = np.exp(m - mx)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m: Node, mask: Optional[np.ndarray] = None) -> Node:
    """Row-wise softmax.  ``mask`` (same shape, True = attend) is static data.

    Every row must keep at least one allowed position.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.value.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs logits {m.value.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("softmax mask blocks an entire row")

    def fwd(mv):
        return softmax_rows_array(mv, mask)

    def bwd(g, mv, ov):
        dot = (g * ov).sum(axis=1, keepdims=True)
        return (ov * (g - dot),)

    return m.tape.apply("softmax_rows", fwd, bwd, (m,))


def layer_norm_array(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                     eps: float = LAYER_NORM_EPS) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    return y * gain + bias


def layer_norm_rows(x: Node, gain: Node, bias: Node,
                    eps: float = LAYER_NORM_EPS) -> Node:
    """Row-wise layer normalization with affine gain/bias (1xN each)."""
    n = x.value.shape[1]
    if gain.value.shape != (1, n) or bias.value.shape != (1, n):
        raise ShapeError(
            f"layer_norm: x width {n}, gain {gain.value.shape}, bias {bias.value.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")

    def fwd(xv, gv, bv):
        return layer_norm_array(xv, gv, bv, eps)

    def bwd(g, xv, gv, bv, ov):
        mu = xv.mean(axis=1, keepdims=True)
        var = ((xv - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = (xv - mu) * inv
        dy = g * gv
        dx = inv * (dy - dy.mean(axis=1, keepdims=True)
                    - y * (dy * y).mean(axis=1, keepdims=True))
        dgain = (g * y).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return dx, dgain, dbias

    return x.tape.apply("layer_norm", fwd, bwd, (x, gain, bias))


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Plain-array layer norm of one vector (convenience, non-differentiable)."""
    xv, gv, bv = as_matrix(x), as_matrix(gain), as_matrix(bias)
    if xv.shape != gv.shape or xv.shape != bv.shape:
        raise ShapeError(f"layer_norm: lengths {xv.shape} / {gv.shape} / {bv.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    return layer_norm_array(xv, gv, bv, eps)[0]


def l2_normalize_array(x: np.ndarray) -> np.ndarray:
    r = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = r >= L2_ZERO_GUARD
    return np.where(safe, x / np.where(safe, r, 1.0), x)


def l2_normalize_rows(x: Node) -> Node:
    """Row-wise x/||x||; rows with norm below the zero guard pass through."""

    def fwd(xv):
        return l2_normalize_array(xv)

    def bwd(g, xv, ov):
        r = np.sqrt((xv * xv).sum(axis=1, keepdims=True))
        safe = r >= L2_ZERO_GUARD
        rs = np.where(safe, r, 1.0)
        dot = (g * ov).sum(axis=1, keepdims=True)
        dx = (g - ov * dot) / rs
        return (np.where(safe, dx, g),)

    return x.tape.apply("l2_normalize", fwd, bwd, (x,))


def l2_normalize(x) -> np.ndarray:
    """Plain-array L2 normalization of one vector."""
    return l2_normalize_array(as_matrix(x))[0]


def gelu(x: Node) -> Node:
    """Exact erf-based GELU."""

    def fwd(xv):
        return 0.5 * xv * (1.0 + erf(xv * _INV_SQRT2))

    def bwd(g, xv, ov):
        cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
        return (g * (cdf + xv * pdf),)

    return x.tape.apply("gelu", fwd, bwd, (x,))


def cross_entropy(logits: Node, targets, reduction: str = "mean") -> Node:
    """Cross-entropy of integer targets against row logits.

    Returns a 1x1 node: mean (default) or sum over rows of
    -log softmax(logits)[row, target].
    """
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, w = logits.value.shape
    if idx.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {idx.shape[0]} targets")
    if idx.size and (idx.min() < 0 or idx.max() >= w):
        bad = idx[(idx < 0) | (idx >= w)][0]
        raise IndexError(f"cross_entropy: target {bad} out of range for width {w}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = float(n) if reduction == "mean" else 1.0
    rows = np.arange(n)

    def fwd(lv):
        mx = lv.max(axis=1, keepdims=True)
        lse = np.log(np.exp(lv - mx).sum(axis=1, keepdims=True)) + mx
        nll = lse[:, 0] - lv[rows, idx]
        return np.array([[nll.sum() / denom]])

    def bwd(g, lv, ov):
        p = softmax_rows_array(lv)
        p[rows, idx] -= 1.0
        return (p * (g[0, 0] / denom),)

    return logits.tape.apply("cross_entropy", fwd, bwd, (logits,))


def concat_rows(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_rows of nothing")
    w = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != w:
            raise ShapeError(f"concat_rows: widths {[x.value.shape for x in nodes]}")
    splits = np.cumsum([n.value.shape[0] for n in nodes])[:-1]

    def fwd(*vals):
        return np.concatenate(vals, axis=0)

    def bwd(g, *rest):
        return tuple(np.vsplit(g, splits))

    return nodes[0].tape.apply("concat_rows", fwd, bwd, tuple(nodes))


def concat_cols(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_cols of nothing")
    h = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != h:
            raise ShapeError(f"concat_cols: heights {[x.value.shape for x in nodes]}")
    splits = np.cumsum([n.value.shape[1] for n in nodes])[:-1]

    def fwd(*vals):
        return np.concatenate(vals, axis=1)

    def bwd(g, *rest):
        return tuple(np.hsplit(g, splits))

    return nodes[0].tape.apply("concat_cols", fwd, bwd, tuple(nodes))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= a.value.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {a.value.shape}")

    def fwd(av):
        return av[start:stop].copy()

    def bwd(g, av, ov):
        out = np.zeros_like(av)
        out[start:stop] = g
        return (out,)

    return a.tape.apply("slice_rows", fwd, bwd, (a,))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= a.value.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {a.value.shape}")

    def fwd(av):
        return np.ascontiguousarray(av[:, start:stop])

    def bwd(g, av, ov):
        out = np.zeros_like(av)
        out[:, start:stop] = g
        return (out,)

    return a.tape.apply("slice_cols", fwd, bwd, (a,))


def gather_rows(table: Node, indices) -> Node:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_rows: index {bad} out of range for {n} rows")

    def fwd(tv):
        return tv[idx].copy()

    def bwd(g, tv, ov):
        out = np.zeros_like(tv)
        np.add.at(out, idx, g)
        return (out,)

    return table.tape.apply("gather_rows", fwd, bwd, (table,))


def sum_all(a: Node) -> Node:
    def fwd(av):
        return np.array([[av.sum()]])

    def bwd(g, av, ov):
        return (np.full_like(av, g[0, 0]),)

    return a.tape.apply("sum_all", fwd, bwd, (a,))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    h: float
    n_checked: int
    worst_param: str = ""
    worst_index: tuple = ()
    worst_analytic: float = 0.0
    worst_fd: float = 0.0

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_err:.3e} over "
                f"{self.n_checked} elements (tol {self.tol:g}, h {self.h:g}; "
                f"worst {self.worst_param}{list(self.worst_index)})")


def _fd_select(shape, max_elements: Optional[int], seed: int):
    total = shape[0] * shape[1]
    if max_elements is None or total <= max_elements:
        return [np.unravel_index(i, shape) for i in range(total)]
    # deterministic spread without replacement
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=max_elements, replace=False)
    return [np.unravel_index(int(i), shape) for i in sorted(flat)]


def grad_check(f: Callable, params: dict, h: float = 1e-5, tol: float = 1e-4,
               max_elements_per_param: Optional[int] = None,
               seed: int = 0, denom_floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` maps {name: Node} (freshly registered on a new tape) to a 1x1
    loss node.  Each selected parameter element is perturbed by +-h and
    (f(p+h) - f(p-h)) / 2h is compared to the analytic gradient with
    relative error |a - fd| / max(|a|, |fd|, denom_floor); the floor keeps
    FD round-off on near-zero entries from registering as failures while
    still bounding their absolute disagreement by tol * denom_floor.

    ``max_elements_per_param`` caps the FD probes per parameter with a
    seeded, deterministic sample (None checks every element).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    arrays = {k: as_matrix(v).copy() for k, v in params.items()}

    def evaluate(current: dict) -> float:
        tape = Tape()
        nodes = {k: tape.param(k, v) for k, v in current.items()}
        out = f(nodes)
        val = float(out.value[0, 0])
        if not math.isfinite(val):
            raise EvaluationError("objective returned a non-finite value")
        return val

    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in arrays.items()}
    out = f(nodes)
    if not np.isfinite(out.value).all():
        raise EvaluationError("objective returned a non-finite value")
    tape.backward(out)
    analytic = {k: grad_of(n) for k, n in nodes.items()}

    report = GradCheckReport(passed=True, max_rel_err=0.0, tol=tol, h=h, n_checked=0)
    for name, arr in arrays.items():
        picks = _fd_select(arr.shape, max_elements_per_param,
                           seed ^ (hash(name) & 0x7FFFFFFF))
        for idx in picks:
            keep = arr[idx]
            arr[idx] = keep + h
            fp = evaluate(arrays)
            arr[idx] = keep - h
            fm = evaluate(arrays)
            arr[idx] = keep
            fd = (fp - fm) / (2.0 * h)
            a = float(analytic[name][idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
            report.n_checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = tuple(int(i) for i in idx)
                report.worst_analytic = a
                report.worst_fd = fd
    report.passed = report.max_rel_err <= tol
    return report
