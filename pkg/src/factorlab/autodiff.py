"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records Value nodes in creation order, which is a valid topological
order, so the backward sweep is a single reversed pass. Every public op
also accepts plain ndarrays (or floats) and then evaluates without
recording anything; the same model code therefore serves both the
differentiable path and the fast numpy-only path.

The primitive set is deliberately small: what the factor-model densities
and networks need, nothing more. A few fused primitives (affine,
gauss_logpdf, kl_diag) exist because they collapse the hottest parts of
the training graph into single nodes.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


class NonScalarSeed(ValueError):
    """backward() was seeded with a non-scalar node."""


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _data(x):
    return x.data if isinstance(x, Value) else _arr(x)


class Value:
    """One node of the computation graph.

    Holds the payload array, the producing op name, parent nodes and the
    per-parent backward closures. grad is None until a backward pass
    touches the node (None means zero).
    """

    __slots__ = ("tape", "id", "data", "grad", "op", "parents", "_back")

    def __init__(self, tape: "Tape", data: np.ndarray, op: str, parents, back):
        self.tape = tape
        self.data = data
        self.grad = None
        self.op = op
        self.parents = parents
        self._back = back  # list of (parent, fn) where fn maps out-grad -> parent-grad
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(id={self.id}, op={self.op}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Append-only record of Value nodes; creation order is topological."""

    def __init__(self):
        self.nodes: list[Value] = []

    def leaf(self, data) -> Value:
        return Value(self, _arr(data), "leaf", (), ())

    def backward(self, seed: Value) -> None:
        """Propagate d(seed)/d(node) into every node's grad attribute."""
        if seed.data.shape != ():
            raise NonScalarSeed(f"seed must be scalar, got shape {seed.data.shape}")
        for n in self.nodes:
            n.grad = None
        seed.grad = np.ones(())
        for node in reversed(self.nodes[: seed.id + 1]):
            g = node.grad
            if g is None:
                continue
            for parent, fn in node._back:
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def backward(tape: Tape, seed: Value) -> dict[int, np.ndarray]:
    """Run a backward pass and return the full node-id -> gradient map."""
    tape.backward(seed)
    return {
        n.id: (n.grad if n.grad is not None else np.zeros_like(n.data))
        for n in tape.nodes
    }


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Value):
            return a.tape
    return None


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray):
    # only scalar-to-array broadcast is allowed
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # gradient of a scalar operand broadcast against an array
    if shape == () and np.shape(g) != ():
        return np.asarray(g.sum())
    return g


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _data(a), _data(b)
    if tape is None:
        return av + bv
    _check_elementwise("add", av, bv)
    out = av + bv
    back = []
    if isinstance(a, Value):
        back.append((a, lambda g: _reduce_to(g, av.shape)))
    if isinstance(b, Value):
        back.append((b, lambda g: _reduce_to(g, bv.shape)))
    return Value(tape, out, "add", _parents(a, b), back)


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = _data(a), _data(b)
    if tape is None:
        return av - bv
    _check_elementwise("sub", av, bv)
    out = av - bv
    back = []
    if isinstance(a, Value):
        back.append((a, lambda g: _reduce_to(g, av.shape)))
    if isinstance(b, Value):
        back.append((b, lambda g: _reduce_to(-g, bv.shape)))
    return Value(tape, out, "sub", _parents(a, b), back)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _data(a), _data(b)
    if tape is None:
        return av * bv
    _check_elementwise("mul", av, bv)
    out = av * bv
    back = []
    if isinstance(a, Value):
        back.append((a, lambda g: _reduce_to(g * bv, av.shape)))
    if isinstance(b, Value):
        back.append((b, lambda g: _reduce_to(g * av, bv.shape)))
    return Value(tape, out, "mul", _parents(a, b), back)


def neg(a):
    tape = _tape_of(a)
    av = _data(a)
    if tape is None:
        return -av
    return Value(tape, -av, "neg", (a,), [(a, lambda g: -g)])


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _data(a), _data(b)
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
        raise ShapeMismatch(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    back = []
    if av.ndim == 2 and bv.ndim == 1:
        if isinstance(a, Value):
            back.append((a, lambda g: np.outer(g, bv)))
        if isinstance(b, Value):
            back.append((b, lambda g: av.T @ g))
    elif av.ndim == 1 and bv.ndim == 2:
        if isinstance(a, Value):
            back.append((a, lambda g: g @ bv.T))
        if isinstance(b, Value):
            back.append((b, lambda g: np.outer(av, g)))
    elif av.ndim == 2 and bv.ndim == 2:
        if isinstance(a, Value):
            back.append((a, lambda g: g @ bv.T))
        if isinstance(b, Value):
            back.append((b, lambda g: av.T @ g))
    else:  # vector dot product
        if isinstance(a, Value):
            back.append((a, lambda g: g * bv))
        if isinstance(b, Value):
            back.append((b, lambda g: g * av))
    return Value(tape, out, "matmul", _parents(a, b), back)


def _parents(*args):
    return tuple(a for a in args if isinstance(a, Value))


def _unary(op: str, a, fw: Callable, bw: Callable):
    tape = _tape_of(a)
    av = _data(a)
    out = fw(av)
    if tape is None:
        return out
    return Value(tape, out, op, (a,), [(a, lambda g: g * bw(av, out))])


def exp(a):
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a):
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def square(a):
    return _unary("square", a, np.square, lambda x, y: 2.0 * x)


def prelu(a):
    # PReLU(x) = x for x >= 0, 0.5 x otherwise; subgradient at 0 is 1
    return _unary(
        "prelu",
        a,
        lambda x: np.where(x >= 0.0, x, 0.5 * x),
        lambda x, y: np.where(x >= 0.0, 1.0, 0.5),
    )


def _softplus(x):
    # overflow-safe log(1 + e^x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    pos = x >= 0.0
    ex = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def softplus(a):
    return _unary("softplus", a, _softplus, lambda x, y: _sigmoid(x))


def sigmoid(a):
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def clamp_min(a, floor: float):
    # max(x, floor); gradient passes only where x > floor
    return _unary(
        "clamp_min",
        a,
        lambda x: np.maximum(x, floor),
        lambda x, y: (x > floor).astype(np.float64),
    )


def clamp_max(a, ceil: float):
    # min(x, ceil); gradient passes only where x < ceil
    return _unary(
        "clamp_max",
        a,
        lambda x: np.minimum(x, ceil),
        lambda x, y: (x < ceil).astype(np.float64),
    )


def vsum(a):
    """Sum of all elements, producing a scalar node."""
    tape = _tape_of(a)
    av = _data(a)
    out = np.asarray(av.sum())
    if tape is None:
        return out
    return Value(tape, out, "sum", (a,), [(a, lambda g: np.broadcast_to(g, av.shape))])


def concat(parts):
    """Concatenate scalars/vectors into one vector; parts may mix Values and constants."""
    tape = _tape_of(*parts)
    datas = [np.atleast_1d(_data(p)) for p in parts]
    out = np.concatenate(datas)
    if tape is None:
        return out
    back = []
    lo = 0
    for p, d in zip(parts, datas):
        n = d.shape[0]
        if isinstance(p, Value):
            scalar = p.data.shape == ()
            start = lo

            def bw(g, start=start, n=n, scalar=scalar):
                piece = g[start : start + n]
                return np.asarray(piece[0]) if scalar else piece

            back.append((p, bw))
        lo += n
    return Value(tape, out, "concat", _parents(*parts), back)


def vslice(a, lo: int, hi: int):
    """Contiguous slice [lo, hi) of a vector."""
    tape = _tape_of(a)
    av = _data(a)
    if av.ndim != 1 or not (0 <= lo <= hi <= av.shape[0]):
        raise ShapeMismatch(f"slice: [{lo}:{hi}] invalid for shape {av.shape}")
    out = av[lo:hi].copy()
    if tape is None:
        return out

    def bw(g):
        full = np.zeros_like(av)
        full[lo:hi] = g
        return full

    return Value(tape, out, "slice", (a,), [(a, bw)])


def affine(x, w, b):
    """x @ w + b for a vector (or batch of row vectors) x."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = _data(x), _data(w), _data(b)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ShapeMismatch(f"affine: shapes {xv.shape}, {wv.shape}, {bv.shape}")
    out = xv @ wv + bv
    if tape is None:
        return out
    back = []
    if isinstance(x, Value):
        back.append((x, lambda g: g @ wv.T))
    if isinstance(w, Value):
        if xv.ndim == 1:
            back.append((w, lambda g: np.outer(xv, g)))
        else:
            back.append((w, lambda g: xv.T @ g))
    if isinstance(b, Value):
        if xv.ndim == 1:
            back.append((b, lambda g: g))
        else:
            back.append((b, lambda g: g.sum(axis=0)))
    return Value(tape, out, "affine", _parents(x, w, b), back)


def gauss_logpdf(x_obs: np.ndarray, mu, var):
    """Sum of independent-Gaussian log densities of the constant x_obs.

    Returns sum_i -0.5 log(2 pi var_i) - (x_i - mu_i)^2 / (2 var_i) over the
    last axis; for batched (mu, var) the leading axes survive.
    """
    tape = _tape_of(mu, var)
    xv = _arr(x_obs)
    mv, vv = _data(mu), _data(var)
    diff = xv - mv
    out = np.asarray((-0.5 * (np.log(vv) + LOG_2PI) - diff * diff / (2.0 * vv)).sum(axis=-1))
    if tape is None:
        return out
    back = []
    if isinstance(mu, Value):
        back.append((mu, lambda g: g * diff / vv))
    if isinstance(var, Value):
        back.append((var, lambda g: g * (-0.5 / vv + diff * diff / (2.0 * vv * vv))))
    return Value(tape, out, "gauss_logpdf", _parents(mu, var), back)


def kl_diag(mu_q, var_q, mu_p, var_p):
    """KL( N(mu_q, var_q) || N(mu_p, var_p) ) for diagonal Gaussians, summed."""
    tape = _tape_of(mu_q, var_q, mu_p, var_p)
    mq, vq, mp, vp = _data(mu_q), _data(var_q), _data(mu_p), _data(var_p)
    if np.any(vq <= 0.0) or np.any(vp <= 0.0):
        raise ValueError("kl_diag: variances must be positive")
    diff = mq - mp
    out = np.asarray(
        (0.5 * (vq / vp + diff * diff / vp - 1.0 - np.log(vq / vp))).sum(axis=-1)
    )
    if tape is None:
        return out
    back = []
    if isinstance(mu_q, Value):
        back.append((mu_q, lambda g: g * diff / vp))
    if isinstance(var_q, Value):
        back.append((var_q, lambda g: g * 0.5 * (1.0 / vp - 1.0 / vq)))
    if isinstance(mu_p, Value):
        back.append((mu_p, lambda g: -g * diff / vp))
    if isinstance(var_p, Value):
        back.append(
            (var_p, lambda g: g * 0.5 * (1.0 / vp - vq / (vp * vp) - diff * diff / (vp * vp)))
        )
    return Value(tape, out, "kl_diag", _parents(mu_q, var_q, mu_p, var_p), back)


def grad_check(f, point: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f maps a dict of leaves (Values or ndarrays) to a scalar; it is
    evaluated once on a tape for the analytic gradient and twice per
    coordinate on plain arrays for the numeric one.
    """
    # private copies: the numeric loop perturbs these arrays in place, and
    # aliasing the caller's arrays would leak perturbations into anything
    # f closes over
    point = {k: _arr(v).copy() for k, v in point.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in point.items()}
    out = f(leaves)
    tape.backward(out)
    analytic = {
        k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(point[k]))
        for k in point
    }

    def eval_at(p):
        return float(np.asarray(f(p)))

    worst = 0.0
    for k, arr in point.items():
        an = np.atleast_1d(np.asarray(analytic[k], dtype=np.float64))
        flat = arr.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_at(point)
            flat[i] = orig - step
            lo = eval_at(point)
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        an_flat = an.reshape(-1)
        err = np.abs(an_flat - num) / np.maximum(1.0, np.abs(an_flat))
        worst = max(worst, float(err.max()))
    return worst
