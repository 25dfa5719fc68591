"""Network building blocks: Gaussian-head FNNs, the monotone-increasing
FNN with exponentiated weights, and an LSTM cell.

All parameters live in flat name -> float64 array dicts so that the
trainer, the serializer and the optimizer can treat every model the same
way. The classes below are architecture descriptors: they know their
shapes, how to draw an initial parameter set, and how to run a forward
pass against any mapping whose values are either ndarrays (plain
evaluation) or tape Values (differentiable evaluation).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-s, s, size=(n_in, n_out))


def inv_softplus(y: float) -> float:
    """Raw value r with softplus(r) = y, for y > 0."""
    y = float(y)
    if y > 30.0:
        return y
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class GaussianHead:
    """One-hidden-layer FNN emitting (mean, variance); variance head is softplus."""

    in_dim: int
    hidden: int
    out_dim: int

    def init(self, rng: np.random.Generator, prefix: str, var_bias: float = 1.0) -> dict:
        p = {
            f"{prefix}.h.W": glorot(rng, self.in_dim, self.hidden),
            f"{prefix}.h.b": np.zeros(self.hidden),
            f"{prefix}.mu.W": glorot(rng, self.hidden, self.out_dim),
            f"{prefix}.mu.b": np.zeros(self.out_dim),
            f"{prefix}.var.W": glorot(rng, self.hidden, self.out_dim),
            f"{prefix}.var.b": np.full(self.out_dim, inv_softplus(var_bias)),
        }
        return p

    def forward(self, p: Mapping, prefix: str, x):
        h = ad.prelu(ad.affine(x, p[f"{prefix}.h.W"], p[f"{prefix}.h.b"]))
        mu = ad.affine(h, p[f"{prefix}.mu.W"], p[f"{prefix}.mu.b"])
        var = ad.softplus(ad.affine(h, p[f"{prefix}.var.W"], p[f"{prefix}.var.b"]))
        return mu, var


@dataclass(frozen=True)
class MiFnn:
    """Monotone-increasing two-branch FNN; effective weights are exp(raw)."""

    n_in: int
    m: int
    n_x: int

    def init(self, rng: np.random.Generator, prefix: str) -> dict:
        p = {}
        for branch in ("mu", "sg"):
            # raw ~ N(-1, 0.5^2) keeps exp(raw) near 0.37 at the start
            p[f"{prefix}.{branch}.W1"] = rng.normal(-1.0, 0.5, size=(self.n_in, self.m))
            p[f"{prefix}.{branch}.b1"] = np.zeros(self.m)
            p[f"{prefix}.{branch}.W2"] = rng.normal(-1.0, 0.5, size=(self.m, self.n_x))
            p[f"{prefix}.{branch}.b2"] = np.zeros(self.n_x)
        return p

    def _stack(self, p: Mapping, prefix: str, branch: str, z):
        h = ad.prelu(
            ad.add(ad.matmul(z, ad.exp(p[f"{prefix}.{branch}.W1"])), p[f"{prefix}.{branch}.b1"])
        )
        return ad.add(ad.matmul(h, ad.exp(p[f"{prefix}.{branch}.W2"])), p[f"{prefix}.{branch}.b2"])

    def forward_mu(self, p: Mapping, prefix: str, z):
        return ad.prelu(self._stack(p, prefix, "mu", z))

    def forward_sigma(self, p: Mapping, prefix: str, z):
        return ad.softplus(self._stack(p, prefix, "sg", z))


def mi_fnn_mu(net: MiFnn, p: Mapping, prefix: str, z):
    return net.forward_mu(p, prefix, z)


def mi_fnn_sigma(net: MiFnn, p: Mapping, prefix: str, z):
    return net.forward_sigma(p, prefix, z)


@dataclass
class LstmState:
    hidden: object  # (n_h,) ndarray or Value
    cell: object


@dataclass(frozen=True)
class Lstm:
    """Standard LSTM cell over the concatenated (z, hidden) input."""

    n_z: int
    n_h: int

    def init(self, rng: np.random.Generator, prefix: str) -> dict:
        b = np.zeros(4 * self.n_h)
        b[self.n_h : 2 * self.n_h] = 1.0  # forget gate bias, guards early memory
        return {
            f"{prefix}.W": glorot(rng, self.n_z + self.n_h, 4 * self.n_h),
            f"{prefix}.b": b,
        }

    def step(self, p: Mapping, prefix: str, z, state: LstmState) -> LstmState:
        x = _cat(z, state.hidden)
        gates = ad.affine(x, p[f"{prefix}.W"], p[f"{prefix}.b"])
        n = self.n_h
        i = ad.sigmoid(_part(gates, 0, n))
        f = ad.sigmoid(_part(gates, n, 2 * n))
        o = ad.sigmoid(_part(gates, 2 * n, 3 * n))
        g = ad.tanh(_part(gates, 3 * n, 4 * n))
        cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        hidden = ad.mul(o, ad.tanh(cell))
        return LstmState(hidden=hidden, cell=cell)


def lstm_step(net: Lstm, p: Mapping, prefix: str, z, state: LstmState) -> LstmState:
    return net.step(p, prefix, z, state)


def _cat(a, b):
    if isinstance(a, ad.Value) or isinstance(b, ad.Value):
        return ad.concat([a, b])
    av, bv = np.atleast_1d(np.asarray(a, dtype=float)), np.asarray(b, dtype=float)
    if av.ndim == 2 or bv.ndim == 2:  # batched numpy path
        av2 = av if av.ndim == 2 else np.broadcast_to(av, (bv.shape[0], av.shape[0]))
        bv2 = bv if bv.ndim == 2 else np.broadcast_to(bv, (av2.shape[0], bv.shape[0]))
        return np.concatenate([av2, bv2], axis=1)
    return np.concatenate([av, np.atleast_1d(bv)])


def _part(x, lo, hi):
    if isinstance(x, ad.Value):
        return ad.vslice(x, lo, hi)
    return x[..., lo:hi]
