"""Variational posterior, the variational lower bound, and ADAM training.

The approximate posterior q(z_t | x_t, memory) is a Gaussian-head FNN over
the concatenated return vector and carried memory: the LSTM hidden state
for the network families, the previous factor value for the Markov
parametric families.

Training sweeps contiguous windows in chronological order, carrying the
factor state across windows while truncating gradients at window
boundaries. The parameters attaining the best per-epoch VLB are kept.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import models
from .models import FactorState, ModelSpec
from .networks import GaussianHead, _cat


class DivergenceError(RuntimeError):
    """Non-finite VLB term at a given timestep."""

    def __init__(self, timestep: int):
        self.timestep = timestep
        super().__init__(f"non-finite VLB term at timestep {timestep}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, window: int, timestep: int):
        self.epoch, self.window, self.timestep = epoch, window, timestep
        super().__init__(
            f"training diverged at epoch {epoch}, window {window}, timestep {timestep}"
        )


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 2000
    window: int = 50
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mc_samples: int = 1
    seed: int = 0
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.window < 1 or self.mc_samples < 1 or self.learning_rate <= 0:
            raise ValueError("TrainingConfig: window >= 1, mc_samples >= 1, lr > 0 required")

    @classmethod
    def from_file(cls, path: str) -> "TrainingConfig":
        with open(path) as fh:
            doc = json.load(fh)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kw) -> "TrainingConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class VlbBreakdown:
    recon: float
    kl: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.recon - self.kl)


def posterior_head(spec: ModelSpec) -> GaussianHead:
    mem_dim = spec.n_h if spec.is_network else spec.n_z
    return GaussianHead(spec.n_x + mem_dim, max(16, 2 * spec.n_x), spec.n_z)


def init_posterior(spec: ModelSpec, rng: np.random.Generator) -> dict:
    return posterior_head(spec).init(rng, "post.enc", var_bias=0.5)


def encode(spec: ModelSpec, p: Mapping, x_t, memory):
    """Posterior (mu_q, var_q) from the return vector and the carried memory."""
    return posterior_head(spec).forward(p, "post.enc", _cat(x_t, memory))


def reparam_sample(mu, var, eps):
    """mu + sqrt(var) * eps; differentiable in mu and var."""
    v = var.data if isinstance(var, ad.Value) else np.asarray(var, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("reparam_sample: variance must be positive")
    return ad.add(mu, ad.mul(ad.sqrt(var), eps))


def kl_diag_normal(mu_q, var_q, mu_p, var_p):
    """Closed-form KL between diagonal Gaussians, summed over components."""
    return ad.kl_diag(mu_q, var_q, mu_p, var_p)


def vlb_pass(spec: ModelSpec, p: Mapping, x_window, state_in: FactorState, eps):
    """Accumulate (recon, kl, state_out) over one window.

    p maps parameter names to ndarrays (plain evaluation) or tape Values
    (training); eps has shape (W, L, n_z) with one fresh draw per
    (timestep, sample).
    """
    tp = models.transform(spec, p)
    state = state_in
    W, L, _ = eps.shape
    recon_sum = None
    kl_sum = None
    for t in range(W):
        x_t = x_window[t]
        memory = state.lstm.hidden if spec.is_network else state.z
        mu_p, var_p = models.prior_step(spec, tp, state)
        mu_q, var_q = encode(spec, p, x_t, memory)
        recon_t = None
        z_l = None
        for l in range(L):
            z_l = reparam_sample(mu_q, var_q, eps[t, l])
            mu_x, var_x = models.emission(spec, tp, z_l)
            lp = ad.gauss_logpdf(x_t, mu_x, var_x)
            recon_t = lp if recon_t is None else ad.add(recon_t, lp)
        if L > 1:
            recon_t = ad.mul(recon_t, 1.0 / L)
        kl_t = ad.kl_diag(mu_q, var_q, mu_p, var_p)
        rv = recon_t.data if isinstance(recon_t, ad.Value) else recon_t
        kv = kl_t.data if isinstance(kl_t, ad.Value) else kl_t
        if not (np.isfinite(rv) and np.isfinite(kv)):
            raise DivergenceError(t)
        recon_sum = _accumulate(recon_sum, recon_t)
        kl_sum = _accumulate(kl_sum, kl_t)
        state = models.advance_state(spec, p, state, z_l)
    return recon_sum, kl_sum, state


def _accumulate(acc, term):
    return term if acc is None else ad.add(acc, term)


def vlb(
    spec: ModelSpec,
    p: Mapping,
    x_window: np.ndarray,
    state_in: FactorState,
    config: TrainingConfig,
    rng: np.random.Generator | None = None,
):
    """Evaluate the VLB on plain arrays; returns (VlbBreakdown, state_out)."""
    if len(x_window) == 0:
        raise ValueError("vlb: empty window")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    eps = rng.standard_normal((len(x_window), config.mc_samples, spec.n_z))
    arrays = {k: np.asarray(v, dtype=float) for k, v in p.items()}
    recon, kl, state = vlb_pass(spec, arrays, np.asarray(x_window, dtype=float), state_in, eps)
    return VlbBreakdown(recon=float(recon), kl=float(kl)), state.detached()


def adam_step(params: dict, grads: Mapping, m: dict, v: dict, step: int, config: TrainingConfig):
    """One clipped ADAM minimization step, updating params/moments in place."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = config.grad_clip / norm if norm > config.grad_clip else 1.0
    b1, b2 = config.adam_beta1, config.adam_beta2
    for k, g in grads.items():
        g = g * scale
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        m_hat = m[k] / (1.0 - b1**step)
        v_hat = v[k] / (1.0 - b2**step)
        params[k] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params, m, v


@dataclass
class FitResult:
    spec: ModelSpec
    params: dict              # model + posterior raw parameters, best epoch
    curve: list[float]        # per-epoch total VLB
    best_epoch: int


def fit(
    spec: ModelSpec,
    data,
    config: TrainingConfig,
    init: Mapping | None = None,
) -> FitResult:
    """Fit model and posterior parameters by maximizing the windowed VLB."""
    x = np.asarray(getattr(data, "returns", data), dtype=float)
    T = x.shape[0]
    if T < config.window:
        raise ValueError(f"fit: need at least {config.window} timesteps, got {T}")
    rng = np.random.default_rng(config.seed)
    if init is None:
        params = models.init_params(spec, rng, x_scale=float(x.std()))
        params.update(init_posterior(spec, rng))
    else:
        params = {k: np.array(v, dtype=float) for k, v in init.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    bounds = [(i, min(i + config.window, T)) for i in range(0, T, config.window)]
    L = config.mc_samples
    curve: list[float] = []
    best_vlb = -np.inf
    best_params = {k: val.copy() for k, val in params.items()}
    best_epoch = -1
    step = 0
    for epoch in range(config.epochs):
        state = models.initial_state(spec, params)
        epoch_total = 0.0
        for wi, (lo, hi) in enumerate(bounds):
            eps = rng.standard_normal((hi - lo, L, spec.n_z))
            tape = ad.Tape()
            leaves = {k: tape.leaf(val) for k, val in params.items()}
            try:
                recon, kl, state_nodes = vlb_pass(spec, leaves, x[lo:hi], state, eps)
            except DivergenceError as err:
                raise TrainingDiverged(epoch, wi, err.timestep) from err
            total = ad.sub(recon, kl)
            tape.backward(total)
            grads = {
                k: (-leaves[k].grad if leaves[k].grad is not None else np.zeros_like(params[k]))
                for k in params
            }
            step += 1
            adam_step(params, grads, m, v, step, config)
            epoch_total += float(total.data)
            state = state_nodes.detached()
        if not np.isfinite(epoch_total):
            raise TrainingDiverged(epoch, len(bounds) - 1, -1)
        curve.append(epoch_total)
        if epoch_total > best_vlb:
            best_vlb = epoch_total
            best_params = {k: val.copy() for k, val in params.items()}
            best_epoch = epoch
    return FitResult(spec=spec, params=best_params, curve=curve, best_epoch=best_epoch)
