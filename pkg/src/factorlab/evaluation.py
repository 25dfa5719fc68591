"""Model scoring: importance-sampled marginal log-likelihood, split
evaluation, posterior factor-path extraction, and comparison tables.

The marginal log-likelihood estimator draws L full factor paths from the
approximate posterior and aggregates the per-path log weights
log p(x|z) + log p(z) - log q(z|x). Two aggregates are kept: the plain
mean of the log weights (`value`) and the numerically stabilized
log-mean-exp (`log_mean_exp`), which is the consistent importance
estimate and the one the ordering checks use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import models
from .data import ReturnPanel, SplitSpec, split_panel
from .inference import TrainingConfig, posterior_head, vlb
from .models import FactorState, ModelSpec
from .networks import LstmState, _cat


@dataclass
class MllEstimate:
    value: float          # mean of the per-path log weights
    log_mean_exp: float   # logsumexp(per_sample) - log L
    per_sample: np.ndarray
    std_error: float
    num_samples: int


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    split: str            # "train" or "test"
    mll_per_day: float    # log-mean-exp estimate / days
    vlb_per_day: float
    mll_stderr: float     # std error of the per-path weights / days
    mll_mean_per_day: float = float("nan")  # mean-of-logs variant / days


@dataclass
class FactorPath:
    dates: list
    mean: np.ndarray      # (T, n_z)
    sd: np.ndarray        # (T, n_z)


def _batched_state(spec: ModelSpec, state: FactorState, L: int) -> FactorState:
    z = np.broadcast_to(state.z, (L, spec.n_z)).copy()
    lstm = None
    if state.lstm is not None:
        lstm = LstmState(
            hidden=np.broadcast_to(state.lstm.hidden, (L, spec.n_h)).copy(),
            cell=np.broadcast_to(state.lstm.cell, (L, spec.n_h)).copy(),
        )
    return FactorState(z=z, lstm=lstm)


def mll_importance(
    spec: ModelSpec,
    params: dict,
    x: np.ndarray,
    state_in: FactorState,
    L: int,
    seed: int = 0,
) -> MllEstimate:
    """Importance-sampled estimate of log p(x) using q as the proposal."""
    if L < 1:
        raise ValueError("mll_importance: L must be >= 1")
    if spec.n_z >= 5:
        raise ValueError("mll_importance: estimator only supported for n_z < 5")
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    tp = models.transform(spec, p)
    head = posterior_head(spec)
    state = _batched_state(spec, state_in, L)
    logw = np.zeros(L)
    memory_net = models.memory_net(spec) if spec.is_network else None
    for t in range(x.shape[0]):
        x_t = x[t]
        memory = state.lstm.hidden if spec.is_network else state.z
        mu_p, var_p = models.prior_step(spec, tp, state)
        mu_q, var_q = head.forward(p, "post.enc", _cat(x_t, memory))
        eps = rng.standard_normal((L, spec.n_z))
        z_t = mu_q + np.sqrt(var_q) * eps
        mu_x, var_x = models.emission(spec, tp, z_t)
        lw = _gauss(x_t, mu_x, var_x) + _gauss(z_t, mu_p, var_p) - _gauss(z_t, mu_q, var_q)
        if not np.all(np.isfinite(lw)):
            bad = int(np.flatnonzero(~np.isfinite(lw))[0])
            raise RuntimeError(f"mll_importance: non-finite weight on path {bad} at t={t}")
        logw += lw
        if spec.is_network:
            state = FactorState(z=z_t, lstm=memory_net.step(p, "mem", z_t, state.lstm))
        else:
            state = FactorState(z=z_t, lstm=None)
    value = float(logw.mean())
    lme = float(logsumexp(logw) - np.log(L))
    stderr = float(logw.std(ddof=1) / np.sqrt(L)) if L > 1 else 0.0
    return MllEstimate(
        value=value, log_mean_exp=lme, per_sample=logw, std_error=stderr, num_samples=L
    )


def _gauss(z, mu, var):
    d = z - mu
    return (-0.5 * (np.log(var) + np.log(2.0 * np.pi)) - d * d / (2.0 * var)).sum(axis=-1)


def _posterior_mean_pass(spec: ModelSpec, p: dict, x: np.ndarray, state: FactorState):
    """Deterministic sweep propagating the posterior mean through the memory."""
    head = posterior_head(spec)
    memory_net = models.memory_net(spec) if spec.is_network else None
    tp = models.transform(spec, p)
    T = x.shape[0]
    means = np.empty((T, spec.n_z))
    sds = np.empty((T, spec.n_z))
    for t in range(T):
        memory = state.lstm.hidden if spec.is_network else state.z
        mu_q, var_q = head.forward(p, "post.enc", _cat(x[t], memory))
        means[t] = mu_q
        sds[t] = np.sqrt(var_q)
        if spec.is_network:
            state = FactorState(z=mu_q, lstm=memory_net.step(p, "mem", mu_q, state.lstm))
        else:
            state = FactorState(z=mu_q, lstm=None)
    return means, sds, state


def factor_path(spec: ModelSpec, params: dict, panel: ReturnPanel) -> FactorPath:
    """Posterior factor trajectory (mean, sd) over the whole panel."""
    p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    state = models.initial_state(spec, p)
    means, sds, _ = _posterior_mean_pass(spec, p, panel.returns, state)
    return FactorPath(dates=list(panel.dates), mean=means, sd=sds)


def evaluate_split(
    spec: ModelSpec,
    params: dict,
    panel: ReturnPanel,
    split: SplitSpec,
    L: int = 256,
    seed: int = 0,
    vlb_samples: int = 128,
) -> tuple[ComparisonRow, ComparisonRow]:
    """Per-day VLB and MLL on both sides of the split.

    The test-side state is warm-started by a deterministic posterior-mean
    pass over the training prefix, so the held-out evaluation continues
    the same series rather than restarting cold. vlb_samples is deliberately
    high: the reported VLB is compared against the importance-sampled MLL,
    so its own Monte-Carlo noise should be well below the MLL's.
    """
    train, test = split_panel(panel, split)
    p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    state0 = models.initial_state(spec, p)
    cfg = TrainingConfig(mc_samples=vlb_samples, seed=seed)
    rows = []
    _, _, warm = _posterior_mean_pass(spec, p, train.returns, state0)
    for name, part, state in (("train", train, state0), ("test", test, warm)):
        n_days = part.returns.shape[0]
        bd, _ = vlb(spec, p, part.returns, state, cfg, rng=np.random.default_rng(seed))
        est = mll_importance(spec, p, part.returns, state, L=L, seed=seed + 1)
        rows.append(
            ComparisonRow(
                model=spec.name,
                split=name,
                mll_per_day=est.log_mean_exp / n_days,
                vlb_per_day=bd.total / n_days,
                mll_stderr=est.std_error / n_days,
                mll_mean_per_day=est.value / n_days,
            )
        )
    return rows[0], rows[1]


_FAMILY_ORDER = {fam: i for i, fam in enumerate(models.FAMILIES)}


def compare(
    fitted: list[tuple[ModelSpec, dict]],
    panel: ReturnPanel,
    split: SplitSpec,
    L: int = 256,
    seed: int = 0,
) -> list[ComparisonRow]:
    """Comparison table over fitted models, sorted by family then n_z."""
    for spec, _ in fitted:
        if spec.n_x != len(panel.symbols):
            raise ValueError(
                f"compare: model {spec.name} has n_x={spec.n_x}, panel has {len(panel.symbols)}"
            )
    rows: list[ComparisonRow] = []
    for spec, params in sorted(fitted, key=lambda f: (_FAMILY_ORDER[f[0].family], f[0].n_z)):
        tr, te = evaluate_split(spec, params, panel, split, L=L, seed=seed)
        rows.extend([tr, te])
    return rows


ROW_HEADER = "model,split,mll_per_day,vlb_per_day,mll_stderr"


def rows_to_text(rows: list[ComparisonRow]) -> str:
    lines = [ROW_HEADER]
    for r in rows:
        lines.append(f"{r.model},{r.split},{r.mll_per_day!r},{r.vlb_per_day!r},{r.mll_stderr!r}")
    return "\n".join(lines) + "\n"


def rows_from_text(text: str) -> list[ComparisonRow]:
    lines = [ln for ln in text.splitlines() if ln]
    if lines[0] != ROW_HEADER:
        raise ValueError("comparison table: unexpected header")
    out = []
    for ln in lines[1:]:
        model, split, mll, vlb_, se = ln.split(",")
        out.append(
            ComparisonRow(
                model=model,
                split=split,
                mll_per_day=float(mll),
                vlb_per_day=float(vlb_),
                mll_stderr=float(se),
            )
        )
    return out


def factor_path_to_text(fp: FactorPath) -> str:
    n_z = fp.mean.shape[1]
    cols = ["date"] + [f"mean_{j + 1}" for j in range(n_z)] + [f"sd_{j + 1}" for j in range(n_z)]
    lines = [",".join(cols)]
    for i, d in enumerate(fp.dates):
        vals = [repr(float(v)) for v in fp.mean[i]] + [repr(float(v)) for v in fp.sd[i]]
        lines.append(",".join([d.isoformat()] + vals))
    return "\n".join(lines) + "\n"
