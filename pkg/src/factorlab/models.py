"""The factor-model zoo: transition and emission rules for every supported
family, forward simulation, log densities, and model-file serialization.

Families
--------
APT          linear loadings, constant emission scale
L-SVFM       log-volatility affine in AR(1) factors
SR-SVFM      squared volatility affine in square-root factors
APT-L        one mean factor (pure noise) + one log-volatility factor
APT-SR       one mean factor + one square-root volatility factor
NNFM         FNN emission/prior with an LSTM memory over the factors
M-NNFM1      one factor; mean decreasing, variance increasing in it
M-NNFM2      two factors; mean driven by the first, variance by the second

Positivity and range constraints on the parametric families are enforced
by smooth reparameterization (softplus / logistic), so the training
objective stays unconstrained-differentiable. All stored parameters are
raw, pre-transform values.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .networks import GaussianHead, Lstm, LstmState, MiFnn, inv_softplus

PARAMETRIC_FAMILIES = ("APT", "L-SVFM", "SR-SVFM", "APT-L", "APT-SR")
NETWORK_FAMILIES = ("NNFM", "M-NNFM1", "M-NNFM2")
FAMILIES = PARAMETRIC_FAMILIES + NETWORK_FAMILIES

VAR_FLOOR = 1e-10       # emission variance floor
SR_EPS = 1e-6           # clamp for square-root factors
LOG_SCALE_CEIL = 20.0   # cap on the log emission scale (variance <= e^40)

MODEL_FORMAT = "gfm-model-v1"


class ModelError(ValueError):
    pass


def parse_model_name(name: str) -> tuple[str, int]:
    """Parse "FAMILY(n_z)" names, e.g. "APT(1)" or "M-NNFM(2)"."""
    name = name.strip()
    if not (name.endswith(")") and "(" in name):
        raise ModelError(f"bad model name {name!r}; expected FAMILY(n_z)")
    fam, _, rest = name.partition("(")
    try:
        n_z = int(rest[:-1])
    except ValueError:
        raise ModelError(f"bad factor count in model name {name!r}") from None
    fam = fam.strip()
    if fam == "M-NNFM":
        fam = f"M-NNFM{n_z}"
    if fam not in FAMILIES:
        valid = ", ".join(sorted(set(f.rstrip("12") for f in FAMILIES)))
        raise ModelError(f"unknown model family {name!r}; valid families: {valid}")
    return fam, n_z


@dataclass(frozen=True)
class ModelSpec:
    family: str
    n_z: int
    n_x: int
    n_h: int = field(default=-1)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if self.n_z not in (1, 2):
            raise ModelError(f"n_z must be 1 or 2, got {self.n_z}")
        if self.n_z >= self.n_x:
            raise ModelError(f"need n_z < n_x, got n_z={self.n_z}, n_x={self.n_x}")
        if self.family in ("APT-L", "APT-SR") and self.n_z != 2:
            raise ModelError(f"{self.family} requires n_z=2")
        if self.family == "M-NNFM1" and self.n_z != 1:
            raise ModelError("M-NNFM1 requires n_z=1")
        if self.family == "M-NNFM2" and self.n_z != 2:
            raise ModelError("M-NNFM2 requires n_z=2")
        if self.n_h == -1:
            object.__setattr__(self, "n_h", 3 * self.n_z if self.is_network else 0)

    @property
    def is_network(self) -> bool:
        return self.family in NETWORK_FAMILIES

    @property
    def name(self) -> str:
        fam = "M-NNFM" if self.family.startswith("M-NNFM") else self.family
        return f"{fam}({self.n_z})"

    # factor layout for the parametric families
    @property
    def mean_idx(self) -> list[int]:
        if self.family == "APT":
            return list(range(self.n_z))
        if self.family in ("APT-L", "APT-SR"):
            return [0]
        return []

    @property
    def var_idx(self) -> list[int]:
        if self.family in ("L-SVFM", "SR-SVFM"):
            return list(range(self.n_z))
        if self.family in ("APT-L", "APT-SR"):
            return [1]
        return []

    @property
    def vol_form(self) -> str:
        if self.family == "APT":
            return "const"
        if self.family in ("L-SVFM", "APT-L"):
            return "log"
        if self.family in ("SR-SVFM", "APT-SR"):
            return "sqrt"
        return "net"


def spec_from_name(name: str, n_x: int) -> ModelSpec:
    fam, n_z = parse_model_name(name)
    return ModelSpec(family=fam, n_z=n_z, n_x=n_x)


# architecture descriptors (widths are artifact defaults, overridable here)
def emission_head(spec: ModelSpec) -> GaussianHead:
    return GaussianHead(spec.n_z, max(16, 2 * spec.n_x), spec.n_x)


def prior_head(spec: ModelSpec) -> GaussianHead:
    return GaussianHead(spec.n_h, 16, spec.n_z)


def memory_net(spec: ModelSpec) -> Lstm:
    return Lstm(spec.n_z, spec.n_h)


def mi_net(spec: ModelSpec) -> MiFnn:
    return MiFnn(1, 8, spec.n_x)


@dataclass
class FactorState:
    """Carried state: last factor value, plus the LSTM memory for network families."""

    z: object                      # (n_z,) ndarray or Value
    lstm: LstmState | None = None

    def detached(self) -> "FactorState":
        z = self.z.data.copy() if isinstance(self.z, ad.Value) else np.array(self.z, dtype=float)
        lstm = None
        if self.lstm is not None:
            h = self.lstm.hidden
            c = self.lstm.cell
            lstm = LstmState(
                hidden=h.data.copy() if isinstance(h, ad.Value) else np.array(h, dtype=float),
                cell=c.data.copy() if isinstance(c, ad.Value) else np.array(c, dtype=float),
            )
        return FactorState(z=z, lstm=lstm)


def init_params(spec: ModelSpec, rng: np.random.Generator, x_scale: float = 1.0) -> dict:
    """Draw an initial raw parameter set for the generative model."""
    n_x, n_z = spec.n_x, spec.n_z
    if spec.is_network:
        p = {}
        if spec.family == "NNFM":
            p.update(emission_head(spec).init(rng, "emis", var_bias=x_scale**2))
        else:
            p.update(mi_net(spec).init(rng, "emis"))
            # pull the variance branch toward the data scale at z = 0
            p["emis.sg.b2"] = np.full(n_x, inv_softplus(x_scale**2))
        p.update(prior_head(spec).init(rng, "prior", var_bias=1.0))
        p.update(memory_net(spec).init(rng, "mem"))
        return p

    n_mean, n_var = len(spec.mean_idx), len(spec.var_idx)
    p = {"alpha0": np.zeros(n_x)}
    if n_mean:
        p["alpha_raw"] = np.vectorize(inv_softplus)(
            rng.uniform(0.2, 0.6, size=(n_x, n_mean)) * x_scale
        )
    if spec.vol_form == "const":
        p["beta0_raw"] = np.full(n_x, inv_softplus(0.8 * x_scale))
    elif spec.vol_form == "log":
        p["beta0"] = np.full(n_x, np.log(0.6 * x_scale))
        p["beta_raw"] = np.vectorize(inv_softplus)(
            rng.uniform(0.1, 0.3, size=(n_x, n_var)) * np.ones(n_var)
        )
        p["a_raw"] = np.full(n_var, _logit(0.9))
    else:  # sqrt
        p["beta0"] = np.full(n_x, 0.5 * (x_scale**2))
        p["beta_raw"] = np.vectorize(inv_softplus)(rng.uniform(0.05, 0.15, size=(n_x, n_var)))
        p["a_raw"] = np.full(n_var, _logit(0.7))
        p["c_raw"] = np.full(n_var, inv_softplus(0.1))
    return p


def _logit(x: float) -> float:
    return float(np.log(x / (1.0 - x)))


def transform(spec: ModelSpec, p: Mapping) -> Mapping:
    """Map raw parameters to constrained ones; identity for network families.

    Works on ndarrays and on tape Values alike, so gradients flow through
    the transforms during training.
    """
    if spec.is_network:
        return p
    tp = {"alpha0": p["alpha0"]}
    if len(spec.mean_idx):
        tp["alpha"] = ad.softplus(p["alpha_raw"])
    if spec.vol_form == "const":
        tp["beta0"] = ad.softplus(p["beta0_raw"])
    else:
        tp["beta0"] = p["beta0"]
        tp["beta"] = ad.softplus(p["beta_raw"])
        tp["a"] = ad.sigmoid(p["a_raw"])
        if spec.vol_form == "sqrt":
            tp["c"] = ad.add(ad.softplus(p["c_raw"]), 0.5)
    return tp


def initial_state(spec: ModelSpec, params: Mapping) -> FactorState:
    """z_0 = 0 except square-root factors start at their stationary mean; h_0 = 0."""
    if spec.is_network:
        n_h = spec.n_h
        return FactorState(
            z=np.zeros(spec.n_z), lstm=LstmState(hidden=np.zeros(n_h), cell=np.zeros(n_h))
        )
    z0 = np.zeros(spec.n_z)
    if spec.vol_form == "sqrt":
        raw = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        tp = transform(spec, raw)
        c, a = np.asarray(tp["c"]), np.asarray(tp["a"])
        z0[spec.var_idx] = c / (1.0 - a)
    return FactorState(z=z0, lstm=None)


def _fslice(x, lo: int, hi: int):
    if isinstance(x, ad.Value):
        return ad.vslice(x, lo, hi)
    return np.asarray(x, dtype=float)[..., lo:hi]


def _fcat(parts):
    if any(isinstance(p, ad.Value) for p in parts):
        return ad.concat(parts)
    arrays = [np.atleast_1d(np.asarray(p, dtype=float)) for p in parts]
    if any(a.ndim == 2 for a in arrays):
        n = next(a.shape[0] for a in arrays if a.ndim == 2)
        arrays = [a if a.ndim == 2 else np.broadcast_to(a, (n, a.shape[0])) for a in arrays]
        return np.concatenate(arrays, axis=1)
    return np.concatenate(arrays)


def _mv(mat, vec):
    # mat @ vec for a single vector, or batched rows of vec
    if not isinstance(vec, ad.Value) and np.asarray(vec).ndim == 2:
        return np.asarray(vec) @ _np(mat).T
    return ad.matmul(mat, vec)


def _np(x):
    return x.data if isinstance(x, ad.Value) else np.asarray(x, dtype=float)


def prior_step(spec: ModelSpec, tp: Mapping, state: FactorState):
    """One-step-ahead prior (mu_z, var_z) given the carried state."""
    if spec.is_network:
        return prior_head(spec).forward(tp, "prior", state.lstm.hidden)
    n_z = spec.n_z
    if spec.family == "APT":
        return np.zeros(n_z), np.ones(n_z)
    if spec.family in ("L-SVFM", "SR-SVFM"):
        z_prev = state.z
        if spec.family == "L-SVFM":
            return ad.mul(tp["a"], z_prev), np.ones(n_z)
        mu = ad.add(tp["c"], ad.mul(tp["a"], z_prev))
        var = ad.clamp_min(z_prev, SR_EPS)
        return mu, var
    # hybrids: factor 0 is pure noise, factor 1 carries the volatility
    z2 = _fslice(state.z, 1, 2)
    if spec.family == "APT-L":
        mu2 = ad.mul(tp["a"], z2)
        var2 = np.ones(1)
    else:
        mu2 = ad.add(tp["c"], ad.mul(tp["a"], z2))
        var2 = ad.clamp_min(z2, SR_EPS)
    mu = _fcat([np.zeros(1), mu2])
    var = _fcat([np.ones(1), var2])
    return mu, var


def emission(spec: ModelSpec, tp: Mapping, z):
    """Emission (mu_x, var_x) of the return vector given the factor value z."""
    if spec.family == "NNFM":
        mu, var = emission_head(spec).forward(tp, "emis", z)
        return mu, ad.clamp_min(var, VAR_FLOOR)
    if spec.family == "M-NNFM1":
        net = mi_net(spec)
        mu = ad.neg(net.forward_mu(tp, "emis", z))
        var = net.forward_sigma(tp, "emis", z)
        return mu, ad.clamp_min(var, VAR_FLOOR)
    if spec.family == "M-NNFM2":
        net = mi_net(spec)
        mu = net.forward_mu(tp, "emis", _fslice(z, 0, 1))
        var = net.forward_sigma(tp, "emis", _fslice(z, 1, 2))
        return mu, ad.clamp_min(var, VAR_FLOOR)

    mu = tp["alpha0"]
    if len(spec.mean_idx):
        z_mean = z if spec.family == "APT" else _fslice(z, 0, 1)
        mu = ad.add(mu, _mv(tp["alpha"], z_mean))
    if spec.vol_form == "const":
        var = ad.square(tp["beta0"])
    else:
        z_var = z if spec.family in ("L-SVFM", "SR-SVFM") else _fslice(z, 1, 2)
        s = ad.add(tp["beta0"], _mv(tp["beta"], z_var))
        if spec.vol_form == "log":
            # ceiling on the log-scale keeps a wandering optimizer from
            # overflowing exp; never binding for plausible return scales
            var = ad.exp(ad.mul(ad.clamp_max(s, LOG_SCALE_CEIL), 2.0))
        else:
            var = ad.clamp_min(s, SR_EPS)
    return mu, ad.clamp_min(var, VAR_FLOOR)


def log_emission_density(spec: ModelSpec, params: Mapping, x_t: np.ndarray, z_t):
    """log p(x_t | z_t) under the diagonal-Gaussian emission rule."""
    x_t = np.asarray(x_t, dtype=float)
    if not np.all(np.isfinite(x_t)) or not np.all(np.isfinite(_np(z_t))):
        raise ValueError("log_emission_density: non-finite input")
    mu, var = emission(spec, transform(spec, params), z_t)
    return ad.gauss_logpdf(x_t, mu, var)


def log_prior_transition(spec: ModelSpec, params: Mapping, z_t, state_prev: FactorState):
    """log p(z_t | state_prev) under the family's transition rule."""
    if not np.all(np.isfinite(_np(z_t))):
        raise ValueError("log_prior_transition: non-finite input")
    mu, var = prior_step(spec, transform(spec, params), state_prev)
    return ad.gauss_logpdf(np.asarray(z_t, dtype=float), mu, var)


def advance_state(spec: ModelSpec, p: Mapping, state: FactorState, z_t) -> FactorState:
    """Carry the state forward with the (sampled) factor value z_t."""
    if spec.is_network:
        new_lstm = memory_net(spec).step(p, "mem", z_t, state.lstm)
        return FactorState(z=z_t, lstm=new_lstm)
    return FactorState(z=z_t, lstm=None)


def simulate(
    spec: ModelSpec,
    params: Mapping,
    T: int,
    z0: np.ndarray | None = None,
    seed: int = 0,
):
    """Ancestral sampling of (x_path, z_path); deterministic given the seed."""
    if T < 1:
        raise ModelError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(seed)
    p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    tp = transform(spec, p)
    state = initial_state(spec, p)
    if z0 is not None:
        state.z = np.asarray(z0, dtype=float)
    x_path = np.empty((T, spec.n_x))
    z_path = np.empty((T, spec.n_z))
    for t in range(T):
        mu_z, var_z = prior_step(spec, tp, state)
        z_t = mu_z + np.sqrt(var_z) * rng.standard_normal(spec.n_z)
        mu_x, var_x = emission(spec, tp, z_t)
        x_t = mu_x + np.sqrt(var_x) * rng.standard_normal(spec.n_x)
        x_path[t] = x_t
        z_path[t] = z_t
        state = advance_state(spec, p, state, z_t)
    return x_path, z_path


def sensitivity(spec: ModelSpec, params: Mapping, z: np.ndarray):
    """Jacobians (d mu / d z, d sigma / d z), each n_x x n_z, via the tape."""
    if not spec.is_network:
        raise ModelError(f"sensitivity is defined for network families, not {spec.family}")
    p = {k: np.asarray(v, dtype=float) for k, v in params.items()}
    z = np.asarray(z, dtype=float)
    tape = ad.Tape()
    z_node = tape.leaf(z)
    mu, var = emission(spec, p, z_node)
    n_x, n_z = spec.n_x, spec.n_z
    dmu = np.zeros((n_x, n_z))
    dsigma = np.zeros((n_x, n_z))
    sigma = np.sqrt(var.data)
    for i in range(n_x):
        tape.backward(ad.vsum(ad.vslice(mu, i, i + 1)))
        dmu[i] = z_node.grad if z_node.grad is not None else 0.0
        tape.backward(ad.vsum(ad.vslice(var, i, i + 1)))
        dvar = z_node.grad if z_node.grad is not None else np.zeros(n_z)
        dsigma[i] = dvar / (2.0 * sigma[i])
    return dmu, dsigma


def save_model(path: str, spec: ModelSpec, params: Mapping) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "family": spec.family,
        "n_z": spec.n_z,
        "n_x": spec.n_x,
        "n_h": spec.n_h,
        "params": {k: np.asarray(v, dtype=float).tolist() for k, v in sorted(params.items())},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> tuple[ModelSpec, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"{path}: not a {MODEL_FORMAT} file")
    spec = ModelSpec(family=doc["family"], n_z=doc["n_z"], n_x=doc["n_x"], n_h=doc["n_h"])
    params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
    return spec, params
