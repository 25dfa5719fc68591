"""Panel ingestion, summary statistics, and synthetic fixtures.

Panel files are delimited text: a header row of symbols after a leading
"date" column, then one ISO-8601 date plus one value per symbol per row.
Files may carry either returns directly or price levels, which are
converted to log returns on load.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import models
from .models import ModelSpec
from .networks import inv_softplus


class PanelError(ValueError):
    pass


@dataclass
class ReturnPanel:
    dates: list[dt.date]
    symbols: list[str]
    returns: np.ndarray  # (T, n_x)

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=float)
        T, n_x = self.returns.shape
        if len(self.dates) != T or len(self.symbols) != n_x:
            raise PanelError("panel axes do not match the return matrix")
        if len(set(self.symbols)) != n_x:
            raise PanelError("panel symbols are not distinct")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise PanelError(f"dates not strictly increasing at {b.isoformat()}")
        if not np.all(np.isfinite(self.returns)):
            t, i = np.argwhere(~np.isfinite(self.returns))[0]
            raise PanelError(f"non-finite value at row {t}, column {self.symbols[i]}")

    def __len__(self):
        return self.returns.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Training side is strictly before divide_date, test side from it onward."""

    divide_date: dt.date


def split_panel(panel: ReturnPanel, split: SplitSpec) -> tuple[ReturnPanel, ReturnPanel]:
    i = next((k for k, d in enumerate(panel.dates) if d >= split.divide_date), len(panel))
    if i == 0 or i == len(panel):
        raise PanelError(
            f"split date {split.divide_date.isoformat()} leaves an empty side "
            f"(panel spans {panel.dates[0].isoformat()}..{panel.dates[-1].isoformat()})"
        )
    return (
        ReturnPanel(panel.dates[:i], list(panel.symbols), panel.returns[:i].copy()),
        ReturnPanel(panel.dates[i:], list(panel.symbols), panel.returns[i:].copy()),
    )


def load_panel(path: str, mode: str = "returns") -> ReturnPanel:
    if mode not in ("returns", "prices"):
        raise PanelError(f"unknown mode {mode!r}; use 'returns' or 'prices'")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise PanelError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "date" or len(header) < 2:
        raise PanelError(f"{path}:1: expected header 'date,<symbol>,...'")
    symbols = header[1:]
    dates: list[dt.date] = []
    rows: list[list[float]] = []
    for ln_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise PanelError(f"{path}:{ln_no}: expected {len(header)} fields, got {len(cells)}")
        try:
            d = dt.date.fromisoformat(cells[0])
        except ValueError:
            raise PanelError(f"{path}:{ln_no}: bad date {cells[0]!r}") from None
        vals = []
        for sym, cell in zip(symbols, cells[1:]):
            if cell.strip() == "":
                raise PanelError(f"{path}:{ln_no}: missing value for {sym}")
            try:
                vals.append(float(cell))
            except ValueError:
                raise PanelError(f"{path}:{ln_no}: bad number {cell!r} for {sym}") from None
        if dates and d == dates[-1]:
            raise PanelError(f"{path}:{ln_no}: duplicated date {d.isoformat()}")
        dates.append(d)
        rows.append(vals)
    values = np.asarray(rows, dtype=float)
    if mode == "prices":
        if values.shape[0] < 2:
            raise PanelError(f"{path}: need at least 2 price rows")
        if np.any(values <= 0):
            raise PanelError(f"{path}: nonpositive price cannot be log-differenced")
        values = np.log(values[1:] / values[:-1])
        dates = dates[1:]
    return ReturnPanel(dates=dates, symbols=symbols, returns=values)


def save_panel(panel: ReturnPanel, path: str) -> None:
    import os

    lines = ["date," + ",".join(panel.symbols)]
    for d, row in zip(panel.dates, panel.returns):
        lines.append(d.isoformat() + "," + ",".join(repr(float(v)) for v in row))
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


@dataclass(frozen=True)
class MomentReport:
    symbol: str
    min: float
    q1: float
    q2: float
    q3: float
    max: float
    m1: float  # mean
    m2: float  # sample deviation (T-1)
    m3: float  # adjusted Fisher-Pearson skewness; nan for constant series
    m4: float  # Fisher excess kurtosis; nan for constant series


def moments(panel: ReturnPanel) -> list[MomentReport]:
    if len(panel) < 4:
        raise PanelError(f"moments: need at least 4 observations, got {len(panel)}")
    out = []
    for i, sym in enumerate(panel.symbols):
        x = panel.returns[:, i]
        q1, q2, q3 = np.quantile(x, [0.25, 0.5, 0.75])
        m2 = float(x.std(ddof=1))
        if m2 == 0.0:
            m3 = m4 = float("nan")
        else:
            m3 = float(stats.skew(x, bias=False))
            m4 = float(stats.kurtosis(x, fisher=True, bias=False))
        out.append(
            MomentReport(
                symbol=sym,
                min=float(x.min()),
                q1=float(q1),
                q2=float(q2),
                q3=float(q3),
                max=float(x.max()),
                m1=float(x.mean()),
                m2=m2,
                m3=m3,
                m4=m4,
            )
        )
    return out


@dataclass
class Fixture:
    panel: ReturnPanel
    z_path: np.ndarray
    spec: ModelSpec
    params: dict  # raw ground-truth parameters of the generator


# calibration targets for the default synthetic truths, chosen to look
# like estimates from a real daily equity panel
_DEFAULTS = {
    "APT": dict(alpha=0.5509, beta0=0.8237),
    "L-SVFM": dict(beta0=-1.301, beta=0.527, a=0.9),
    "SR-SVFM": dict(beta0=0.056, beta=0.363, a=0.7, c=0.8),
    "APT-L": dict(alpha=0.545, beta0=-0.778, beta=0.308, a=0.91),
    "APT-SR": dict(alpha=0.55, beta0=0.035, beta=0.30, a=0.70, c=0.94),
}


def make_fixture(
    family: str,
    T: int,
    n_x: int,
    seed: int = 0,
    jitter: float = 0.15,
    start: dt.date = dt.date(2000, 1, 3),
    **overrides,
) -> Fixture:
    """Deterministic synthetic panel with stored ground truth.

    family is a "FAMILY(n_z)" name. Per-asset parameters are the family
    defaults (overridable by keyword) jittered lognormally across assets.
    """
    spec = models.spec_from_name(family, n_x)
    rng = np.random.default_rng(seed)
    if spec.is_network:
        params = models.init_params(spec, rng, x_scale=1.0)
    else:
        vals = dict(_DEFAULTS[spec.family])
        vals.update(overrides)
        n_mean, n_var = len(spec.mean_idx), len(spec.var_idx)

        def jit(shape):
            return np.exp(rng.normal(0.0, jitter, size=shape))

        params = {"alpha0": np.zeros(n_x)}
        if n_mean:
            params["alpha_raw"] = np.vectorize(inv_softplus)(vals["alpha"] * jit((n_x, n_mean)))
        if spec.vol_form == "const":
            params["beta0_raw"] = np.vectorize(inv_softplus)(vals["beta0"] * jit(n_x))
        else:
            params["beta0"] = vals["beta0"] * jit(n_x)
            params["beta_raw"] = np.vectorize(inv_softplus)(vals["beta"] * jit((n_x, n_var)))
            params["a_raw"] = np.full(n_var, _logit(vals["a"]))
            if spec.vol_form == "sqrt":
                params["c_raw"] = np.full(n_var, inv_softplus(vals["c"] - 0.5))
    x_path, z_path = models.simulate(spec, params, T, seed=seed + 1)
    dates = [start + dt.timedelta(days=k) for k in range(T)]
    symbols = [f"S{i:03d}" for i in range(n_x)]
    panel = ReturnPanel(dates=dates, symbols=symbols, returns=x_path)
    return Fixture(panel=panel, z_path=z_path, spec=spec, params=params)


def _logit(x: float) -> float:
    return float(np.log(x / (1.0 - x)))
