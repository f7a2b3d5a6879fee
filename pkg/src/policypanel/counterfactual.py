"""Dynamic counterfactuals: regression-implied and SIR-implied.

The regression counterfactual iterates the fitted growth equation forward
from the policy-change date. Lagged own-state growth and log weekly cases
(and, optionally, their national counterparts) are fed back from the
simulated path. Everything else keeps its factual value except the
descendants of the changed policy, which are re-derived from the edited
raw series. Each row keeps its factual residual, so an unchanged policy
reproduces the factual path bit for bit.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .epi import EpidemicPath, SirConfig, simulate_batch
from .errors import NonconvergentPath, UnknownColumn
from .ols import FitResult, RegressionSpec, build_design
from .panel import PanelDataset, run_pipeline

# exp() overflows just above 709
MAX_LOG_RATIO = 700.0
DRAW_CHUNK = 250


@dataclass(frozen=True)
class PolicyChange:
    column: str
    value: float
    from_date: dt.date
    states: tuple[str, ...] = ()     # empty: every state

    def apply(self, panel: PanelDataset) -> PanelDataset:
        f = panel.frame
        mask = (f["date"] >= pd.Timestamp(self.from_date)).to_numpy()
        if self.states:
            mask &= f["state"].isin(self.states).to_numpy()
        values = f[self.column].to_numpy(dtype=float).copy()
        values[mask] = self.value
        return panel.with_values(self.column, values)


@dataclass
class CounterfactualResult:
    dates: pd.DatetimeIndex
    factual: np.ndarray              # summed cumulative cases of the reported states
    counterfactual: np.ndarray
    relative: np.ndarray             # counterfactual / factual - 1
    lower: np.ndarray
    upper: np.ndarray
    level: float
    n_draws: int
    states: tuple[str, ...] = ()
    per_state: pd.DataFrame = field(default_factory=pd.DataFrame)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"date": self.dates, "factual": self.factual,
                             "counterfactual": self.counterfactual, "relative": self.relative,
                             "lower": self.lower, "upper": self.upper})

    def to_json(self) -> str:
        return json.dumps({
            "level": self.level,
            "n_draws": self.n_draws,
            "states": list(self.states),
            "series": [
                {"date": d.strftime("%Y-%m-%d"), "factual": f, "counterfactual": c,
                 "relative": r, "lower": lo, "upper": hi}
                for d, f, c, r, lo, hi in zip(self.dates, self.factual.tolist(),
                                              self.counterfactual.tolist(), self.relative.tolist(),
                                              self.lower.tolist(), self.upper.tolist())
            ],
        }, indent=2)


# -- feedback structure ---------------------------------------------------

@dataclass(frozen=True)
class _Outcome:
    growth: str
    logdiff: str
    diff: str
    count: str
    window: int
    floor: float


def _outcome_chain(panel: PanelDataset, outcome: str) -> _Outcome:
    g = panel.lineage.get(outcome)
    if g is None or g.op != "growth":
        raise ValueError(f"outcome {outcome!r} is not a weekly log growth column")
    logdiff = g.sources[0]
    ld = panel.lineage[logdiff]
    diff = ld.sources[0]
    d = panel.lineage[diff]
    return _Outcome(outcome, logdiff, diff, d.sources[0], int(g.param("window")),
                    float(ld.param("floor")))


def _unlag(panel: PanelDataset, column: str) -> tuple[str, int]:
    k = 0
    d = panel.lineage.get(column)
    while d is not None and d.op == "lag":
        k += int(d.param("k"))
        column = d.sources[0]
        d = panel.lineage.get(column)
    return column, k


def _is_national(panel: PanelDataset, column: str) -> bool:
    stack = [column]
    while stack:
        c = stack.pop()
        d = panel.lineage.get(c)
        if d is None:
            continue
        if d.op == "national":
            return True
        stack.extend(d.sources)
    return False


def _classify(panel: PanelDataset, names: Sequence[str], own: _Outcome):
    """Map design columns to feedback kinds: ('growth'|'logdiff'|'nat_growth'|'nat_logdiff', k)."""
    kinds: dict[int, tuple[str, int]] = {}
    national: _Outcome | None = None
    own_roots = panel.roots(own.count)
    for j, name in enumerate(names):
        if name not in panel.lineage:
            continue
        base, k = _unlag(panel, name)
        kind = None
        if base == own.growth:
            kind = "growth"
        elif base == own.logdiff:
            kind = "logdiff"
        else:
            d = panel.lineage.get(base)
            if d is not None and d.op in ("growth", "logdiff") and _is_national(panel, base) \
                    and panel.roots(base) & own_roots:
                chain = _outcome_chain(panel, base) if d.op == "growth" else None
                if chain is None:
                    diff = panel.lineage[base].sources[0]
                    dd = panel.lineage[diff]
                    chain = _Outcome(base.replace("_logdiff", "_growth"), base, diff,
                                     dd.sources[0], int(dd.param("window")), float(d.param("floor")))
                national = national or chain
                kind = "nat_growth" if d.op == "growth" else "nat_logdiff"
            elif panel.depends_on(name, [own.count]) and not _is_national(panel, name):
                raise ValueError(f"regressor {name!r} depends on the outcome in a way the "
                                 "counterfactual iteration cannot feed back")
        if kind is not None:
            if k < 1:
                raise ValueError(f"regressor {name!r} is a contemporaneous outcome term")
            kinds[j] = (kind, k)
    return kinds, national


def _grid(panel: PanelDataset, states, dates):
    s_idx = pd.Index(states).get_indexer(panel.frame["state"])
    t_idx = dates.get_indexer(panel.frame["date"])

    def fill(column: str) -> np.ndarray:
        out = np.full((len(states), len(dates)), np.nan)
        out[s_idx, t_idx] = panel.frame[column].to_numpy(dtype=float)
        return out

    return fill


# -- regression counterfactual --------------------------------------------

def regression_counterfactual(fit: FitResult, panel: PanelDataset, spec: RegressionSpec,
                              change: PolicyChange, draws: int = 1000, level: float = 0.90,
                              seed: int = 0, national_feedback: bool | None = None,
                              report_states: Sequence[str] | None = None) -> CounterfactualResult:
    """Iterate the fitted growth equation under ``change`` and compare to the factual path.

    ``panel`` is the raw panel ``fit`` was estimated from via ``spec``. The
    interval comes from ``draws`` coefficient vectors drawn from N(beta, cov),
    each iterated the same way; the band is the central ``level`` quantile
    range, widened where needed so it contains the point path.

    ``national_feedback`` recomputes national terms from the simulated
    states (default: on when the change covers every state, otherwise the
    national terms stay factual).
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    factual = run_pipeline(panel, spec.transforms)
    edited = run_pipeline(panel, spec.transforms, [((change.column,), change.apply)])
    if change.column not in edited.roles:
        raise UnknownColumn(f"unknown column {change.column!r}")
    design_f = build_design(factual, spec)
    design_c = build_design(edited, spec)
    if design_f.column_names != fit.column_names:
        raise ValueError("fit was not estimated with this spec")
    if not design_f.row_index.equals(design_c.row_index):
        raise ValueError("the change altered which rows are complete")

    own = _outcome_chain(factual, spec.outcome)
    kinds, nat = _classify(factual, design_f.column_names, own)
    if national_feedback is None:
        national_feedback = not change.states

    states = factual.states
    dates = factual.dates
    fill = _grid(factual, states, dates)
    w = own.window
    logdiff_f = fill(own.logdiff)
    diff_f = fill(own.diff)
    count_f = fill(own.count)
    nat_logdiff_f = fill(nat.logdiff)[0] if nat else None
    nat_diff_f = fill(nat.diff)[0] if nat else None

    s_of = pd.Index(states).get_indexer(design_f.row_index["state"])
    t_of = dates.get_indexer(design_f.row_index["date"])
    dx_exog = design_c.X - design_f.X
    endo = np.array(sorted(kinds), dtype=int)
    dx_exog[:, endo] = 0.0
    start = int(dates.searchsorted(pd.Timestamp(change.from_date)))
    rows_by_t: dict[int, np.ndarray] = {}
    for r in np.flatnonzero(t_of >= start):
        rows_by_t.setdefault(int(t_of[r]), []).append(r)
    rows_by_t = {t: np.asarray(r) for t, r in rows_by_t.items()}
    last = int(t_of.max())

    def iterate(betas: np.ndarray) -> np.ndarray:
        b = betas.shape[0]
        S, T = len(states), len(dates)
        dgrowth = np.zeros((b, S, T))
        dlog = np.zeros((b, S, T))
        ddiff = np.zeros((b, S, T))
        dcum = np.zeros((b, S, T))
        ndlog = np.zeros((b, T))
        for t in range(start, last + 1):
            rows = rows_by_t.get(t)
            if rows is not None:
                s = s_of[rows]
                dx = np.broadcast_to(dx_exog[rows], (b, len(rows), dx_exog.shape[1])).copy()
                for j, (kind, k) in kinds.items():
                    if t - k < 0:
                        continue
                    if kind == "growth":
                        dx[:, :, j] = dgrowth[:, s, t - k]
                    elif kind == "logdiff":
                        dx[:, :, j] = dlog[:, s, t - k]
                    elif kind == "nat_logdiff":
                        dx[:, :, j] = ndlog[:, t - k][:, None]
                    else:
                        prev = ndlog[:, t - k - w] if t - k - w >= 0 else 0.0
                        dx[:, :, j] = (ndlog[:, t - k] - prev)[:, None]
                dgrowth[:, s, t] = np.einsum("brk,bk->br", dx, betas)
            if t - w >= 0:
                dlog[:, :, t] = dlog[:, :, t - w] + dgrowth[:, :, t]
            else:
                dlog[:, :, t] = dgrowth[:, :, t]
            if np.any(dlog[:, :, t] > MAX_LOG_RATIO) or not np.all(np.isfinite(dlog[:, :, t])):
                raise NonconvergentPath(f"counterfactual path diverges at {dates[t]:%Y-%m-%d}")
            base = np.nan_to_num(diff_f[:, t])
            ddiff[:, :, t] = base * np.expm1(dlog[:, :, t])
            dcum[:, :, t] = (dcum[:, :, t - w] if t - w >= 0 else 0.0) + ddiff[:, :, t]
            if nat is not None and national_feedback:
                total = ddiff[:, :, t].sum(axis=1)
                nd = nat_diff_f[t]
                with np.errstate(invalid="ignore", divide="ignore"):
                    moved = np.log(np.maximum(nd + total, own.floor)) - nat_logdiff_f[t]
                ndlog[:, t] = np.where(total == 0, 0.0, np.nan_to_num(moved))
        return dcum

    report = tuple(report_states) if report_states else (change.states or states)
    s_rep = pd.Index(states).get_indexer(list(report))
    if (s_rep < 0).any():
        raise UnknownColumn(f"unknown report states {list(report)}")
    fact_total = np.nansum(count_f[s_rep], axis=0)
    valid = np.all(np.isfinite(count_f[s_rep]), axis=0) & (np.arange(len(dates)) <= last)

    def relative(dcum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cf_total = fact_total + dcum[:, s_rep].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = np.where(fact_total > 0, cf_total / fact_total - 1.0, 0.0)
        return cf_total, rel

    point_dcum = iterate(fit.beta[None, :])
    cf_point, rel_point = relative(point_dcum)
    cf_point, rel_point = cf_point[0], rel_point[0]

    rels = []
    if draws > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
        cov = np.nan_to_num(fit.cov)
        betas = rng.multivariate_normal(fit.beta, cov, size=draws, method="eigh")
        for i in range(0, draws, DRAW_CHUNK):
            rels.append(relative(iterate(betas[i:i + DRAW_CHUNK]))[1])
        rels = np.concatenate(rels)
        alpha = (1.0 - level) / 2.0
        lower, upper = np.quantile(rels, [alpha, 1.0 - alpha], axis=0, method="linear")
        lower = np.minimum(lower, rel_point)
        upper = np.maximum(upper, rel_point)
    else:
        lower = upper = rel_point.copy()

    per_state = pd.DataFrame(
        np.where(count_f > 0, point_dcum[0] / np.where(count_f > 0, count_f, 1.0), 0.0).T,
        index=dates, columns=list(states))
    return CounterfactualResult(
        dates=dates[valid], factual=fact_total[valid], counterfactual=cf_point[valid],
        relative=rel_point[valid], lower=lower[valid], upper=upper[valid], level=level,
        n_draws=draws, states=tuple(report), per_state=per_state.loc[dates[valid]],
    )


# -- SIR counterfactual ----------------------------------------------------

@dataclass
class SirCounterfactual:
    days: np.ndarray
    per_member: np.ndarray     # (members, days) relative effect on cumulative cases
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    aggregate: np.ndarray      # relative effect on cohort-summed cumulative cases
    level: float
    removal: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"day": self.days, "median": self.median, "lower": self.lower,
                             "upper": self.upper, "aggregate": self.aggregate})


def sir_counterfactual(config: SirConfig, paths: Sequence[EpidemicPath], removal: int,
                       removal_day: int = 0, level: float = 0.90) -> SirCounterfactual:
    """Re-simulate each cohort member with policy ``removal`` switched off from ``removal_day``."""
    if not 0 <= removal < config.n_policies:
        raise ValueError(f"removal index {removal} out of range")
    if not paths:
        raise ValueError("no cohort paths")
    onsets = np.array([p.onsets for p in paths], dtype=np.int64)
    offsets = np.full_like(onsets, np.iinfo(np.int64).max)
    offsets[:, removal] = removal_day
    # offsets earlier than an onset simply mean the policy never starts
    _, _, _, new_f = simulate_batch(config, onsets)
    _, _, _, new_c = simulate_batch(config, onsets, offsets)
    cum_f = np.cumsum(new_f, axis=1)
    cum_c = np.cumsum(new_c, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(cum_f > 0, cum_c / cum_f - 1.0, 0.0)
        agg = np.where(cum_f.sum(0) > 0, cum_c.sum(0) / cum_f.sum(0) - 1.0, 0.0)
    alpha = (1.0 - level) / 2.0
    lower, median, upper = np.quantile(rel, [alpha, 0.5, 1.0 - alpha], axis=0, method="linear")
    return SirCounterfactual(np.arange(rel.shape[1]), rel, median, lower, upper, agg, level, removal)
