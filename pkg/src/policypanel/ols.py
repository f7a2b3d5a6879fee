"""Design matrices, least squares, and cluster-robust inference."""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from .errors import (
    DimensionMismatch,
    EmptyDesign,
    RankDeficient,
    SingleCluster,
    Underdetermined,
    UnknownColumn,
)
from .panel import PanelDataset, run_pipeline

# |R_jj| below this fraction of ||x_j|| marks column j as dependent on earlier ones
RANK_TOL = 1e-10

INTERCEPT = "intercept"
DEFAULT_STARS = (0.1, 0.05, 0.01)


def _as_date(value) -> dt.date | None:
    if value is None or value == "":
        return None
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class RegressionSpec:
    outcome: str
    regressors: tuple[str, ...]
    covariates: tuple[str, ...] = ()
    month_interactions: bool = False
    intercept: bool = True
    sample_window: tuple[dt.date | None, dt.date | None] = (None, None)
    cluster_by: str = "state"
    transforms: tuple[Mapping[str, Any], ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "transforms", tuple(self.transforms))
        start, end = (_as_date(v) for v in self.sample_window)
        object.__setattr__(self, "sample_window", (start, end))
        if self.outcome in self.regressors:
            raise ValueError(f"outcome {self.outcome!r} is also listed as a regressor")
        if start is not None and end is not None and start > end:
            raise ValueError(f"empty sample window {start} .. {end}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RegressionSpec":
        window = doc.get("sample_window") or (None, None)
        return cls(
            outcome=doc["outcome"],
            regressors=tuple(doc["regressors"]),
            covariates=tuple(doc.get("covariates", ())),
            month_interactions=bool(doc.get("month_interactions", False)),
            intercept=bool(doc.get("intercept", True)),
            sample_window=tuple(window),
            cluster_by=doc.get("cluster_by", "state"),
            transforms=tuple(doc.get("transforms", ())),
            name=doc.get("name", ""),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "RegressionSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        start, end = self.sample_window
        return {
            "name": self.name,
            "outcome": self.outcome,
            "regressors": list(self.regressors),
            "covariates": list(self.covariates),
            "month_interactions": self.month_interactions,
            "intercept": self.intercept,
            "sample_window": [start and start.isoformat(), end and end.isoformat()],
            "cluster_by": self.cluster_by,
            "transforms": [dict(t) for t in self.transforms],
        }

    def with_window(self, start=None, end=None) -> "RegressionSpec":
        s0, e0 = self.sample_window
        return replace(self, sample_window=(start or s0, end or e0))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    y: np.ndarray
    X: np.ndarray
    row_index: pd.DataFrame          # state, date per row
    cluster_index: np.ndarray        # integer cluster code per row
    column_names: tuple[str, ...]
    column_roles: tuple[str, ...] = ()
    has_intercept: bool = False
    outcome: str = ""

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def column(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise UnknownColumn(f"{name!r} is not a design column") from None

    def subset(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows)
        codes, _ = pd.factorize(self.cluster_index[rows], sort=True)
        return replace(self, y=self.y[rows], X=self.X[rows],
                       row_index=self.row_index.iloc[rows].reset_index(drop=True),
                       cluster_index=codes)


def build_design(panel: PanelDataset, spec: RegressionSpec) -> DesignMatrix:
    """Assemble ``y`` and ``X`` for a spec from an already-transformed panel.

    Rows outside the sample window and rows with any missing term are dropped.
    Columns come out as intercept, regressors in spec order, covariates, then
    covariate-by-month interactions (the first month present is the reference).
    """
    names = [spec.outcome, *spec.regressors, *spec.covariates]
    panel.require(*names)
    if spec.cluster_by not in panel.frame.columns:
        raise UnknownColumn(f"cluster key {spec.cluster_by!r} is not a panel column")
    f = panel.frame
    keep = np.ones(len(f), dtype=bool)
    start, end = spec.sample_window
    if start is not None:
        keep &= (f["date"] >= pd.Timestamp(start)).to_numpy()
    if end is not None:
        keep &= (f["date"] <= pd.Timestamp(end)).to_numpy()
    block = f.loc[keep, names].astype(float)
    complete = block.notna().all(axis=1).to_numpy()
    rows = f.loc[keep].loc[complete]
    block = block.loc[complete]
    if len(rows) == 0:
        raise EmptyDesign("no complete rows inside the sample window "
                          f"{start or 'start'} .. {end or 'end'}")

    cols: list[np.ndarray] = []
    col_names: list[str] = []
    roles: list[str] = []
    if spec.intercept:
        cols.append(np.ones(len(rows)))
        col_names.append(INTERCEPT)
        roles.append("intercept")
    for name in [*spec.regressors, *spec.covariates]:
        cols.append(block[name].to_numpy())
        col_names.append(name)
        roles.append(panel.roles[name])
    if spec.month_interactions and spec.covariates:
        months = rows["date"].dt.to_period("M")
        present = sorted(months.unique())
        for cov in spec.covariates:
            for m in present[1:]:
                cols.append(block[cov].to_numpy() * (months == m).to_numpy())
                col_names.append(f"{cov}_x_{m}")
                roles.append("covariate")
    X = np.column_stack(cols) if cols else np.empty((len(rows), 0))
    codes, _ = pd.factorize(rows[spec.cluster_by], sort=True)
    return DesignMatrix(
        y=block[spec.outcome].to_numpy(),
        X=X,
        row_index=rows[["state", "date"]].reset_index(drop=True),
        cluster_index=codes,
        column_names=tuple(col_names),
        column_roles=tuple(roles),
        has_intercept=spec.intercept,
        outcome=spec.outcome,
    )


def design_from_spec(panel: PanelDataset, spec: RegressionSpec, edits=()) -> tuple[PanelDataset, DesignMatrix]:
    """Run the spec's transforms on a raw panel, then build its design."""
    derived = run_pipeline(panel, spec.transforms, edits)
    return derived, build_design(derived, spec)


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    resid: np.ndarray
    cov: np.ndarray
    hat: np.ndarray
    xtx_inv: np.ndarray
    r2: float
    adj_r2: float
    n_obs: int
    column_names: tuple[str, ...]
    column_roles: tuple[str, ...] = ()
    n_clusters: int = 0

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise UnknownColumn(f"{name!r} is not a fitted coefficient") from None

    def coef(self, name: str) -> float:
        return float(self.beta[self.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.se[self.index(name)])

    def params(self) -> pd.DataFrame:
        return pd.DataFrame({"name": self.column_names, "coef": self.beta, "se": self.se})


def fit_ols(design: DesignMatrix) -> FitResult:
    """Least squares via Householder QR, with hat values and clustered covariance.

    The covariance is left as NaN when the design has a single cluster.
    """
    X, y = design.X, design.y
    n, k = X.shape
    if k == 0:
        raise Underdetermined("design has no columns")
    if n < k:
        raise Underdetermined(f"{n} observations for {k} coefficients")
    Q, R = np.linalg.qr(X, mode="reduced")
    norms = np.linalg.norm(X, axis=0)
    diag = np.abs(np.diag(R))
    dependent = (norms == 0) | (diag <= RANK_TOL * norms)
    if dependent.any():
        raise RankDeficient(design.column_names[int(np.argmax(dependent))])
    beta = solve_triangular(R, Q.T @ y)
    r_inv = solve_triangular(R, np.eye(k))
    xtx_inv = r_inv @ r_inv.T
    hat = np.einsum("ij,ij->i", Q, Q)
    resid = y - X @ beta
    ssr = float(resid @ resid)
    if design.has_intercept:
        tss = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - ssr / tss if tss > 0 else 1.0
        adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if n > k else math.nan
    else:
        tss = float(y @ y)
        r2 = 1.0 - ssr / tss if tss > 0 else 1.0
        adj = 1.0 - (1.0 - r2) * n / (n - k) if n > k else math.nan
    n_clusters = int(len(np.unique(design.cluster_index)))
    fit = FitResult(beta=beta, resid=resid, cov=np.full((k, k), np.nan), hat=hat,
                    xtx_inv=xtx_inv, r2=r2, adj_r2=adj, n_obs=n,
                    column_names=design.column_names, column_roles=design.column_roles,
                    n_clusters=n_clusters)
    if n_clusters >= 2 and n > k:
        fit = replace(fit, cov=cluster_cov(fit, design))
    return fit


def cluster_cov(fit: FitResult, design: DesignMatrix) -> np.ndarray:
    """Cluster-robust sandwich with G/(G-1) * (n-1)/(n-K) small-sample scaling."""
    codes = np.asarray(design.cluster_index)
    if codes.size == 0:
        raise SingleCluster("no cluster labels")
    labels, codes = np.unique(codes, return_inverse=True)
    g = len(labels)
    if g < 2:
        raise SingleCluster("cluster-robust covariance needs at least two clusters")
    n, k = design.X.shape
    scores = design.X * fit.resid[:, None]
    sums = np.zeros((g, k))
    np.add.at(sums, codes, scores)
    meat = sums.T @ sums
    scale = g / (g - 1) * (n - 1) / (n - k)
    cov = scale * fit.xtx_inv @ meat @ fit.xtx_inv
    return (cov + cov.T) / 2


@dataclass(frozen=True)
class ComboTest:
    weights: np.ndarray
    estimate: float
    std_error: float

    @property
    def p_value(self) -> float:
        return normal_p_value(self.estimate, self.std_error)


def policy_weights(fit: FitResult) -> np.ndarray:
    return np.array([1.0 if r == "policy" else 0.0 for r in fit.column_roles])


def linear_combo_test(fit: FitResult, weights: Sequence[float] | None = None) -> ComboTest:
    """Estimate and SE of ``weights @ beta``; defaults to the sum of policy coefficients."""
    w = policy_weights(fit) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != fit.beta.shape:
        raise DimensionMismatch(f"weights have length {w.size}, expected {fit.beta.size}")
    est = float(w @ fit.beta)
    if not w.any():
        return ComboTest(w, 0.0, 0.0)
    var = float(w @ fit.cov @ w)
    return ComboTest(w, est, math.sqrt(max(var, 0.0)))


def normal_p_value(estimate: float, std_error: float) -> float:
    if std_error == 0 or not np.isfinite(std_error):
        return 1.0 if estimate == 0 else 0.0
    return math.erfc(abs(estimate / std_error) / math.sqrt(2.0))


def stars_for(p: float, thresholds: Sequence[float] = DEFAULT_STARS) -> str:
    return "*" * sum(p < t for t in thresholds)


@dataclass
class Report:
    rows: pd.DataFrame
    footer: dict[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        foot = pd.DataFrame([
            {"name": "sum_policy", "coef": self.footer["combo_estimate"],
             "se": self.footer["combo_se"], "p_value": self.footer["combo_p"],
             "stars": self.footer["combo_stars"]},
            {"name": "n_obs", "coef": self.footer["n_obs"]},
            {"name": "r2", "coef": self.footer["r2"]},
            {"name": "adj_r2", "coef": self.footer["adj_r2"]},
        ])
        return pd.concat([self.rows, foot], ignore_index=True)

    def to_text(self, title: str = "") -> str:
        width = max([len(n) for n in self.rows["name"]] + [len("Sum of policy coefficients")])
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'':<{width}}  {'coef':>10}  {'(se)':>9}")
        lines.append("-" * (width + 24))
        for r in self.rows.itertuples():
            lines.append(f"{r.name:<{width}}  {r.coef:>7.3f}{r.stars:<3}  ({r.se:.3f})")
        lines.append("-" * (width + 24))
        f = self.footer
        lines.append(f"{'Sum of policy coefficients':<{width}}  {f['combo_estimate']:>7.3f}"
                     f"{f['combo_stars']:<3}  ({f['combo_se']:.3f})")
        lines.append(f"{'Observations':<{width}}  {f['n_obs']:>7,d}")
        lines.append(f"{'R2':<{width}}  {f['r2']:>7.3f}")
        lines.append(f"{'Adjusted R2':<{width}}  {f['adj_r2']:>7.3f}")
        lines.append("* p<%s; ** p<%s; *** p<%s" % tuple(f["thresholds"]))
        return "\n".join(lines) + "\n"


def summarize(fit: FitResult, stars: Sequence[float] = DEFAULT_STARS,
              combo: ComboTest | None = None) -> Report:
    se = fit.se
    p = [normal_p_value(b, s) for b, s in zip(fit.beta, se)]
    rows = pd.DataFrame({
        "name": fit.column_names,
        "coef": fit.beta,
        "se": se,
        "p_value": p,
        "stars": [stars_for(v, stars) for v in p],
    })
    combo = combo or linear_combo_test(fit)
    footer = {
        "combo_estimate": combo.estimate,
        "combo_se": combo.std_error,
        "combo_p": combo.p_value,
        "combo_stars": stars_for(combo.p_value, stars),
        "n_obs": fit.n_obs,
        "r2": fit.r2,
        "adj_r2": fit.adj_r2,
        "thresholds": tuple(stars),
    }
    return Report(rows, footer)
