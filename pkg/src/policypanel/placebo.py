"""Permutation placebo: reassign whole state mask histories and re-estimate.

Replicate ``r`` draws its permutation from ``SeedSequence([seed, r])`` and
nothing else, so serial and parallel runs produce bit-identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import AllReplicatesFailed, EstimationError, UnknownColumn
from .ols import RegressionSpec, design_from_spec, fit_ols
from .panel import EMPLOYEES_ONLY, PUBLIC, PanelDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlaceboConfig:
    spec: RegressionSpec
    n_reps: int = 500
    seed: int = 0
    permuted_columns: tuple[str, ...] = (EMPLOYEES_ONLY, PUBLIC)
    coefficients: tuple[str, ...] = ()   # empty: every regressor descended from a permuted column

    def __post_init__(self):
        object.__setattr__(self, "permuted_columns", tuple(self.permuted_columns))
        object.__setattr__(self, "coefficients", tuple(self.coefficients))
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if not self.permuted_columns:
            raise ValueError("permuted_columns must be nonempty")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class PlaceboResult:
    estimates: pd.DataFrame                # one row per replicate, one column per coefficient
    failed: np.ndarray                     # bool per replicate
    permutations: list[tuple[str, ...]]    # donor state for each recipient, in panel state order
    seed: int
    base_estimates: dict[str, float] = field(default_factory=dict)

    @property
    def n_reps(self) -> int:
        return len(self.estimates)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def summary(self) -> pd.DataFrame:
        return summarize_placebo(self)


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def permute_masks(panel: PanelDataset, columns: Sequence[str],
                  permutation: Mapping[str, str] | Sequence[int]) -> PanelDataset:
    """Give each state the full date-indexed series of its donor state.

    ``permutation`` maps recipient -> donor, or is an index array where state
    ``states[i]`` receives the series of ``states[permutation[i]]``. All listed
    columns move together. Dates the donor lacks become missing.
    """
    panel.require(*columns)
    states = panel.states
    if isinstance(permutation, Mapping):
        donor_of = dict(permutation)
    else:
        perm = np.asarray(permutation)
        if sorted(perm.tolist()) != list(range(len(states))):
            raise ValueError("permutation is not a bijection on states")
        donor_of = {s: states[i] for s, i in zip(states, perm)}
    if sorted(donor_of.values()) != sorted(donor_of.keys()) or set(donor_of) != set(states):
        raise ValueError("permutation is not a bijection on states")
    f = panel.frame
    src = f[["state", "date", *columns]].rename(columns={"state": "_donor"})
    keys = pd.DataFrame({"_donor": f["state"].map(donor_of).to_numpy(), "date": f["date"].to_numpy()})
    moved = keys.merge(src, on=["_donor", "date"], how="left", sort=False)
    frame = f.copy()
    for c in columns:
        frame[c] = moved[c].to_numpy()
    return PanelDataset(frame, dict(panel.roles), dict(panel.lineage))


def _targets(panel: PanelDataset, config: PlaceboConfig) -> tuple[str, ...]:
    derived, design = design_from_spec(panel, config.spec)
    if config.coefficients:
        missing = [c for c in config.coefficients if c not in design.column_names]
        if missing:
            raise UnknownColumn(f"placebo coefficients are not regressors: {missing}")
        return config.coefficients
    found = tuple(c for c in config.spec.regressors
                  if derived.depends_on(c, config.permuted_columns))
    if not found:
        raise UnknownColumn("no regressor descends from the permuted columns "
                            f"{list(config.permuted_columns)}")
    return found


def _one(panel: PanelDataset, config: PlaceboConfig, targets, rep: int):
    perm = replicate_rng(config.seed, rep).permutation(len(panel.states))
    cols = config.permuted_columns
    edit = (cols, lambda p: permute_masks(p, cols, perm))
    try:
        _, design = design_from_spec(panel, config.spec, [edit])
        fit = fit_ols(design)
        values = [fit.coef(t) for t in targets]
        ok = True
    except EstimationError as exc:
        logger.debug("replicate %d failed: %s", rep, exc)
        values, ok = [np.nan] * len(targets), False
    donors = tuple(panel.states[i] for i in perm)
    return rep, values, ok, donors


def _chunk(args):
    panel, config, targets, reps = args
    return [_one(panel, config, targets, r) for r in reps]


def run_placebo(panel: PanelDataset, config: PlaceboConfig, n_jobs: int = 1) -> PlaceboResult:
    """Re-estimate the spec on ``n_reps`` permuted panels.

    ``panel`` is the raw panel; the spec's transforms are re-derived on every
    permuted copy. Rank-deficient replicates are marked failed.
    """
    targets = _targets(panel, config)
    _, base_design = design_from_spec(panel, config.spec)
    base_fit = fit_ols(base_design)
    base = {t: base_fit.coef(t) for t in targets}

    reps = list(range(config.n_reps))
    if n_jobs == 1:
        out = _chunk((panel, config, targets, reps))
    else:
        chunks = [reps[i::n_jobs] for i in range(n_jobs)]
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            out = [r for part in ex.map(_chunk, [(panel, config, targets, c) for c in chunks if c])
                   for r in part]
    out.sort(key=lambda r: r[0])
    estimates = pd.DataFrame([r[1] for r in out], columns=list(targets))
    estimates.index.name = "rep"
    failed = np.array([not r[2] for r in out])
    if failed.all():
        raise AllReplicatesFailed(f"all {config.n_reps} placebo replicates failed to fit")
    return PlaceboResult(estimates=estimates, failed=failed,
                         permutations=[r[3] for r in out], seed=config.seed,
                         base_estimates=base)


def summarize_placebo(result: PlaceboResult) -> pd.DataFrame:
    """Box-plot summary per coefficient (type-7 linear-interpolation quantiles).

    Coefficients with no successful replicate are omitted; the frame's
    ``attrs["n_failed"]`` carries the failure count.
    """
    rows = []
    for col in result.estimates.columns:
        v = result.estimates[col].to_numpy(dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            continue
        q = np.quantile(v, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0], method="linear")
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append({
            "coefficient": col, "n_ok": int(v.size), "n_failed": result.n_reps - int(v.size),
            "min": q[0], "p05": q[1], "q1": q[2], "median": q[3], "q3": q[4], "p95": q[5],
            "max": q[6], "mean": float(v.mean()), "sd": sd, "mc_se": sd / np.sqrt(v.size),
        })
    frame = pd.DataFrame(rows)
    frame.attrs["n_failed"] = result.n_failed
    return frame
