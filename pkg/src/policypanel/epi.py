"""Discrete-time SIR epidemics with step-function policy interventions.

Each policy lowers the effective reproduction number additively once it
starts. Compartment dynamics are deterministic; the only randomness is the
policy onset days, drawn uniformly on an integer range.

The daily infection flow is ``S * (1 - exp(-beta_t * I / N))``. To first
order this is the familiar ``beta_t * S * I / N``, but it keeps S positive
and makes the no-policy attack rate satisfy ``z = 1 - exp(-R0 z)`` exactly
in the limit of a small seed, where forward-Euler stepping at daily
resolution overshoots by about 1%.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import HorizonMismatch, InsufficientSurvivors, InvalidConfig
from .ols import RegressionSpec, design_from_spec, fit_ols
from .panel import PanelDataset

DEFAULT_POLICIES = ("masks", "school_closure", "stay_at_home", "business_closure")
DEFAULT_START = dt.date(2020, 3, 1)
CASES, TESTS = "cases", "tests"


@dataclass(frozen=True)
class SirConfig:
    population: float = 1_000_000
    r0: float = 2.5
    infectious_period: float = 7.0
    policy_effects: tuple[float, ...] = (0.525, 0.525, 0.525, 0.525)
    policy_onset_range: tuple[int, int] = (10, 60)
    horizon: int = 120
    initial_infected: float = 10.0
    reporting: float = 1.0
    policy_names: tuple[str, ...] = DEFAULT_POLICIES

    def __post_init__(self):
        object.__setattr__(self, "policy_effects", tuple(float(e) for e in self.policy_effects))
        object.__setattr__(self, "policy_onset_range", tuple(int(d) for d in self.policy_onset_range))
        object.__setattr__(self, "policy_names", tuple(self.policy_names))
        if not self.population > 0:
            raise InvalidConfig("population must be positive")
        if not self.r0 > 0:
            raise InvalidConfig("r0 must be positive")
        if not self.infectious_period > 0:
            raise InvalidConfig("infectious_period must be positive")
        if any(e < 0 for e in self.policy_effects):
            raise InvalidConfig("policy effects must be non-negative")
        if len(self.policy_names) != len(self.policy_effects):
            raise InvalidConfig("policy_names and policy_effects must have the same length")
        lo, hi = self.policy_onset_range
        if lo < 0 or hi < lo:
            raise InvalidConfig(f"bad onset range {self.policy_onset_range}")
        if self.horizon < 1:
            raise InvalidConfig("horizon must be >= 1")
        if not 0 <= self.initial_infected <= self.population:
            raise InvalidConfig("initial_infected must lie in [0, population]")
        if not 0 < self.reporting <= 1:
            raise InvalidConfig("reporting must lie in (0, 1]")

    @property
    def gamma(self) -> float:
        return 1.0 / self.infectious_period

    @property
    def n_policies(self) -> int:
        return len(self.policy_effects)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SirConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def from_json(cls, path: str | Path) -> "SirConfig":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc.get("sir", doc))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class CohortSpec:
    n_generate: int = 1500
    n_select: int = 50
    attack_band: tuple[float, float] = (0.005, 0.10)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "attack_band", tuple(float(b) for b in self.attack_band))
        if not 1 <= self.n_select <= self.n_generate:
            raise InvalidConfig("need 1 <= n_select <= n_generate")
        lo, hi = self.attack_band
        if not 0 <= lo <= hi <= 1:
            raise InvalidConfig(f"bad attack band {self.attack_band}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CohortSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass(frozen=True, eq=False)
class EpidemicPath:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    new_cases: np.ndarray       # day 0 holds the reported seed infections
    onsets: tuple[int, ...]
    population: float
    policy_names: tuple[str, ...] = DEFAULT_POLICIES
    ident: int = 0

    @property
    def horizon(self) -> int:
        return len(self.S) - 1

    @property
    def days(self) -> np.ndarray:
        return np.arange(len(self.S))

    @property
    def attack_rate(self) -> float:
        return float((self.population - self.S[-1]) / self.population)

    @property
    def cumulative_cases(self) -> np.ndarray:
        return np.cumsum(self.new_cases)

    def policy_matrix(self) -> np.ndarray:
        """(days, policies) 0/1 indicators, 1 from each onset day on."""
        return (self.days[:, None] >= np.asarray(self.onsets)[None, :]).astype(float)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"path": self.ident, "day": self.days, "S": self.S, "I": self.I,
                              "R": self.R, "new_cases": self.new_cases})
        for name, col in zip(self.policy_names, self.policy_matrix().T):
            frame[name] = col.astype(int)
        return frame


def draw_onsets(config: SirConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.policy_onset_range
    return rng.integers(lo, hi + 1, size=config.n_policies)


def unit_rng(seed: int, *index: int) -> np.random.Generator:
    """Generator that depends only on ``seed`` and the unit index."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def simulate_batch(config: SirConfig, onsets: np.ndarray, offsets: np.ndarray | None = None,
                   effects: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
    """Vectorised simulation of B epidemics sharing a config.

    ``onsets``/``offsets`` are (B, P) day arrays; policy p is active on day t
    when ``onset <= t < offset``. Returns S, I, R, new_cases each (B, H+1).
    """
    onsets = np.atleast_2d(np.asarray(onsets))
    b, p = onsets.shape
    if p != config.n_policies:
        raise InvalidConfig(f"expected {config.n_policies} onsets per path, got {p}")
    offsets = np.full_like(onsets, np.iinfo(np.int64).max) if offsets is None else np.atleast_2d(offsets)
    eff = np.broadcast_to(np.asarray(config.policy_effects if effects is None else effects, float), (b, p))
    n, h, gamma = float(config.population), config.horizon, config.gamma
    S = np.empty((b, h + 1))
    I = np.empty((b, h + 1))
    R = np.empty((b, h + 1))
    new = np.empty((b, h + 1))
    S[:, 0] = n - config.initial_infected
    I[:, 0] = config.initial_infected
    R[:, 0] = 0.0
    new[:, 0] = config.initial_infected * config.reporting
    for t in range(h):
        active = (t >= onsets) & (t < offsets)
        re = np.maximum(config.r0 - (eff * active).sum(axis=1), 0.0)
        beta = re * gamma
        infections = S[:, t] * -np.expm1(-beta * I[:, t] / n)
        recoveries = gamma * I[:, t]
        S[:, t + 1] = S[:, t] - infections
        I[:, t + 1] = I[:, t] + infections - recoveries
        R[:, t + 1] = R[:, t] + recoveries
        new[:, t + 1] = infections * config.reporting
    return S, I, R, new


def _paths(config: SirConfig, onsets: np.ndarray, arrays, idents) -> list[EpidemicPath]:
    S, I, R, new = arrays
    return [EpidemicPath(S[i], I[i], R[i], new[i], tuple(int(d) for d in onsets[i]),
                         float(config.population), config.policy_names, int(idents[i]))
            for i in range(len(onsets))]


def simulate_sir(config: SirConfig, seed: int | None = None,
                 onsets: Sequence[int] | None = None) -> EpidemicPath:
    """One epidemic; onsets are drawn from ``seed`` unless given explicitly."""
    if onsets is None:
        onsets = draw_onsets(config, np.random.default_rng(seed))
    onsets = np.asarray(onsets, dtype=np.int64)[None, :]
    return _paths(config, onsets, simulate_batch(config, onsets), [0])[0]


def generate_cohort(config: SirConfig, cohort: CohortSpec = CohortSpec()) -> list[EpidemicPath]:
    """Simulate ``n_generate`` epidemics, keep those inside the attack band, sample ``n_select``.

    Epidemic i draws its onsets from ``(seed, 0, i)``; the subsample comes
    from ``(seed, 1)``. Selected paths are returned in generation order.
    """
    onsets = np.stack([draw_onsets(config, unit_rng(cohort.seed, 0, i))
                       for i in range(cohort.n_generate)])
    arrays = simulate_batch(config, onsets)
    S = arrays[0]
    attack = (config.population - S[:, -1]) / config.population
    lo, hi = cohort.attack_band
    survivors = np.flatnonzero((attack >= lo) & (attack <= hi))
    if survivors.size < cohort.n_select:
        raise InsufficientSurvivors(int(survivors.size), cohort.n_select)
    chosen = np.sort(unit_rng(cohort.seed, 1).choice(survivors, cohort.n_select, replace=False))
    return _paths(config, onsets[chosen], tuple(a[chosen] for a in arrays), chosen)


def paths_to_panel(paths: Sequence[EpidemicPath], start_date: dt.date = DEFAULT_START,
                   tests: float = 1_000_000.0) -> PanelDataset:
    """Turn each path into a synthetic state with cumulative cases and policy steps.

    Cumulative tests are held constant, so weekly test growth is zero.
    """
    if not paths:
        raise ValueError("no paths")
    horizon = paths[0].horizon
    bad = [p.ident for p in paths if p.horizon != horizon]
    if bad:
        raise HorizonMismatch(f"paths {bad} do not share horizon {horizon}")
    dates = pd.date_range(start_date, periods=horizon + 1, freq="D")
    width = max(4, len(str(len(paths) - 1)))
    frames = []
    for k, p in enumerate(paths):
        f = pd.DataFrame({"state": f"sim{k:0{width}d}", "date": dates,
                          CASES: p.cumulative_cases, TESTS: tests})
        for name, col in zip(p.policy_names, p.policy_matrix().T):
            f[name] = col
        frames.append(f)
    frame = pd.concat(frames, ignore_index=True)
    roles = {CASES: "count", TESTS: "test_count", **{n: "policy" for n in paths[0].policy_names}}
    return PanelDataset.from_frame(frame, roles)


def recovery_spec(policy_names: Sequence[str] = DEFAULT_POLICIES, lag: int = 11,
                  smooth: bool = True) -> RegressionSpec:
    """Weekly case-growth regression on lagged policies and lagged case terms."""
    cases = f"{CASES}_ma" if smooth else CASES
    pol = [f"{p}_ma" if smooth else p for p in policy_names]
    steps: list[dict[str, Any]] = []
    if smooth:
        steps.append({"op": "moving_average", "columns": [CASES, *policy_names]})
    steps += [
        {"op": "weekly_log_growth", "column": cases},
        {"op": "lag", "columns": [*pol, f"{cases}_growth", f"{cases}_logdiff"], "k": lag},
    ]
    return RegressionSpec(
        outcome=f"{cases}_growth",
        regressors=(*[f"{p}_lag{lag}" for p in pol], f"{cases}_growth_lag{lag}",
                    f"{cases}_logdiff_lag{lag}"),
        transforms=tuple(steps),
        name=f"recovery_lag{lag}",
    )


def recovery_experiment(panel: PanelDataset, lag: int = 11, spec: RegressionSpec | None = None,
                        policy_names: Sequence[str] = DEFAULT_POLICIES) -> pd.DataFrame:
    """Fit the growth regression on a cohort panel and report the policy coefficients."""
    spec = spec or recovery_spec(policy_names, lag)
    derived, design = design_from_spec(panel, spec)
    fit = fit_ols(design)
    rows = []
    for name in policy_names:
        coef = next(c for c in spec.regressors if derived.depends_on(c, [name]))
        rows.append({"policy": name, "lag": lag, "coefficient": coef,
                     "estimate": fit.coef(coef), "se": fit.std_error(coef)})
    return pd.DataFrame(rows)


def cohort_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint32)[0])


def run_recovery(config: SirConfig, cohort: CohortSpec, lag: int = 11,
                 n_cohorts: int = 1) -> pd.DataFrame:
    """Repeat the recovery experiment over independently seeded cohorts.

    With one cohort the cohort seed is used as is; otherwise cohort r is
    seeded from ``(cohort.seed, r)``.
    """
    if n_cohorts == 1:
        seeds = [cohort.seed]
    else:
        seeds = [cohort_seed(cohort.seed, r) for r in range(n_cohorts)]
    frames = []
    for r, s in enumerate(seeds):
        panel = paths_to_panel(generate_cohort(config, replace(cohort, seed=s)))
        out = recovery_experiment(panel, lag, policy_names=config.policy_names)
        out.insert(0, "cohort", r)
        frames.append(out)
    return pd.concat(frames, ignore_index=True)


def final_size(r0: float, tol: float = 1e-14) -> float:
    """Positive root of z = 1 - exp(-r0 z) by bisection (0 when r0 <= 1)."""
    if r0 <= 1:
        return 0.0
    lo, hi = 1e-12, 1.0
    f = lambda z: z - 1.0 + math.exp(-r0 * z)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
