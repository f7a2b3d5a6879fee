"""State-by-day panels and the transforms that turn them into regression series.

A :class:`PanelDataset` is a long table keyed by ``(state, date)`` with one
column per series. Each data column carries a role (cumulative count, test
count, policy indicator, covariate, or derived) and, for columns produced by a
transform, a :class:`Derivation` recording how it was built. The lineage is
what lets the placebo and counterfactual machinery find every regressor that
descends from a given raw column.

All transforms return new datasets; the frame held by a dataset is never
modified in place.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ColumnRoleError,
    DuplicateCell,
    GapInDates,
    InvalidPolicyValue,
    MissingColumn,
    NonMonotoneCumulative,
    PanelError,
    SeriesTooShort,
    UnknownColumn,
    UnknownState,
)

logger = logging.getLogger(__name__)

ROLES = ("count", "test_count", "policy", "covariate", "derived")
COUNT_ROLES = ("count", "test_count")
KEYS = ("state", "date")

EMPLOYEES_ONLY = "masks_employees_only"
PUBLIC = "masks_public"


@dataclass(frozen=True)
class TransformSpec:
    ma_window: int = 7
    diff_window: int = 7
    lag_days: int = 14
    log_floor: float = 1.0

    def __post_init__(self):
        if self.ma_window < 1 or self.diff_window < 1:
            raise ValueError("ma_window and diff_window must be >= 1")
        if self.lag_days < 0:
            raise ValueError("lag_days must be >= 0")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")


@dataclass(frozen=True)
class Derivation:
    """How a derived column was produced from its source column(s)."""

    op: str
    sources: tuple[str, ...]
    params: tuple[tuple[str, Any], ...] = ()

    def param(self, name: str, default: Any = None) -> Any:
        return dict(self.params).get(name, default)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    frame: pd.DataFrame
    roles: Mapping[str, str]
    lineage: Mapping[str, Derivation] = field(default_factory=dict)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, roles: Mapping[str, str],
                   lineage: Mapping[str, Derivation] | None = None,
                   validate: bool = True) -> "PanelDataset":
        for key in KEYS:
            if key not in frame.columns:
                raise MissingColumn(f"panel is missing required column {key!r}")
        missing = [c for c in roles if c not in frame.columns]
        if missing:
            raise MissingColumn(f"columns named in the schema are absent: {missing}")
        bad = {c: r for c, r in roles.items() if r not in ROLES}
        if bad:
            raise PanelError(f"unknown column roles {bad}; expected one of {ROLES}")
        out = frame.loc[:, list(KEYS) + list(roles)].copy()
        out["state"] = out["state"].astype(str)
        out["date"] = pd.to_datetime(out["date"]).dt.normalize()
        out = out.sort_values(list(KEYS), kind="mergesort").reset_index(drop=True)
        panel = cls(out, dict(roles), dict(lineage or {}))
        if validate:
            panel.validate()
        return panel

    # -- basic accessors -------------------------------------------------

    @property
    def states(self) -> tuple[str, ...]:
        return tuple(pd.unique(self.frame["state"]))

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(np.sort(self.frame["date"].unique()))

    @property
    def columns(self) -> list[str]:
        return [c for c in self.frame.columns if c not in KEYS]

    def __len__(self) -> int:
        return len(self.frame)

    def role(self, column: str) -> str:
        self.require(column)
        return self.roles[column]

    def require(self, *columns: str) -> None:
        for c in columns:
            if c not in self.roles:
                raise UnknownColumn(f"unknown column {c!r}")

    def require_role(self, column: str, allowed: Iterable[str]) -> None:
        allowed = tuple(allowed)
        if self.role(column) not in allowed:
            raise ColumnRoleError(
                f"column {column!r} has role {self.roles[column]!r}; expected one of {allowed}")

    def series(self, column: str) -> pd.Series:
        self.require(column)
        return self.frame[column]

    def equals(self, other: "PanelDataset") -> bool:
        return (dict(self.roles) == dict(other.roles)
                and self.frame.equals(other.frame))

    # -- construction helpers used by the transforms ---------------------

    def with_column(self, name: str, values, role: str,
                    derivation: Derivation | None = None) -> "PanelDataset":
        frame = self.frame.copy()
        frame[name] = np.asarray(values)
        roles = dict(self.roles)
        roles[name] = role
        lineage = dict(self.lineage)
        if derivation is None:
            lineage.pop(name, None)
        else:
            lineage[name] = derivation
        return PanelDataset(frame, roles, lineage)

    def with_values(self, name: str, values) -> "PanelDataset":
        """Replace the values of an existing column, keeping role and lineage."""
        self.require(name)
        frame = self.frame.copy()
        frame[name] = np.asarray(values, dtype=float)
        return PanelDataset(frame, dict(self.roles), dict(self.lineage))

    def select_states(self, states: Sequence[str]) -> "PanelDataset":
        keep = set(states)
        unknown = keep - set(self.states)
        if unknown:
            raise UnknownState(f"unknown states {sorted(unknown)}")
        frame = self.frame[self.frame["state"].isin(keep)].reset_index(drop=True)
        return PanelDataset(frame, dict(self.roles), dict(self.lineage))

    def state_mask(self, state: str) -> np.ndarray:
        if state not in set(self.frame["state"]):
            raise UnknownState(f"unknown state {state!r}")
        return (self.frame["state"] == state).to_numpy()

    def roots(self, column: str) -> set[str]:
        """Raw columns a derived column ultimately descends from."""
        seen, stack, out = set(), [column], set()
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            d = self.lineage.get(c)
            if d is None:
                out.add(c)
            else:
                stack.extend(d.sources)
        return out

    def depends_on(self, column: str, targets: Iterable[str]) -> bool:
        targets = set(targets)
        stack, seen = [column], set()
        while stack:
            c = stack.pop()
            if c in targets:
                return True
            if c in seen:
                continue
            seen.add(c)
            d = self.lineage.get(c)
            if d is not None:
                stack.extend(d.sources)
        return False

    # -- validation and I/O ----------------------------------------------

    def validate(self) -> None:
        f = self.frame
        dup = f.duplicated(list(KEYS))
        if dup.any():
            row = f.loc[dup.idxmax()]
            raise DuplicateCell(f"duplicate cell for state {row['state']!r} on {row['date']:%Y-%m-%d}")
        grouped = f.groupby("state", sort=False)
        steps = grouped["date"].diff().dropna()
        bad = steps != pd.Timedelta(days=1)
        if bad.any():
            row = f.loc[bad.idxmax()]
            raise GapInDates(f"dates for state {row['state']!r} are not a contiguous daily "
                             f"span (break before {row['date']:%Y-%m-%d})")
        for col, role in self.roles.items():
            if col in self.lineage:
                continue
            values = f[col]
            if role in COUNT_ROLES:
                neg = values < 0
                if neg.any():
                    row = f.loc[neg.idxmax()]
                    raise NonMonotoneCumulative(
                        f"{col} is negative for state {row['state']!r} on {row['date']:%Y-%m-%d}")
            if role == "count":
                # NaN cells are skipped; compare each value to the last observed one
                prev = grouped[col].transform(lambda s: s.ffill().shift(1))
                dec = values.notna() & prev.notna() & (values < prev)
                if dec.any():
                    row = f.loc[dec.idxmax()]
                    raise NonMonotoneCumulative(
                        f"cumulative column {col!r} decreases for state {row['state']!r} "
                        f"on {row['date']:%Y-%m-%d}")
            elif role == "policy":
                out = values.notna() & ((values < 0) | (values > 1))
                if out.any():
                    row = f.loc[out.idxmax()]
                    raise InvalidPolicyValue(
                        f"policy column {col!r} outside [0, 1] for state {row['state']!r} "
                        f"on {row['date']:%Y-%m-%d}")

    def to_csv(self, path: str | Path) -> None:
        out = self.frame.copy()
        out["date"] = out["date"].dt.strftime("%Y-%m-%d")
        out.to_csv(path, index=False, na_rep="")


def read_schema(schema: Mapping[str, str] | str | Path) -> dict[str, str]:
    if isinstance(schema, Mapping):
        return dict(schema)
    with open(schema) as fh:
        doc = json.load(fh)
    # accept either {"col": "role"} or {"columns": {"col": "role"}}
    return dict(doc.get("columns", doc))


def load_panel(path: str | Path, schema: Mapping[str, str] | str | Path) -> PanelDataset:
    """Read a ``state,date,...`` CSV and validate it against a role schema."""
    roles = read_schema(schema)
    frame = pd.read_csv(path, dtype={"state": str})
    for key in KEYS:
        if key not in frame.columns:
            raise MissingColumn(f"{path}: missing required column {key!r}")
    missing = [c for c in roles if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{path}: columns named in the schema are absent: {missing}")
    try:
        frame["date"] = pd.to_datetime(frame["date"], format="%Y-%m-%d")
    except (ValueError, TypeError) as exc:
        raise PanelError(f"{path}: dates must be ISO-8601 (YYYY-MM-DD): {exc}") from None
    return PanelDataset.from_frame(frame, roles)


# -- corrections ----------------------------------------------------------

@dataclass(frozen=True)
class Correction:
    state: str
    column: str
    old_start: dt.date
    new_start: dt.date
    note: str = ""


@dataclass(frozen=True)
class CorrectionSet:
    corrections: tuple[Correction, ...] = ()

    def __iter__(self):
        return iter(self.corrections)

    def __len__(self):
        return len(self.corrections)

    @classmethod
    def from_csv(cls, path: str | Path) -> "CorrectionSet":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(Correction(
                    state=rec["state"].strip(),
                    column=rec["column"].strip(),
                    old_start=dt.date.fromisoformat(rec["old_start"].strip()),
                    new_start=dt.date.fromisoformat(rec["new_start"].strip()),
                    note=(rec.get("note") or "").strip(),
                ))
        return cls(tuple(rows))


def bundled_corrections() -> CorrectionSet:
    """The Hawaii and North Dakota mask-mandate start-date fixes."""
    return CorrectionSet.from_csv(Path(__file__).with_name("data") / "mask_corrections.csv")


def _move_start(values: np.ndarray, dates: pd.DatetimeIndex, old_start, new_start) -> np.ndarray:
    old_start, new_start = pd.Timestamp(old_start), pd.Timestamp(new_start)
    out = values.astype(float).copy()
    on = np.nan_to_num(out) > 0
    # the episode being corrected is the first active run at or after old_start
    i0 = int(np.searchsorted(dates.values, old_start.to_datetime64()))
    while i0 < len(on) and not on[i0]:
        i0 += 1
    end = len(out)
    if i0 < len(on):
        j = i0
        while j < len(on) and on[j]:
            j += 1
        end = j
    start = int(np.searchsorted(dates.values, new_start.to_datetime64()))
    out[:min(start, end)] = 0.0
    out[start:end] = 1.0
    return out


def apply_corrections(panel: PanelDataset, corrections: CorrectionSet) -> PanelDataset:
    """Move recorded policy start dates.

    The indicator becomes 0 before ``new_start`` and 1 from ``new_start`` until
    the end of the corrected episode (the first return to 0 after
    ``old_start``); cells from that recorded end onward are left as they were.
    """
    known = set(panel.states)
    for c in corrections:
        if c.state not in known:
            raise UnknownState(f"correction references unknown state {c.state!r}")
        panel.require(c.column)
        panel.require_role(c.column, ["policy"])
    if not len(corrections):
        return panel
    frame = panel.frame.copy()
    for c in corrections:
        mask = (frame["state"] == c.state).to_numpy()
        dates = pd.DatetimeIndex(frame.loc[mask, "date"])
        fixed = _move_start(frame.loc[mask, c.column].to_numpy(), dates, c.old_start, c.new_start)
        frame[c.column] = frame[c.column].astype(float)
        frame.loc[mask, c.column] = fixed
        logger.info("corrected %s/%s start %s -> %s", c.state, c.column, c.old_start, c.new_start)
    return PanelDataset(frame, dict(panel.roles), dict(panel.lineage))


# -- transforms -----------------------------------------------------------

def encode_mask_policies(panel: PanelDataset, employee_col: str, public_col: str) -> PanelDataset:
    """Add ``masks_employees_only`` (employee and not public) and ``masks_public``."""
    panel.require(employee_col, public_col)
    panel.require_role(employee_col, ["policy"])
    panel.require_role(public_col, ["policy"])
    emp = panel.frame[employee_col].to_numpy(dtype=float)
    pub = panel.frame[public_col].to_numpy(dtype=float)
    out = panel.with_column(EMPLOYEES_ONLY, emp * (1.0 - pub), "policy",
                            Derivation("employees_only", (employee_col, public_col)))
    return out.with_column(PUBLIC, pub.copy(), "policy", Derivation("copy", (public_col,)))


def _per_state(panel: PanelDataset):
    return panel.frame.groupby("state", sort=False)


def moving_average(panel: PanelDataset, column: str, spec: TransformSpec = TransformSpec()) -> PanelDataset:
    """Trailing ``ma_window``-day mean per state, added as ``<column>_ma``."""
    panel.require(column)
    w = spec.ma_window
    sizes = _per_state(panel).size()
    if (sizes < w).any():
        raise SeriesTooShort(f"state {sizes.idxmin()!r} has {sizes.min()} days, "
                             f"fewer than the {w}-day window")
    values = (_per_state(panel)[column]
              .rolling(w, min_periods=w).mean()
              .reset_index(level=0, drop=True)
              .sort_index())
    role = panel.roles[column]
    return panel.with_column(f"{column}_ma", values.to_numpy(), role,
                             Derivation("ma", (column,), (("window", w),)))


def weekly_log_growth(panel: PanelDataset, count_column: str,
                      spec: TransformSpec = TransformSpec()) -> PanelDataset:
    """Add the weekly difference, its floored log, and the weekly change of that log.

    New columns: ``<c>_diff`` (C_t - C_{t-w}), ``<c>_logdiff``
    (ln max(diff, log_floor)), ``<c>_growth`` (logdiff_t - logdiff_{t-w}) and
    ``<c>_floored`` flagging cells where the floor was applied.
    """
    panel.require(count_column)
    panel.require_role(count_column, COUNT_ROLES)
    w, floor = spec.diff_window, spec.log_floor
    g = _per_state(panel)[count_column]
    diff = (panel.frame[count_column] - g.shift(w)).to_numpy(dtype=float)
    with np.errstate(invalid="ignore"):
        floored = np.isfinite(diff) & (diff < floor)
        logdiff = np.log(np.where(np.isfinite(diff), np.maximum(diff, floor), np.nan))
    c = count_column
    out = panel.with_column(f"{c}_diff", diff, "derived",
                            Derivation("diff", (c,), (("window", w),)))
    out = out.with_column(f"{c}_logdiff", logdiff, "derived",
                          Derivation("logdiff", (f"{c}_diff",), (("floor", floor),)))
    out = out.with_column(f"{c}_floored", floored, "derived",
                          Derivation("floored", (f"{c}_diff",), (("floor", floor),)))
    lagged = out.frame.groupby("state", sort=False)[f"{c}_logdiff"].shift(w)
    growth = logdiff - lagged.to_numpy(dtype=float)
    return out.with_column(f"{c}_growth", growth, "derived",
                           Derivation("growth", (f"{c}_logdiff",), (("window", w),)))


def lag(panel: PanelDataset, column: str, k: int) -> PanelDataset:
    """Add ``<column>_lag<k>``: the value k days earlier in the same state."""
    panel.require(column)
    if k < 0:
        raise ValueError("lag must be non-negative")
    values = _per_state(panel)[column].shift(k).to_numpy()
    if panel.frame[column].dtype == bool:
        values = values.astype(float)
    return panel.with_column(f"{column}_lag{k}", values, panel.roles[column],
                             Derivation("lag", (column,), (("k", k),)))


def national_aggregate(panel: PanelDataset, column: str) -> PanelDataset:
    """Add ``<column>_national``: the all-state sum on each date, repeated in every row."""
    panel.require(column)
    panel.require_role(column, COUNT_ROLES)
    totals = panel.frame.groupby("date")[column].sum(min_count=1)
    # a date with any missing state value has no national total
    has_nan = panel.frame[column].isna().groupby(panel.frame["date"]).any()
    totals[has_nan] = np.nan
    values = panel.frame["date"].map(totals).to_numpy(dtype=float)
    return panel.with_column(f"{column}_national", values, panel.roles[column],
                             Derivation("national", (column,)))


# -- pipelines ------------------------------------------------------------

def _spec_from_step(step: Mapping[str, Any]) -> TransformSpec:
    base = TransformSpec()
    return TransformSpec(
        ma_window=int(step.get("window", base.ma_window)) if step["op"] == "moving_average" else base.ma_window,
        diff_window=int(step.get("window", base.diff_window)) if step["op"] == "weekly_log_growth" else base.diff_window,
        log_floor=float(step.get("log_floor", base.log_floor)),
    )


def _step_columns(step: Mapping[str, Any]) -> list[str]:
    if "columns" in step:
        return list(step["columns"])
    return [step["column"]]


def apply_step(panel: PanelDataset, step: Mapping[str, Any]) -> PanelDataset:
    """Apply one declarative transform step (as found in a spec's ``transforms`` list)."""
    op = step["op"]
    if op == "encode_masks":
        return encode_mask_policies(panel, step["employee"], step["public"])
    if op == "corrections":
        return apply_corrections(panel, CorrectionSet.from_csv(step["path"]))
    for column in _step_columns(step):
        if op == "moving_average":
            panel = moving_average(panel, column, _spec_from_step(step))
        elif op == "weekly_log_growth":
            panel = weekly_log_growth(panel, column, _spec_from_step(step))
        elif op == "lag":
            panel = lag(panel, column, int(step.get("k", TransformSpec().lag_days)))
        elif op == "national":
            panel = national_aggregate(panel, column)
        else:
            raise ValueError(f"unknown transform op {op!r}")
    return panel


Edit = tuple[tuple[str, ...], Callable[[PanelDataset], PanelDataset]]


def run_pipeline(panel: PanelDataset, steps: Sequence[Mapping[str, Any]],
                 edits: Sequence[Edit] = ()) -> PanelDataset:
    """Run transform steps in order.

    Each edit ``(columns, fn)`` is applied exactly once, as soon as all of its
    columns exist: before the first step for raw columns, or right after the
    step that creates them. Placebo permutations and counterfactual policy
    changes use this to alter a series before its smoothed and lagged
    descendants are derived.
    """
    pending = list(edits)

    def flush(p: PanelDataset) -> PanelDataset:
        nonlocal pending
        still = []
        for cols, fn in pending:
            if all(c in p.roles for c in cols):
                p = fn(p)
            else:
                still.append((cols, fn))
        pending = still
        return p

    panel = flush(panel)
    for step in steps:
        panel = flush(apply_step(panel, step))
    if pending:
        names = sorted({c for cols, _ in pending for c in cols if c not in panel.roles})
        raise UnknownColumn(f"edit targets never produced by the pipeline: {names}")
    return panel
