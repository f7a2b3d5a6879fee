"""Leave-one-out influence of single observations on fitted coefficients."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import LeverageOne, UnknownCoefficient, Underdetermined
from .ols import DesignMatrix, FitResult

LEVERAGE_TOL = 1e-10


@dataclass(frozen=True)
class InfluenceRecord:
    state: str
    date: pd.Timestamp
    target: str
    delta_beta: float
    leverage: float
    residual: float


def _target_index(names: Sequence[str], target: str) -> int:
    try:
        return list(names).index(target)
    except ValueError:
        raise UnknownCoefficient(f"{target!r} is not a fitted coefficient") from None


def dfbeta_matrix(fit: FitResult, design: DesignMatrix) -> np.ndarray:
    """n x K matrix of beta_(deleted) - beta for every row and coefficient."""
    h = fit.hat
    if np.any(h >= 1 - LEVERAGE_TOL):
        i = int(np.argmax(h))
        row = design.row_index.iloc[i]
        raise LeverageOne(f"row {i} ({row['state']}, {row['date']:%Y-%m-%d}) has leverage {h[i]:.12f}")
    scale = -fit.resid / (1.0 - h)
    return (design.X @ fit.xtx_inv) * scale[:, None]


def dfbeta(fit: FitResult, design: DesignMatrix, target: str) -> list[InfluenceRecord]:
    """Closed-form change in ``target`` from deleting each observation.

    ``delta_beta = -[(X'X)^-1 x_i]_target * e_i / (1 - h_i)``, the full-vector
    leave-one-out displacement. Positive values mean deleting the row raises
    the coefficient, so the row is pulling the estimate down.
    """
    j = _target_index(fit.column_names, target)
    delta = dfbeta_matrix(fit, design)[:, j]
    idx = design.row_index
    return [
        InfluenceRecord(state=s, date=d, target=target, delta_beta=float(db),
                        leverage=float(h), residual=float(e))
        for s, d, db, h, e in zip(idx["state"], idx["date"], delta, fit.hat, fit.resid)
    ]


def records_frame(records: Iterable[InfluenceRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in records],
                         columns=["state", "date", "target", "delta_beta", "leverage", "residual"])
    return frame.sort_values(["target", "state", "date"], kind="mergesort").reset_index(drop=True)


def state_influence(records: Iterable[InfluenceRecord]) -> pd.DataFrame:
    """Per state and target: summed, largest absolute, and count of row influences.

    Summing row-level values only approximates deleting a whole state at once.
    """
    frame = records_frame(records)
    if frame.empty:
        raise ValueError("no influence records")
    g = frame.groupby(["target", "state"], sort=True)["delta_beta"]
    out = pd.DataFrame({
        "sum": g.sum(),
        "max_abs": g.apply(lambda s: s.abs().max()),
        "count": g.size(),
    }).reset_index()
    out["abs_sum"] = out["sum"].abs()
    out = out.sort_values(["target", "abs_sum", "state"], ascending=[True, False, True],
                          kind="mergesort").drop(columns="abs_sum")
    out["rank"] = out.groupby("target").cumcount() + 1
    return out.reset_index(drop=True)


def loo_oracle(design: DesignMatrix, row: int, target: str) -> float:
    """Refit without ``row`` and return the change in ``target``.

    Uses an SVD least-squares solve so it shares no code with :func:`dfbeta`.
    The change is fitted directly on the full-sample residuals of the kept
    rows rather than as a difference of two refits, which cancels badly when
    the row has almost no influence.
    """
    j = _target_index(design.column_names, target)
    n, k = design.X.shape
    if n - 1 < k:
        raise Underdetermined(f"deleting a row leaves {n - 1} observations for {k} coefficients")
    full, *_ = np.linalg.lstsq(design.X, design.y, rcond=None)
    keep = np.ones(n, dtype=bool)
    keep[row] = False
    resid = design.y - design.X @ full
    # one refinement step so the residuals are orthogonal to X at working precision
    step, *_ = np.linalg.lstsq(design.X, resid, rcond=None)
    resid = resid - design.X @ step
    change, *_ = np.linalg.lstsq(design.X[keep], resid[keep], rcond=None)
    return float(change[j])
