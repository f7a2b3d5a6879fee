from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from policypanel.errors import AllReplicatesFailed, RankDeficient, UnknownColumn
from policypanel.ols import design_from_spec, fit_ols
from policypanel.panel import EMPLOYEES_ONLY, PUBLIC
from policypanel.placebo import (PlaceboConfig, PlaceboResult, permute_masks, replicate_rng,
                                 run_placebo, summarize_placebo)

from synth import growth_spec, null_panel, null_spec, policy_panel

RAW = ["pmaskbus", "pmask"]


def series_by_state(panel, column):
    return {s: tuple(g[column]) for s, g in panel.frame.groupby("state", sort=False)}


def test_identity_permutation_is_noop():
    panel = policy_panel(n_states=5, n_days=30)
    out = permute_masks(panel, RAW, np.arange(5))
    assert out.equals(panel)


def test_identical_series_are_permutation_invariant():
    panel = policy_panel(n_states=4, n_days=30)
    same = panel.with_values("pmask", np.tile(panel.frame["pmask"][:30].to_numpy(), 4))
    assert permute_masks(same, ["pmask"], [2, 3, 0, 1]).equals(same)


def test_cycle_moves_whole_histories_jointly():
    panel = policy_panel(n_states=3, n_days=40)
    a, b, c = panel.states
    out = permute_masks(panel, RAW, {a: b, b: c, c: a})
    before = {col: series_by_state(panel, col) for col in RAW}
    after = {col: series_by_state(out, col) for col in RAW}
    for col in RAW:
        assert after[col][a] == before[col][b]
        assert after[col][b] == before[col][c]
        assert after[col][c] == before[col][a]
    for col in ("cases", "tests", "pstay", "mobility"):
        assert_array_equal(out.frame[col], panel.frame[col])


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(6))))
def test_permutation_preserves_multiset_of_series(perm):
    panel = policy_panel(n_states=6, n_days=25)
    out = permute_masks(panel, RAW, perm)
    for col in RAW:
        assert sorted(series_by_state(out, col).values()) == sorted(series_by_state(panel, col).values())
    # joint structure: each state's (employee, public) pair comes from one donor
    pairs = lambda p: sorted(zip(series_by_state(p, "pmaskbus").values(),
                                 series_by_state(p, "pmask").values()))
    assert pairs(out) == pairs(panel)


def test_permutation_validation():
    panel = policy_panel(n_states=3, n_days=10)
    with pytest.raises(ValueError):
        permute_masks(panel, RAW, [0, 0, 1])
    with pytest.raises(ValueError):
        permute_masks(panel, RAW, {"state00": "state01"})
    with pytest.raises(UnknownColumn):
        permute_masks(panel, ["nope"], [0, 1, 2])


def test_config_validation():
    spec = null_spec()
    with pytest.raises(ValueError):
        PlaceboConfig(spec, n_reps=0)
    with pytest.raises(ValueError):
        PlaceboConfig(spec, permuted_columns=())


def test_replicate_stream_depends_only_on_seed_and_rep():
    a = replicate_rng(7, 3).permutation(10)
    replicate_rng(7, 2).permutation(10)
    assert_array_equal(replicate_rng(7, 3).permutation(10), a)
    assert not np.array_equal(replicate_rng(8, 3).permutation(10), a)


def test_run_placebo_shape_and_targets():
    panel = null_panel(n_states=10, n_days=60)
    result = run_placebo(panel, PlaceboConfig(null_spec(), n_reps=7, seed=1))
    assert result.n_reps == 7
    assert list(result.estimates.columns) == list(null_spec().regressors)
    assert result.n_failed == 0
    assert len(result.permutations) == 7
    assert all(sorted(p) == sorted(panel.states) for p in result.permutations)


def test_permuted_columns_may_be_encoded_masks():
    panel = policy_panel(n_states=8, n_days=70)
    cfg = PlaceboConfig(growth_spec(), n_reps=3, seed=2, permuted_columns=(EMPLOYEES_ONLY, PUBLIC))
    result = run_placebo(panel, cfg)
    assert list(result.estimates.columns) == ["masks_employees_only_ma_lag14", "masks_public_ma_lag14"]


def test_identity_permutation_reproduces_base_estimate():
    panel = policy_panel(n_states=8, n_days=70)
    spec = growth_spec()
    _, design = design_from_spec(panel, spec)
    base = fit_ols(design).coef("masks_public_ma_lag14")
    edit = (tuple(RAW), lambda p: permute_masks(p, RAW, np.arange(8)))
    _, permuted = design_from_spec(panel, spec, [edit])
    assert fit_ols(permuted).coef("masks_public_ma_lag14") == base
    result = run_placebo(panel, PlaceboConfig(spec, n_reps=2, permuted_columns=tuple(RAW)))
    assert result.base_estimates["masks_public_ma_lag14"] == base


def test_explicit_coefficients_and_unknown_target():
    panel = null_panel(n_states=10, n_days=60)
    cfg = PlaceboConfig(null_spec(), n_reps=2, coefficients=("intercept",))
    assert list(run_placebo(panel, cfg).estimates.columns) == ["intercept"]
    with pytest.raises(UnknownColumn):
        run_placebo(panel, PlaceboConfig(null_spec(), n_reps=2, coefficients=("masks",)))


def test_serial_and_parallel_bit_identical():
    panel = null_panel(n_states=12, n_days=60)
    cfg = PlaceboConfig(null_spec(), n_reps=9, seed=5)
    a = run_placebo(panel, cfg, n_jobs=1)
    b = run_placebo(panel, cfg, n_jobs=3)
    assert a.estimates.equals(b.estimates)
    assert a.permutations == b.permutations


def flaky_fit(monkeypatch, fails):
    """Let the base fit through, then fail the replicate fits whose call index is in ``fails``."""
    import policypanel.placebo as placebo
    calls = []

    def fit(design):
        calls.append(1)
        if len(calls) - 2 in fails:
            raise RankDeficient("masks_public_ma_lag14")
        return fit_ols(design)

    monkeypatch.setattr(placebo, "fit_ols", fit)


def test_rank_deficient_replicates_are_marked_failed(monkeypatch):
    flaky_fit(monkeypatch, {1, 3})
    panel = null_panel(n_states=10, n_days=60)
    result = run_placebo(panel, PlaceboConfig(null_spec(), n_reps=5))
    assert result.failed.tolist() == [False, True, False, True, False]
    assert result.estimates.iloc[[1, 3]].isna().all().all()
    summary = result.summary()
    assert summary["n_ok"].tolist() == [3, 3]
    assert summary.attrs["n_failed"] == 2


def test_all_replicates_failed(monkeypatch):
    flaky_fit(monkeypatch, set(range(4)))
    with pytest.raises(AllReplicatesFailed):
        run_placebo(null_panel(n_states=10, n_days=60), PlaceboConfig(null_spec(), n_reps=4))


def fake_result(values, failed=None) -> PlaceboResult:
    values = np.asarray(values, dtype=float)
    failed = np.isnan(values) if failed is None else np.asarray(failed)
    return PlaceboResult(estimates=pd.DataFrame({"b": values}), failed=failed,
                         permutations=[()] * len(values), seed=0)


def test_summary_constant_values():
    s = summarize_placebo(fake_result([0.3] * 6)).iloc[0]
    for k in ("min", "p05", "q1", "median", "q3", "p95", "max", "mean"):
        assert s[k] == pytest.approx(0.3)
    assert s["sd"] == pytest.approx(0.0, abs=1e-15)


def test_summary_type7_quantiles():
    s = summarize_placebo(fake_result([5, 1, 4, 2, 3])).iloc[0]
    assert (s["min"], s["q1"], s["median"], s["q3"], s["max"]) == (1, 2, 3, 4, 5)
    assert s["p05"] == pytest.approx(1.2)
    assert s["p95"] == pytest.approx(4.8)
    s = summarize_placebo(fake_result([1, 2, 3, 4])).iloc[0]
    assert (s["q1"], s["median"], s["q3"]) == (1.75, 2.5, 3.25)


def test_summary_omits_all_failed_column_and_counts_failures():
    result = fake_result([np.nan] * 4, failed=[True] * 4)
    frame = summarize_placebo(result)
    assert frame.empty
    assert frame.attrs["n_failed"] == 4
    part = summarize_placebo(fake_result([1.0, np.nan, 3.0])).iloc[0]
    assert (part["n_ok"], part["n_failed"], part["median"]) == (2, 1, 2.0)


@settings(max_examples=30)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50))
def test_summary_quartiles_ordered(values):
    s = summarize_placebo(fake_result(values)).iloc[0]
    assert s["min"] <= s["q1"] <= s["median"] <= s["q3"] <= s["max"]
