from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from policypanel.diagnostics import (dfbeta, dfbeta_matrix, loo_oracle, records_frame,
                                     state_influence)
from policypanel.errors import LeverageOne, UnknownCoefficient, Underdetermined
from policypanel.ols import design_from_spec, fit_ols

from synth import growth_spec, policy_panel, random_design


def test_dfbeta_matches_refit_on_every_row():
    d = random_design(np.random.default_rng(0), 60, 5, n_clusters=6)
    fit = fit_ols(d)
    for target in d.column_names:
        records = dfbeta(fit, d, target)
        exact = [loo_oracle(d, i, target) for i in range(d.n)]
        assert_allclose([r.delta_beta for r in records], exact, rtol=1e-8, atol=1e-13)


def test_dfbeta_sign_convention():
    # one large positive outlier pulls the slope up, so deleting it lowers the slope
    x = np.linspace(-1, 1, 21)
    y = 0.5 * x
    y[-1] += 10.0
    d = random_design(np.random.default_rng(1), 21, 2)
    d = replace(d, X=np.column_stack([np.ones(21), x]), y=y)
    rec = dfbeta(fit_ols(d), d, "x1")
    assert rec[-1].delta_beta < 0
    assert rec[-1].delta_beta == pytest.approx(loo_oracle(d, 20, "x1"), rel=1e-10)


def test_record_fields():
    d = random_design(np.random.default_rng(2), 30, 3)
    fit = fit_ols(d)
    rec = dfbeta(fit, d, "x2")
    assert len(rec) == d.n
    assert rec[4].leverage == fit.hat[4]
    assert rec[4].residual == fit.resid[4]
    assert rec[4].state == d.row_index["state"].iloc[4]
    assert rec[4].target == "x2"


def test_unknown_target():
    d = random_design(np.random.default_rng(3), 30, 3)
    with pytest.raises(UnknownCoefficient):
        dfbeta(fit_ols(d), d, "masks")
    with pytest.raises(UnknownCoefficient):
        loo_oracle(d, 0, "masks")


def test_leverage_one_row_rejected():
    d = random_design(np.random.default_rng(4), 20, 3)
    dummy = np.zeros(20)
    dummy[7] = 1.0  # a column that only row 7 loads on gives that row leverage 1
    d = replace(d, X=np.column_stack([d.X, dummy]), column_names=(*d.column_names, "only7"),
                column_roles=(*d.column_roles, "policy"))
    with pytest.raises(LeverageOne, match="row 7"):
        dfbeta_matrix(fit_ols(d), d)


def test_oracle_underdetermined():
    d = random_design(np.random.default_rng(5), 3, 3)
    with pytest.raises(Underdetermined):
        loo_oracle(d, 0, "x1")


def test_state_influence_aggregates_rows():
    panel = policy_panel(n_states=6, n_days=70)
    _, design = design_from_spec(panel, growth_spec())
    fit = fit_ols(design)
    target = "masks_public_ma_lag14"
    records = dfbeta(fit, design, target)
    ranking = state_influence(records)
    frame = records_frame(records)
    want = frame.groupby("state")["delta_beta"].sum()
    got = ranking.set_index("state")["sum"]
    assert_allclose(got.loc[want.index], want, rtol=1e-12)
    assert list(ranking["rank"]) == list(range(1, 7))
    assert ranking["sum"].abs().is_monotonic_decreasing
    assert ranking["count"].sum() == design.n
    assert (ranking["max_abs"] <= frame.groupby("state")["delta_beta"]
            .apply(lambda s: s.abs().sum()).loc[ranking["state"]].to_numpy() + 1e-15).all()


def test_state_influence_flags_miscoded_state():
    panel = policy_panel(n_states=10, n_days=80, seed=3)
    _, design = design_from_spec(panel, growth_spec())
    target = "masks_public_ma_lag14"
    # a state whose outcome jumps exactly while the lagged mandate is active
    bad = design.row_index["state"].eq("state04").to_numpy() & (design.X[:, design.column(target)] > 0)
    skewed = replace(design, y=design.y + 1.5 * bad)
    ranking = state_influence(dfbeta(fit_ols(skewed), skewed, target))
    assert ranking["state"].iloc[0] == "state04"


def test_records_frame_columns_and_empty_ranking():
    assert list(records_frame([]).columns) == ["state", "date", "target", "delta_beta",
                                               "leverage", "residual"]
    with pytest.raises(ValueError):
        state_influence([])
