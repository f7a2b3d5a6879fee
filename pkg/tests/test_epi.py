from __future__ import annotations

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.optimize import brentq

from policypanel.counterfactual import sir_counterfactual
from policypanel.epi import (DEFAULT_POLICIES, CohortSpec, SirConfig, final_size, generate_cohort,
                             paths_to_panel, recovery_experiment, recovery_spec, run_recovery,
                             simulate_batch, simulate_sir)
from policypanel.errors import HorizonMismatch, InsufficientSurvivors, InvalidConfig
from policypanel.panel import weekly_log_growth

NO_POLICY = dict(policy_effects=(0.0, 0.0, 0.0, 0.0))


def final_size_root(r0: float) -> float:
    return brentq(lambda z: z - 1 + np.exp(-r0 * z), 1e-9, 1.0, xtol=1e-15)


# -- configuration ------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(r0=0), dict(population=0), dict(infectious_period=0),
                                 dict(policy_effects=(-0.1, 0, 0, 0)), dict(horizon=0),
                                 dict(policy_onset_range=(20, 10)), dict(reporting=0),
                                 dict(policy_effects=(0.5,))])
def test_invalid_config(bad):
    with pytest.raises(InvalidConfig):
        SirConfig(**bad)


def test_config_json(tmp_path):
    path = tmp_path / "sir.json"
    path.write_text(json.dumps({"sir": {"r0": 3.0, "horizon": 50}, "cohort": {"n_select": 5}}))
    cfg = SirConfig.from_json(path)
    assert (cfg.r0, cfg.horizon, cfg.policy_effects) == (3.0, 50, (0.525,) * 4)
    assert SirConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfig):
        CohortSpec(n_generate=5, n_select=6)


# -- simulation ---------------------------------------------------------------------

@pytest.mark.parametrize("r0", [1.5, 2.5, 4.0])
def test_final_size_bisection_matches_brentq(r0):
    assert final_size(r0) == pytest.approx(final_size_root(r0), abs=1e-12)
    assert final_size(0.9) == 0.0


def test_no_policy_attack_rate_matches_final_size_root():
    path = simulate_sir(SirConfig(horizon=400, **NO_POLICY), seed=0)
    assert abs(path.attack_rate - final_size_root(2.5)) < 1e-3
    assert final_size_root(2.5) == pytest.approx(0.8926, abs=5e-5)


def test_conservation_and_monotone_compartments():
    for seed in range(5):
        p = simulate_sir(SirConfig(horizon=200), seed=seed)
        assert_allclose(p.S + p.I + p.R, p.population, rtol=1e-12)
        assert (np.diff(p.S) <= 0).all()
        assert (np.diff(p.R) >= 0).all()
        assert (p.I >= 0).all()
        assert 0 <= p.attack_rate <= 1
        assert p.cumulative_cases[-1] == pytest.approx(p.population - p.S[-1])


def test_all_policies_from_day_zero_is_subcritical():
    cfg = SirConfig(policy_onset_range=(0, 0), horizon=300)
    p = simulate_sir(cfg, seed=0)
    assert p.attack_rate < cfg.initial_infected * 10 / cfg.population
    assert (np.diff(p.I) < 0).all()


def test_reporting_scales_new_cases():
    full = simulate_sir(SirConfig(), onsets=[20, 30, 40, 50])
    half = simulate_sir(SirConfig(reporting=0.5), onsets=[20, 30, 40, 50])
    assert_allclose(half.new_cases, 0.5 * full.new_cases)
    assert_array_equal(half.S, full.S)


def test_lower_effects_raise_attack_rate():
    onsets = np.array([[15, 25, 35, 45]])
    rates = []
    for e in np.linspace(0, 0.6, 7):
        S = simulate_batch(SirConfig(), onsets, effects=np.full(4, e))[0]
        rates.append(1 - S[0, -1] / 1e6)
    assert (np.diff(rates) <= 0).all()
    base = SirConfig().policy_effects
    for p in range(4):
        lowered = np.array(base)
        lowered[p] = 0.2
        S0 = simulate_batch(SirConfig(), onsets)[0][0, -1]
        S1 = simulate_batch(SirConfig(), onsets, effects=lowered)[0][0, -1]
        assert S1 <= S0


def test_policy_matrix_steps_at_onsets():
    p = simulate_sir(SirConfig(), onsets=[10, 20, 30, 60])
    m = p.policy_matrix()
    for j, d in enumerate([10, 20, 30, 60]):
        assert m[d - 1, j] == 0 and m[d, j] == 1 and m[-1, j] == 1


# -- cohorts ------------------------------------------------------------------------

def test_cohort_without_filter_returns_everything():
    cfg = SirConfig()
    paths = generate_cohort(cfg, CohortSpec(n_generate=30, n_select=30, attack_band=(0, 1), seed=4))
    assert [p.ident for p in paths] == list(range(30))


def test_cohort_unfiltered_subsample_is_uniform_over_all():
    cfg = SirConfig(horizon=30)
    counts = np.zeros(20)
    for seed in range(300):
        for p in generate_cohort(cfg, CohortSpec(20, 5, (0, 1), seed)):
            counts[p.ident] += 1
    # each index is chosen with probability 1/4 over 300 draws
    assert np.abs(counts / 300 - 0.25).max() < 0.1


def test_default_cohort_band_and_determinism():
    cfg = SirConfig()
    spec = CohortSpec(seed=11)
    a = generate_cohort(cfg, spec)
    b = generate_cohort(cfg, spec)
    assert len(a) == 50
    assert all(0.005 <= p.attack_rate <= 0.10 for p in a)
    assert [p.onsets for p in a] == [p.onsets for p in b]
    assert len({p.onsets for p in generate_cohort(cfg, CohortSpec(seed=12))} ^ {p.onsets for p in a}) > 0


def test_default_band_has_enough_survivors_and_narrow_band_fails():
    cfg = SirConfig()
    onsets = np.stack([np.random.default_rng(i).integers(10, 61, 4) for i in range(1500)])
    S = simulate_batch(cfg, onsets)[0]
    attack = 1 - S[:, -1] / cfg.population
    assert ((attack >= 0.005) & (attack <= 0.10)).sum() >= 50
    with pytest.raises(InsufficientSurvivors) as info:
        generate_cohort(cfg, CohortSpec(attack_band=(0.999, 1.0)))
    assert info.value.survivors == 0 and info.value.needed == 50


# -- panels -------------------------------------------------------------------------

def test_single_path_panel():
    p = simulate_sir(SirConfig(), onsets=[12, 22, 32, 42])
    panel = paths_to_panel([p])
    assert panel.states == ("sim0000",)
    assert_allclose(panel.frame["cases"], p.cumulative_cases)
    assert (panel.frame["tests"] == 1e6).all()
    assert panel.role("cases") == "count" and panel.role("masks") == "policy"


def test_panel_policy_steps_match_onsets():
    paths = generate_cohort(SirConfig(), CohortSpec(n_generate=200, n_select=10, seed=3))
    panel = paths_to_panel(paths)
    assert len(panel.states) == 10
    for state, p in zip(panel.states, paths):
        rows = panel.frame[panel.frame["state"] == state]
        for name, onset in zip(DEFAULT_POLICIES, p.onsets):
            first_on = int(np.argmax(rows[name].to_numpy() > 0))
            assert first_on == onset


def test_panel_growth_round_trip():
    p = simulate_sir(SirConfig(), onsets=[12, 22, 32, 42])
    growth = weekly_log_growth(paths_to_panel([p]), "cases").frame["cases_growth"].to_numpy()
    cum = p.cumulative_cases
    weekly = cum[7:] - cum[:-7]
    log_weekly = np.log(np.maximum(weekly, 1.0))
    want = np.full(len(cum), np.nan)
    want[14:] = log_weekly[7:] - log_weekly[:-7]
    assert_allclose(growth, want, rtol=1e-12, equal_nan=True)


def test_horizon_mismatch():
    a = simulate_sir(SirConfig(horizon=50), seed=1)
    b = simulate_sir(SirConfig(horizon=60), seed=1)
    with pytest.raises(HorizonMismatch):
        paths_to_panel([a, b])


# -- recovery ---------------------------------------------------------------------

@pytest.mark.parametrize("lag", [11, 25])
def test_recovery_coefficients_negative(lag):
    out = run_recovery(SirConfig(), CohortSpec(seed=0), lag=lag)
    assert list(out["policy"]) == list(DEFAULT_POLICIES)
    assert (out["estimate"] < 0).all()
    assert (out["se"] > 0).all()
    assert list(out["coefficient"]) == [f"{p}_ma_lag{lag}" for p in DEFAULT_POLICIES]


def test_recovery_spec_terms():
    spec = recovery_spec(lag=11)
    assert spec.outcome == "cases_ma_growth"
    assert spec.regressors[-2:] == ("cases_ma_growth_lag11", "cases_ma_logdiff_lag11")
    raw = recovery_spec(lag=11, smooth=False)
    assert raw.regressors[0] == "masks_lag11"


def test_run_recovery_cohorts_are_distinct_and_reproducible():
    cfg = SirConfig()
    a = run_recovery(cfg, CohortSpec(n_generate=300, n_select=20, seed=2), n_cohorts=2)
    b = run_recovery(cfg, CohortSpec(n_generate=300, n_select=20, seed=2), n_cohorts=2)
    assert a.equals(b)
    assert a["cohort"].tolist() == [0] * 4 + [1] * 4
    assert not np.allclose(a["estimate"][:4], a["estimate"][4:])


def test_recovery_experiment_on_given_panel():
    paths = generate_cohort(SirConfig(), CohortSpec(seed=5))
    out = recovery_experiment(paths_to_panel(paths), lag=11)
    assert out.shape == (4, 5)


# -- SIR counterfactual -------------------------------------------------------------

def test_removing_zero_effect_policy_changes_nothing():
    cfg = SirConfig(policy_effects=(0.525, 0.0, 0.525, 0.525))
    paths = generate_cohort(cfg, CohortSpec(n_generate=300, n_select=10, seed=1))
    truth = sir_counterfactual(cfg, paths, 1)
    assert_array_equal(truth.per_member, 0.0)


def test_removing_policy_before_peak_raises_cases_for_everyone():
    cfg = SirConfig()
    paths = generate_cohort(cfg, CohortSpec(n_generate=300, n_select=10, seed=1))
    truth = sir_counterfactual(cfg, paths, 0)
    assert (truth.per_member[:, -1] > 0).all()
    assert (truth.lower <= truth.median).all() and (truth.median <= truth.upper).all()
    assert truth.aggregate[-1] > 0
    assert list(truth.to_frame().columns) == ["day", "median", "lower", "upper", "aggregate"]


def test_removal_after_die_out_changes_nothing():
    cfg = SirConfig(policy_onset_range=(0, 0), horizon=400)
    paths = [simulate_sir(cfg, seed=0)]
    assert paths[0].I[300] < 1e-9
    truth = sir_counterfactual(cfg, paths, 0, removal_day=300)
    assert_allclose(truth.per_member, 0.0, atol=1e-9)
    with pytest.raises(ValueError):
        sir_counterfactual(cfg, paths, 4)
