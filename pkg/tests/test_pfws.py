"""Threshold-selection checks: resampling, curve algebra, final report."""

import numpy as np
import pytest

from fedcausal.core import RISK_RATIO, TARGET_ID, ValidationError
from fedcausal.estimators import estimate_measure
from fedcausal.federation import Cohort, FederatedWeights, federated_weights
from fedcausal.pfws import (
    BootstrapPlan,
    MseCurve,
    MsePoint,
    ThresholdGrid,
    bootstrap_replicate,
    default_threshold_grid,
    estimate_fs,
    mse_curve,
    psi_at_threshold,
    select_threshold,
    selection_set,
)
from fedcausal.sim import SCENARIOS, generate


def _weights(*w):
    return FederatedWeights(w=np.array(w), lambda_n=0.0, objective_value=0.0)


# -- grids and plans ----------------------------------------------------------------


def test_threshold_grid_validation():
    with pytest.raises(ValidationError):
        ThresholdGrid(())
    with pytest.raises(ValidationError):
        ThresholdGrid((0.0, 0.5))
    with pytest.raises(ValidationError):
        ThresholdGrid((0.2, 0.2))
    with pytest.raises(ValidationError):
        ThresholdGrid((0.5, 1.2))
    grid = default_threshold_grid()
    assert grid.values[0] == 0.05
    assert grid.values[-1] == 1.0
    assert len(grid.values) == 20


def test_bootstrap_plan_validation():
    with pytest.raises(ValidationError):
        BootstrapPlan(B=1)
    with pytest.raises(ValidationError):
        BootstrapPlan(B=10, scheme="iid")


def test_bootstrap_replicate_preserves_sizes_and_is_deterministic():
    data = generate(SCENARIOS["1.1"], n=200, seed=3)
    plan = BootstrapPlan(B=5, seed=11)
    rep_a = bootstrap_replicate(data, plan, 2)
    rep_b = bootstrap_replicate(data, plan, 2)
    for k in data.site_ids:
        assert rep_a.sites[k].n == data.sites[k].n
        assert np.array_equal(rep_a.sites[k].y, rep_b.sites[k].y)
        assert np.array_equal(rep_a.sites[k].x, rep_b.sites[k].x)
    other = bootstrap_replicate(data, plan, 3)
    assert not np.array_equal(rep_a.sites[0].y, other.sites[0].y)
    with pytest.raises(ValidationError):
        bootstrap_replicate(data, plan, 5)


def test_bootstrap_replicate_means_track_originals():
    data = generate(SCENARIOS["1.1"], n=400, seed=7)
    plan = BootstrapPlan(B=60, seed=7)
    for k in data.site_ids:
        orig = float(np.mean(data.sites[k].y))
        means = np.array([
            float(np.mean(bootstrap_replicate(data, plan, b).sites[k].y))
            for b in range(plan.B)
        ])
        se = float(np.std(means, ddof=1))
        assert abs(float(np.mean(means)) - orig) <= 3.0 * se


# -- selection sets -----------------------------------------------------------------


def test_selection_set_thresholds_source_weights():
    w = _weights(0.2, 0.5, 0.3)
    assert selection_set(w, (1, 2), 0.05) == (0, 1, 2)
    assert selection_set(w, (1, 2), 0.4) == (0, 1)
    assert selection_set(w, (1, 2), 0.5) == (0, 1)
    assert selection_set(w, (1, 2), 0.51) == (0,)
    with pytest.raises(ValidationError):
        selection_set(w, (1,), 0.5)


def test_psi_at_threshold_empty_selection_equals_drt():
    data = generate(SCENARIOS["1.1"], n=300, seed=5)
    report = psi_at_threshold(1.0, _weights(0.4, 0.35, 0.25), data)
    drt = estimate_measure(data, RISK_RATIO, mode="drt")
    assert report.to_json() == drt.to_json()


def test_psi_at_threshold_full_selection_equals_mr1():
    data = generate(SCENARIOS["1.1"], n=300, seed=5)
    report = psi_at_threshold(0.05, _weights(0.4, 0.35, 0.25), data)
    mr1 = estimate_measure(data, RISK_RATIO, mode="mr1")
    assert report.to_json() == mr1.to_json()


def test_psi_at_threshold_equal_sets_give_identical_reports():
    data = generate(SCENARIOS["1.1"], n=250, seed=9)
    w = _weights(0.2, 0.6, 0.2)
    a = psi_at_threshold(0.3, w, data)
    b = psi_at_threshold(0.6, w, data)
    assert a.selected_sites == b.selected_sites == (0, 1)
    assert a.to_json() == b.to_json()
    with pytest.raises(ValidationError):
        psi_at_threshold(0.0, w, data)


# -- curve algebra ------------------------------------------------------------------


def _small_curve(data=None, seed=13, B=8, fast=False):
    data = data if data is not None else generate(SCENARIOS["1.1"], n=220, seed=seed)
    cohort = Cohort(data, seed=seed)
    solution = federated_weights(cohort, lambda_grid=(0.0,))
    grid = ThresholdGrid((0.05, 0.4, 0.8, 1.0))
    plan = BootstrapPlan(B=B, seed=seed)
    return mse_curve(grid, plan, solution, cohort, fast=fast), solution


def test_mse_curve_empty_selection_identity_is_exact():
    curve, _ = _small_curve()
    empty = [p for p in curve.points if p.selected_sites == (TARGET_ID,)]
    assert empty, "grid must reach a target-only selection"
    for p in empty:
        assert p.mse_hat == p.var_target
        assert p.cov_hat == p.var_target
        assert p.psi_e == curve.base_psi


def test_mse_curve_monotone_sets_and_shared_entries():
    curve, _ = _small_curve()
    sizes = [len(p.selected_sites) for p in curve.points]
    assert sizes == sorted(sizes, reverse=True)
    by_set = {}
    for p in curve.points:
        if p.selected_sites in by_set:
            q = by_set[p.selected_sites]
            assert (p.psi_e, p.mse_hat, p.cov_hat) == (q.psi_e, q.mse_hat, q.cov_hat)
        else:
            by_set[p.selected_sites] = p


def test_mse_curve_csv_format():
    curve, _ = _small_curve()
    text = curve.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "e,selected,psi,mse_hat"
    assert len(lines) == 1 + len(curve.points)
    first = lines[1].split(",")
    assert first[0] == repr(curve.points[0].e)
    assert first[1] == "|".join(str(k) for k in curve.points[0].selected_sites)
    # floats round-trip exactly through the CSV text
    assert float(first[2]) == curve.points[0].psi_e
    assert float(first[3]) == curve.points[0].mse_hat
    assert len(curve.digest()) == 12


def test_mse_curve_rejects_plan_seed_mismatch():
    data = generate(SCENARIOS["1.1"], n=150, seed=3)
    cohort = Cohort(data, seed=3)
    solution = federated_weights(cohort, lambda_grid=(0.0,))
    with pytest.raises(ValidationError):
        mse_curve(
            ThresholdGrid((0.5,)), BootstrapPlan(B=4, seed=99), solution, cohort
        )


def test_fast_mode_is_labeled_and_cheaper_path_runs():
    curve, _ = _small_curve(fast=True, B=4)
    assert curve.approximate
    slow, _ = _small_curve(fast=False, B=4)
    assert not slow.approximate


# -- threshold choice ---------------------------------------------------------------


def _toy_curve(mses, sets=None):
    es = [round(0.1 * (i + 1), 2) for i in range(len(mses))]
    sets = sets or [(0,)] * len(mses)
    points = tuple(
        MsePoint(e=e, selected_sites=s, psi_e=2.0, mse_hat=m, cov_hat=0.0,
                 var_target=1.0)
        for e, s, m in zip(es, sets, mses)
    )
    return MseCurve(points=points, base_psi=2.0, var_target=1.0, B=4, seed=0)


def test_select_threshold_unique_minimizer():
    assert select_threshold(_toy_curve([3.0, 1.0, 2.0])) == 0.2


def test_select_threshold_plateau_takes_largest():
    assert select_threshold(_toy_curve([2.0, 1.0, 1.0, 5.0])) == 0.3


def test_select_threshold_constant_curve_takes_max():
    assert select_threshold(_toy_curve([1.5, 1.5, 1.5])) == 0.3


def test_curve_validation_guards():
    with pytest.raises(ValidationError):
        MseCurve(points=(), base_psi=0.0, var_target=0.0, B=4, seed=0)
    bad = (
        MsePoint(0.1, (0, 1), 2.0, 1.0, 0.0, 1.0),
        MsePoint(0.2, (0, 2), 2.0, 1.0, 0.0, 1.0),  # not a subset: grows sideways
    )
    with pytest.raises(ValidationError):
        MseCurve(points=bad, base_psi=2.0, var_target=1.0, B=4, seed=0)


# -- final report -------------------------------------------------------------------


def test_estimate_fs_report_contract():
    data = generate(SCENARIOS["1.1"], n=420, seed=17)
    report = estimate_fs(
        data, grid=ThresholdGrid((0.05, 0.5, 1.0)),
        plan=BootstrapPlan(B=6, seed=17), lambda_grid=(0.0,),
    )
    assert report.method == "fsmr1"
    assert TARGET_ID in report.selected_sites
    diag = report.diagnostics
    assert set(diag) >= {
        "e_star", "curve_digest", "B", "seed", "bootstrap_se", "weights", "lambda_n",
    }
    assert diag["B"] == 6
    assert diag["seed"] == 17
    assert len(diag["curve_digest"]) == 12
    assert diag["bootstrap_se"] >= 0.0
    # the point estimate and SE come from the selected-set refit
    refit = psi_at_threshold(
        diag["e_star"],
        _weights(*diag["weights"]),
        data,
    )
    assert report.psi_hat == refit.psi_hat
    assert report.se == refit.se


def test_estimate_fs_is_deterministic():
    data = generate(SCENARIOS["1.1"], n=400, seed=23)
    kwargs = dict(
        grid=ThresholdGrid((0.1, 1.0)), plan=BootstrapPlan(B=4, seed=23),
        lambda_grid=(0.0,),
    )
    assert estimate_fs(data, **kwargs).to_json() == estimate_fs(data, **kwargs).to_json()


def test_estimate_fs_accepts_precomputed_solution():
    data = generate(SCENARIOS["1.1"], n=400, seed=29)
    cohort = Cohort(data, seed=29)
    solution = federated_weights(cohort, lambda_grid=(0.0,))
    report = estimate_fs(
        cohort, solution=solution,
        grid=ThresholdGrid((0.2, 1.0)), plan=BootstrapPlan(B=4, seed=29),
    )
    assert report.method == "fsmr1"
    assert report.diagnostics["weights"] == [float(v) for v in solution.weights.w]
