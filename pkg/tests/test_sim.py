"""Generative model checks: closed-form truths against quadrature, moments."""

import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from fedcausal.core import IoFailure, RISK_DIFFERENCE, RISK_RATIO, ValidationError
from fedcausal.pfws import ThresholdGrid
from fedcausal.sim import (
    MISSPEC_TYPES,
    SCENARIOS,
    TABLE_COLUMNS,
    MetricsTable,
    ScenarioSpec,
    UnsupportedDgpForm,
    _quota_counts,
    as_generator,
    emit_table,
    gaussian_logit_coefs,
    generate,
    load_scenario,
    oracle_bundle,
    parse_table,
    replicate_boot_seed,
    run_monte_carlo,
    scenario_from_dict,
    site_arm_means,
    thread_budget,
    true_psi,
)


def _quad_arm_means(spec, k):
    m, sd = spec.x_mean[k], math.sqrt(spec.x_var[k])

    def f0(x):
        return spec.mu0(k, x) * norm.pdf(x, m, sd)

    def f1(x):
        return spec.mu0(k, x) * spec.tau(k, x) * norm.pdf(x, m, sd)

    lo, hi = m - 12 * sd, m + 12 * sd
    psi0, _ = integrate.quad(f0, lo, hi)
    psi1, _ = integrate.quad(f1, lo, hi)
    return psi0, psi1


@pytest.mark.parametrize("name", ["1.1", "1.2", "2.2", "2.3"])
@pytest.mark.parametrize("k", [0, 1, 2])
def test_site_arm_means_match_quadrature(name, k):
    spec = SCENARIOS[name]
    closed = site_arm_means(spec, k)
    numeric = _quad_arm_means(spec, k)
    assert np.allclose(closed, numeric, atol=1e-8)


def test_true_psi_reference_values():
    psi, psi0, psi1 = true_psi(SCENARIOS["1.1"])
    assert psi0 == 2.0 and psi1 == 5.0 and psi == 2.5
    # target-site truth is invariant to source-site shifts
    for name in SCENARIOS:
        assert true_psi(SCENARIOS[name])[0] == 2.5
    psi_rd, _, _ = true_psi(SCENARIOS["1.1"], RISK_DIFFERENCE)
    assert psi_rd == 3.0


def test_scenario_registry():
    assert set(SCENARIOS) == {"1.1", "1.2", "2.1", "2.2", "2.3"}
    assert SCENARIOS["1.2"].b_mu == (-10.0, 15.0)
    assert SCENARIOS["2.1"].b_mu == (-10.0, 15.0)
    assert SCENARIOS["2.2"].b_tau == (0.0, 5.0)
    assert SCENARIOS["2.3"].b_tau == (5.0, 5.0)
    for spec in SCENARIOS.values():
        assert spec.shift_mu(0) == 0.0 and spec.shift_tau(0) == 0.0


def test_misspec_registry():
    assert MISSPEC_TYPES["i"].targets == frozenset()
    assert MISSPEC_TYPES["ii"].targets == {"pi:0", "pi:1", "pi:2", "q:1", "q:2"}
    assert MISSPEC_TYPES["iii"].targets == {"pi:2", "mu0:0", "mu0:1", "q:1", "q:2"}
    assert MISSPEC_TYPES["iv"].targets == {"tau"}


def test_generate_shapes_and_determinism():
    spec = SCENARIOS["1.1"]
    data = generate(spec, 2000, seed=123)
    assert data.site_ids == (0, 1, 2)
    assert data.n == 2000
    again = generate(spec, 2000, seed=123)
    for k in data.site_ids:
        assert np.array_equal(data.sites[k].y, again.sites[k].y)
        assert np.array_equal(data.sites[k].x, again.sites[k].x)
    other = generate(spec, 2000, seed=124)
    assert not np.array_equal(data.sites[0].y, other.sites[0].y)


def test_generate_moments():
    spec = SCENARIOS["1.2"]
    data = generate(spec, 60000, seed=7)
    fractions = np.array([data.sites[k].n for k in (0, 1, 2)]) / data.n
    assert np.allclose(fractions, spec.site_probs, atol=0.01)
    for k in (0, 1, 2):
        xk = data.sites[k].x[:, 0]
        assert abs(np.mean(xk) - spec.x_mean[k]) < 0.1
        assert abs(np.var(xk) - spec.x_var[k]) < 0.2
        # treated-arm outcomes track mu0 * tau
        ds = data.sites[k]
        t = ds.a == 1
        resid = ds.y[t] - spec.mu0(k, ds.x[t, 0]) * spec.tau(k, ds.x[t, 0])
        assert abs(np.mean(resid)) < 0.1
        assert abs(np.var(resid) - 1.0) < 0.2
        # empirical treatment rate matches the propensity integral
        assert abs(np.mean(ds.a) - np.mean(spec.propensity(k, ds.x[:, 0]))) < 0.02


def test_generator_coercion():
    gen = as_generator(5)
    assert isinstance(gen, np.random.Generator)
    assert as_generator(gen) is gen
    seq = np.random.SeedSequence(9)
    assert isinstance(as_generator(seq), np.random.Generator)


def test_gaussian_logit_coefs_against_density_ratio():
    coefs = gaussian_logit_coefs(0.1, 2.0, 1.0, 0.5, 2.0, 4.0)
    xs = np.linspace(-3.0, 6.0, 50)
    direct = np.log(
        (0.1 * norm.pdf(xs, 2.0, 1.0)) / (0.5 * norm.pdf(xs, 2.0, 2.0))
    )
    fitted = coefs[0] + coefs[1] * xs + coefs[2] * xs**2
    assert np.allclose(fitted, direct, atol=1e-10)


def test_oracle_bundle_matches_truth_pointwise():
    spec = SCENARIOS["2.2"]
    bundle = oracle_bundle(spec)
    xs = np.linspace(-2.0, 6.0, 40).reshape(-1, 1)
    for k in (0, 1, 2):
        assert np.allclose(
            bundle.propensity[k].predict(xs), spec.propensity(k, xs[:, 0]), atol=1e-12
        )
        assert np.allclose(bundle.mu0[k].predict(xs), spec.mu0(k, xs[:, 0]))
        assert np.allclose(
            bundle.mu1[k].predict(xs),
            spec.mu0(k, xs[:, 0]) * spec.tau(k, xs[:, 0]),
            atol=1e-10,
        )
        assert np.allclose(bundle.cond_var[(1, k)].variance(xs), 1.0)
    # oracle effect function is the target site's
    assert np.allclose(bundle.tau(xs), xs[:, 0])
    for k in (1, 2):
        truth = (
            spec.site_probs[0] * norm.pdf(xs[:, 0], spec.x_mean[0], math.sqrt(spec.x_var[0]))
        ) / (
            spec.site_probs[k] * norm.pdf(xs[:, 0], spec.x_mean[k], math.sqrt(spec.x_var[k]))
        )
        # the bundle clips ratios to [1e-3, 1e3]; compare on the clipped scale
        assert np.allclose(bundle.q(k, xs), np.clip(truth, 1e-3, 1e3), rtol=1e-10)


def test_oracle_site_probabilities_sum_to_one():
    spec = SCENARIOS["1.1"]
    bundle = oracle_bundle(spec)
    xs = np.linspace(-1.0, 5.0, 30).reshape(-1, 1)
    probs = bundle.site_prob(xs, (0, 1, 2))
    total = probs[0] + probs[1] + probs[2]
    assert np.allclose(total, 1.0, atol=1e-12)
    # and they reproduce the true posteriors pr(S=k | X=x)
    dens = {
        k: spec.site_probs[k]
        * norm.pdf(xs[:, 0], spec.x_mean[k], math.sqrt(spec.x_var[k]))
        for k in (0, 1, 2)
    }
    norm_const = dens[0] + dens[1] + dens[2]
    for k in (0, 1, 2):
        assert np.allclose(probs[k], dens[k] / norm_const, rtol=1e-9)


# ---------------------------------------------------------------------------
# scenario validation and config files


def test_scenario_spec_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", site_probs=(0.2, 0.3, 0.4))  # does not sum to 1
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", site_probs=(1.0,))  # no source sites
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", x_var=(1.0, -1.0, 4.0))
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", b_mu=(0.0,))  # one shift per source required
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", x_mean=(2.0, 1.0))
    with pytest.raises(ValidationError):
        ScenarioSpec("bad", sd_y=-0.5)


def test_scenario_from_dict_roundtrip():
    spec = SCENARIOS["2.2"]
    raw = {
        "name": spec.name,
        "b_mu": list(spec.b_mu),
        "b_tau": list(spec.b_tau),
        "site_probs": list(spec.site_probs),
        "x_mean": list(spec.x_mean),
        "x_var": list(spec.x_var),
        "prop_coefs": [list(r) for r in spec.prop_coefs],
        "sd_y": spec.sd_y,
    }
    assert scenario_from_dict(raw) == spec


def test_scenario_from_dict_rejects_unknown_and_missing():
    with pytest.raises(ValidationError, match="unknown scenario fields"):
        scenario_from_dict({"name": "x", "shift": [1.0]})
    with pytest.raises(ValidationError, match="name"):
        scenario_from_dict({"b_mu": [0.0, 0.0]})


def test_load_scenario_toml_and_json(tmp_path):
    toml_text = (
        'name = "custom"\n'
        "b_mu = [-10.0, 15.0]\n"
        "b_tau = [0.0, 5.0]\n"
    )
    p_toml = tmp_path / "case.toml"
    p_toml.write_text(toml_text)
    spec = load_scenario(p_toml)
    assert spec.name == "custom"
    assert spec.b_tau == (0.0, 5.0)
    assert spec.site_probs == (0.1, 0.4, 0.5)  # defaults fill the rest

    p_json = tmp_path / "case.json"
    p_json.write_text('{"name": "custom", "b_mu": [-10.0, 15.0], "b_tau": [0.0, 5.0]}')
    assert load_scenario(p_json) == spec


def test_load_scenario_error_paths(tmp_path):
    with pytest.raises(IoFailure):
        load_scenario(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("name = [unclosed")
    with pytest.raises(ValidationError, match="malformed TOML"):
        load_scenario(bad)
    badj = tmp_path / "bad.json"
    badj.write_text("{not json")
    with pytest.raises(ValidationError, match="malformed JSON"):
        load_scenario(badj)
    odd = tmp_path / "case.yaml"
    odd.write_text("name: x")
    with pytest.raises(ValidationError, match="toml or .json"):
        load_scenario(odd)


# ---------------------------------------------------------------------------
# truth computations


def test_true_psi_quadrature_agrees_with_closed_form():
    for name, spec in SCENARIOS.items():
        for measure in (RISK_RATIO, RISK_DIFFERENCE):
            closed = true_psi(spec, measure)
            quadr = true_psi(spec, measure, method="quadrature")
            for a, b in zip(closed, quadr):
                assert abs(a - b) < 1e-8, (name, measure.kind)


def test_true_psi_degenerate_point_mass():
    deg = ScenarioSpec("deg", x_mean=(1.0, 1.0, 2.0), x_var=(0.0, 4.0, 4.0))
    psi, psi0, psi1 = true_psi(deg)
    assert psi == 1.0 and psi0 == 1.0 and psi1 == 1.0
    with pytest.raises(UnsupportedDgpForm):
        true_psi(deg, method="quadrature")


def test_true_psi_unknown_method():
    with pytest.raises(ValidationError, match="truth method"):
        true_psi(SCENARIOS["1.1"], method="mc")


# ---------------------------------------------------------------------------
# fixed-quota generation


def test_quota_counts_apportionment():
    counts = _quota_counts((0.1, 0.4, 0.5), 997)
    assert counts.tolist() == [100, 399, 498]
    assert counts.sum() == 997
    for n in (1, 7, 503, 1000):
        c = _quota_counts((0.1, 0.4, 0.5), n)
        assert c.sum() == n


def test_generate_fixed_quota_sizes():
    spec = SCENARIOS["1.1"]
    data = generate(spec, 1000, 3, fixed_quota=True)
    sizes = {k: ds.n for k, ds in data.sites.items()}
    assert sizes == {0: 100, 1: 400, 2: 500}
    # rows within a site still vary with the seed
    other = generate(spec, 1000, 4, fixed_quota=True)
    assert not np.array_equal(data.sites[0].y, other.sites[0].y)


# ---------------------------------------------------------------------------
# Monte Carlo runner


def test_run_monte_carlo_metrics_and_identity():
    table = run_monte_carlo("1.1", M=4, seed=11, n=600)
    assert [r.estimator for r in table.rows] == ["drt", "mr1", "mr2"]
    truth = true_psi(SCENARIOS["1.1"])[0]
    for row in table.rows:
        assert row.scenario == "1.1" and row.misspec == "i"
        assert row.M == 4
        assert abs(row.bias) < 1.0
        assert abs(row.mse - (row.bias**2 + row.sd**2 * (row.M - 1) / row.M)) <= 1e-10
    assert table.failures == ()
    assert table.attempted == 4
    assert truth == 2.5


def test_run_monte_carlo_reproducible_bytes():
    kwargs = dict(M=3, seed=7, n=500, estimators=("drt", "mr1"))
    a = run_monte_carlo("1.2", **kwargs)
    b = run_monte_carlo("1.2", **kwargs)
    assert emit_table(a) == emit_table(b)
    assert a.rows == b.rows


def test_run_monte_carlo_validates_inputs():
    with pytest.raises(ValidationError, match="valid ids"):
        run_monte_carlo("9.9", M=2, seed=0)
    with pytest.raises(ValidationError, match="M >= 2"):
        run_monte_carlo("1.1", M=1, seed=0)
    with pytest.raises(ValidationError, match="unknown estimator"):
        run_monte_carlo("1.1", M=2, seed=0, estimators=("drt", "ipw"))
    with pytest.raises(ValidationError, match="at least one"):
        run_monte_carlo("1.1", M=2, seed=0, estimators=())
    with pytest.raises(ValidationError, match="misspec"):
        run_monte_carlo("1.1", M=2, seed=0, misspec="v")


def test_run_monte_carlo_quarantines_failures():
    # n=40 leaves the target site with a handful of rows; some replicate
    # fits must fail and the runner reports them without dying
    table = run_monte_carlo("1.2", M=6, seed=1, n=40)
    assert table.attempted == 6
    assert len(table.failures) > 0
    for rec in table.failures:
        assert 0 <= rec.replicate < 6
        assert rec.estimator in ("drt", "mr1", "mr2")
        assert ": " in rec.error
    by_name = {r.estimator: r for r in table.rows}
    for name, row in by_name.items():
        lost = sum(1 for f in table.failures if f.estimator == name)
        assert row.M == 6 - lost
    assert 0.0 < table.failure_fraction() <= 1.0


def test_run_monte_carlo_custom_misspec_label():
    table = run_monte_carlo(
        "1.1", M=2, seed=5, n=500, estimators=("drt",),
        misspec=MISSPEC_TYPES["ii"],
    )
    assert table.rows[0].misspec == "custom"
    same = run_monte_carlo("1.1", M=2, seed=5, n=500, estimators=("drt",), misspec="ii")
    assert same.rows[0].misspec == "ii"
    assert same.rows[0].bias == table.rows[0].bias


def test_run_monte_carlo_federated_estimators_smoke():
    table = run_monte_carlo(
        "2.2", M=2, seed=3, n=500,
        estimators=("drt", "fwmr1", "fsmr1"),
        B=6, lambda_grid=(0.0,),
        threshold_grid=ThresholdGrid((0.05, 0.5, 1.0)),
    )
    assert [r.estimator for r in table.rows] == ["drt", "fwmr1", "fsmr1"]
    assert table.failures == ()
    for row in table.rows:
        assert math.isfinite(row.mse)


def test_run_monte_carlo_parallel_matches_serial():
    kwargs = dict(M=3, seed=9, n=400, estimators=("drt", "mr1"))
    serial = run_monte_carlo("1.1", n_jobs=1, **kwargs)
    parallel = run_monte_carlo("1.1", n_jobs=2, **kwargs)
    assert emit_table(serial) == emit_table(parallel)


def test_thread_budget_env(monkeypatch):
    monkeypatch.delenv("FEDCAUSAL_THREADS", raising=False)
    assert thread_budget() == 1
    monkeypatch.setenv("FEDCAUSAL_THREADS", "4")
    assert thread_budget() == 4
    assert thread_budget(2) == 2  # explicit request wins
    monkeypatch.setenv("FEDCAUSAL_THREADS", "junk")
    assert thread_budget() == 1


def test_replicate_boot_seeds_are_distinct():
    seeds = [replicate_boot_seed(123, i) for i in range(50)]
    assert len(set(seeds)) == 50


# ---------------------------------------------------------------------------
# table emission


def test_emit_table_csv_roundtrip():
    table = run_monte_carlo("1.1", M=2, seed=2, n=500, estimators=("drt",))
    text = emit_table(table, "csv")
    back = parse_table(text)
    assert back.rows == table.rows


def test_emit_table_markdown_shape():
    table = run_monte_carlo("1.1", M=2, seed=2, n=500, estimators=("drt", "mr1"))
    text = emit_table(table, "markdown")
    lines = text.strip().splitlines()
    assert len(lines) == 2 + len(table.rows)  # header, rule, one line per row
    assert lines[0].startswith("| scenario | estimator |")
    assert all(ln.startswith("|") and ln.endswith("|") for ln in lines)


def test_emit_table_empty_is_header_only():
    empty = MetricsTable(rows=())
    assert emit_table(empty) == ",".join(TABLE_COLUMNS) + "\n"
    md = emit_table(empty, "markdown")
    assert len(md.strip().splitlines()) == 2


def test_emit_table_writes_file(tmp_path):
    table = run_monte_carlo("1.1", M=2, seed=2, n=500, estimators=("drt",))
    out = tmp_path / "metrics.csv"
    text = emit_table(table, "csv", path=out)
    assert out.read_text(encoding="utf-8") == text
    with pytest.raises(IoFailure):
        emit_table(table, "csv", path=tmp_path / "no" / "dir" / "metrics.csv")


def test_emit_table_rejects_unknown_format():
    with pytest.raises(ValidationError, match="csv or markdown"):
        emit_table(MetricsTable(rows=()), "tsv")


def test_parse_table_rejects_bad_input():
    with pytest.raises(ValidationError, match="header"):
        parse_table("bias,sd\n")
    good_header = ",".join(TABLE_COLUMNS)
    with pytest.raises(ValidationError, match="fields"):
        parse_table(good_header + "\n1.1,drt,i,0.0\n")
