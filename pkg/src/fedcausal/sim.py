"""Monte Carlo study: generative model, scenario registry, runner, metrics.

The generative model has one covariate and three sites.  Site membership is
multinomial; covariates are site-specific Gaussians; treatment follows a
site-specific logistic propensity; outcomes are Gaussian around a
multiplicative mean structure Y(1) ~ mu0(x) tau(x), Y(0) ~ mu0(x), where
mu0 and tau are linear with site-specific intercept shifts.  The target site
has both shifts pinned at zero, so scenarios move only the source sites:
mean shifts break shared outcome regressions while preserving a shared
effect function, and effect shifts break transportability outright.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os

try:
    import tomllib
except ModuleNotFoundError:  # 3.10: same parser, backport name
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import quad
from scipy.special import expit

from .core import (
    CausalMeasure,
    EstimateReport,
    FedcausalError,
    IoFailure,
    MultiSiteData,
    RISK_RATIO,
    SiteDataset,
    TARGET_ID,
    ValidationError,
    measure_apply,
)
from .estimators import estimate_measure
from .federation import Cohort, estimate_fw
from .nuisance import (
    DEFAULT_CONFIG,
    DensityRatioModel,
    GlmModel,
    MisspecSpec,
    NuisanceBundle,
    NuisanceConfig,
    TauModel,
    VarianceModel,
)
from .pfws import BootstrapPlan, ThresholdGrid, estimate_fs


class UnsupportedDgpForm(FedcausalError):
    pass


SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation setting: site mixture, covariate laws, shift vectors."""

    name: str
    b_mu: Tuple[float, float] = (0.0, 0.0)  # source-site mu0 intercept shifts
    b_tau: Tuple[float, float] = (0.0, 0.0)  # source-site effect shifts
    site_probs: Tuple[float, float, float] = (0.1, 0.4, 0.5)
    x_mean: Tuple[float, float, float] = (2.0, 1.0, 2.0)
    x_var: Tuple[float, float, float] = (1.0, 4.0, 4.0)
    # propensity logit coefficients, intercept first
    prop_coefs: Tuple[Tuple[float, float], ...] = ((-1.0, 0.5), (-1.0, 0.8), (-1.0, 0.3))
    sd_y: float = 1.0

    def __post_init__(self) -> None:
        k = len(self.site_probs)
        if k < 2:
            raise ValidationError("a scenario needs a target site and at least one source")
        if abs(sum(self.site_probs) - 1.0) > 1e-9 or min(self.site_probs) <= 0.0:
            raise ValidationError("site_probs must be positive and sum to 1")
        if len(self.x_mean) != k or len(self.x_var) != k or len(self.prop_coefs) != k:
            raise ValidationError("x_mean, x_var and prop_coefs must have one entry per site")
        if len(self.b_mu) != k - 1 or len(self.b_tau) != k - 1:
            raise ValidationError("b_mu and b_tau must have one entry per source site")
        # 0 is allowed: a point-mass covariate law still has closed-form moments
        if min(self.x_var) < 0.0:
            raise ValidationError("x_var entries must be nonnegative")
        if self.sd_y < 0.0:
            raise ValidationError("sd_y must be nonnegative")

    @property
    def n_sites(self) -> int:
        return len(self.site_probs)

    def shift_mu(self, k: int) -> float:
        return 0.0 if k == TARGET_ID else self.b_mu[k - 1]

    def shift_tau(self, k: int) -> float:
        return 0.0 if k == TARGET_ID else self.b_tau[k - 1]

    def mu0(self, k: int, x: np.ndarray) -> np.ndarray:
        return x + self.shift_mu(k)

    def tau(self, k: int, x: np.ndarray) -> np.ndarray:
        return x + self.shift_tau(k)

    def propensity(self, k: int, x: np.ndarray) -> np.ndarray:
        b0, b1 = self.prop_coefs[k]
        return expit(b0 + b1 * x)


SCENARIOS: Dict[str, ScenarioSpec] = {
    # shared effect function AND shared outcome regressions
    "1.1": ScenarioSpec("1.1", b_mu=(0.0, 0.0), b_tau=(0.0, 0.0)),
    # shared effect function only: source outcome means shifted
    "1.2": ScenarioSpec("1.2", b_mu=(-10.0, 15.0), b_tau=(0.0, 0.0)),
    # weighting-selection settings keep the mean shifts and vary the effect shifts
    "2.1": ScenarioSpec("2.1", b_mu=(-10.0, 15.0), b_tau=(0.0, 0.0)),
    "2.2": ScenarioSpec("2.2", b_mu=(-10.0, 15.0), b_tau=(0.0, 5.0)),
    "2.3": ScenarioSpec("2.3", b_mu=(-10.0, 15.0), b_tau=(5.0, 5.0)),
}

# Named misspecification patterns used across the study.  Site indices refer
# to the generative model's 0-based site ids (0 = target).
MISSPEC_TYPES: Dict[str, MisspecSpec] = {
    "i": MisspecSpec(),
    "ii": MisspecSpec(targets={"pi:0", "pi:1", "pi:2", "q:1", "q:2"}),
    "iii": MisspecSpec(targets={"pi:2", "mu0:0", "mu0:1", "q:1", "q:2"}),
    "iv": MisspecSpec(targets={"tau"}),
}


def _quota_counts(probs: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder apportionment of n rows over probs."""
    raw = np.asarray(probs) * n
    counts = np.floor(raw).astype(int)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate(
    spec: ScenarioSpec, n: int, seed: SeedLike, fixed_quota: bool = False
) -> MultiSiteData:
    """Draw one multi-site dataset of n rows total.

    Site sizes are multinomial by default; fixed_quota pins them to the
    expected counts (largest-remainder rounding) for variance-reduction runs.
    """
    rng = as_generator(seed)
    if fixed_quota:
        s = np.repeat(np.arange(spec.n_sites), _quota_counts(spec.site_probs, n))
    else:
        s = rng.choice(spec.n_sites, size=n, p=spec.site_probs)
    sites = {}
    for k in range(spec.n_sites):
        m = int(np.sum(s == k))
        x = rng.normal(spec.x_mean[k], math.sqrt(spec.x_var[k]), size=m)
        a = (rng.random(m) < spec.propensity(k, x)).astype(int)
        mu0 = spec.mu0(k, x)
        mean = np.where(a == 1, mu0 * spec.tau(k, x), mu0)
        y = mean + spec.sd_y * rng.normal(size=m)
        sites[k] = SiteDataset(k, y, a, x.reshape(-1, 1))
    return MultiSiteData(sites)


def site_arm_means(spec: ScenarioSpec, k: int) -> Tuple[float, float]:
    """(E[Y(0)|S=k], E[Y(1)|S=k]) in closed form.

    E[(X+b_mu)(X+b_tau)] = var + mean^2 + (b_mu+b_tau) mean + b_mu b_tau
    for X Gaussian.
    """
    m, v = spec.x_mean[k], spec.x_var[k]
    bm, bt = spec.shift_mu(k), spec.shift_tau(k)
    psi0 = m + bm
    psi1 = v + m * m + (bm + bt) * m + bm * bt
    return psi0, psi1


def _quadrature_arm_means(spec: ScenarioSpec) -> Tuple[float, float]:
    m, v = spec.x_mean[TARGET_ID], spec.x_var[TARGET_ID]
    if v <= 0.0:
        raise UnsupportedDgpForm(
            "target covariate law is a point mass; nothing to integrate"
        )
    sd = math.sqrt(v)

    def density(x: float) -> float:
        return math.exp(-0.5 * ((x - m) / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))

    lo, hi = m - 12.0 * sd, m + 12.0 * sd
    psi0, _ = quad(
        lambda x: spec.mu0(TARGET_ID, x) * density(x),
        lo, hi, epsabs=1e-10, epsrel=1e-10,
    )
    psi1, _ = quad(
        lambda x: spec.mu0(TARGET_ID, x) * spec.tau(TARGET_ID, x) * density(x),
        lo, hi, epsabs=1e-10, epsrel=1e-10,
    )
    return psi0, psi1


def true_psi(
    spec: ScenarioSpec,
    measure: CausalMeasure = RISK_RATIO,
    method: str = "closed",
) -> Tuple[float, float, float]:
    """(psi, psi0, psi1) for the target site.

    "closed" uses the exact normal moments of the linear DGP family; the
    "quadrature" cross-check integrates the arm means against the target
    covariate density and agrees to 1e-8.
    """
    if method == "closed":
        psi0, psi1 = site_arm_means(spec, TARGET_ID)
    elif method == "quadrature":
        psi0, psi1 = _quadrature_arm_means(spec)
    else:
        raise ValidationError(f"unknown truth method {method!r}")
    return measure_apply(measure, psi0, psi1), psi0, psi1


def gaussian_logit_coefs(
    p_num: float, m_num: float, v_num: float,
    p_den: float, m_den: float, v_den: float,
) -> np.ndarray:
    """Exact quadratic coefficients of log[p_num N(m_num,v_num)/(p_den N(m_den,v_den))]."""
    const = (
        math.log(p_num / p_den)
        + 0.5 * math.log(v_den / v_num)
        - m_num**2 / (2.0 * v_num)
        + m_den**2 / (2.0 * v_den)
    )
    lin = m_num / v_num - m_den / v_den
    quad = 1.0 / (2.0 * v_den) - 1.0 / (2.0 * v_num)
    return np.array([const, lin, quad])


def oracle_bundle(
    spec: ScenarioSpec,
    measure: CausalMeasure = RISK_RATIO,
    config: NuisanceConfig = DEFAULT_CONFIG,
) -> NuisanceBundle:
    """True nuisance functions wrapped as fitted models.

    The effect function and the pooled outcome regressions are the target
    site's: they are the functions the shared-structure assumptions declare
    common, and they equal every site's when the corresponding shifts vanish.
    """
    sites = tuple(range(spec.n_sites))
    propensity = {}
    mu0 = {}
    mu1 = {}
    cond_var = {}
    density_ratio = {}
    for k in sites:
        b0, b1 = spec.prop_coefs[k]
        propensity[k] = GlmModel(
            "logistic", np.array([b0, b1]), "identity", clip=config.propensity_clip
        )
        bm, bt = spec.shift_mu(k), spec.shift_tau(k)
        mu0[k] = GlmModel("linear", np.array([bm, 1.0]), "identity")
        # (x + bm)(x + bt) expands over [1, x, x^2]
        mu1[k] = GlmModel("linear", np.array([bm * bt, bm + bt, 1.0]), "quadratic")
        cond_var[(0, k)] = VarianceModel("constant", value=spec.sd_y**2)
        cond_var[(1, k)] = VarianceModel("constant", value=spec.sd_y**2)
        if k != TARGET_ID:
            coefs = gaussian_logit_coefs(
                spec.site_probs[TARGET_ID], spec.x_mean[TARGET_ID], spec.x_var[TARGET_ID],
                spec.site_probs[k], spec.x_mean[k], spec.x_var[k],
            )
            density_ratio[k] = DensityRatioModel(
                k=k,
                model=GlmModel("logistic", coefs, "quadratic"),
                prior_correction=math.log(
                    spec.site_probs[TARGET_ID] / spec.site_probs[k]
                ),
                clip=config.density_clip,
            )
    tau_model = TauModel(
        coef=np.array([0.0, 1.0]), feature_map="identity",
        measure_kind=measure.kind, weighting="mu0_squared",
    )
    return NuisanceBundle(
        measure=measure, sites=sites,
        propensity=propensity, mu0=mu0, mu1=mu1,
        cond_var=cond_var, density_ratio=density_ratio,
        tau_model=tau_model,
        mu1_pooled=mu1[TARGET_ID], mu0_pooled=mu0[TARGET_ID],
        config=config,
    )


# ---------------------------------------------------------------------------
# scenario config files


_TUPLE_FIELDS = ("b_mu", "b_tau", "site_probs", "x_mean", "x_var")


def scenario_from_dict(raw: Dict[str, object]) -> ScenarioSpec:
    known = {f.name for f in dataclasses.fields(ScenarioSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown scenario fields: {', '.join(unknown)}")
    if "name" not in raw:
        raise ValidationError("scenario config needs a name")
    kwargs: Dict[str, object] = {"name": str(raw["name"])}
    for key in _TUPLE_FIELDS:
        if key in raw:
            kwargs[key] = tuple(float(v) for v in raw[key])  # type: ignore[union-attr]
    if "prop_coefs" in raw:
        kwargs["prop_coefs"] = tuple(
            tuple(float(v) for v in row) for row in raw["prop_coefs"]  # type: ignore[union-attr]
        )
    if "sd_y" in raw:
        kwargs["sd_y"] = float(raw["sd_y"])  # type: ignore[arg-type]
    return ScenarioSpec(**kwargs)  # type: ignore[arg-type]


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    """Read a declarative scenario file (.toml or .json)."""
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read scenario file {p}: {exc}") from exc
    if p.suffix == ".toml":
        try:
            raw = tomllib.loads(blob.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"malformed TOML in {p}: {exc}") from exc
    elif p.suffix == ".json":
        try:
            raw = json.loads(blob.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"malformed JSON in {p}: {exc}") from exc
    else:
        raise ValidationError(f"scenario files must end in .toml or .json, got {p.name}")
    if not isinstance(raw, dict):
        raise ValidationError(f"scenario file {p} must hold a table of fields")
    return scenario_from_dict(raw)


# ---------------------------------------------------------------------------
# Monte Carlo runner and metrics


ESTIMATOR_NAMES = ("drt", "mr1", "mr2", "fwmr1", "fsmr1")

TABLE_COLUMNS = (
    "scenario", "estimator", "misspec",
    "bias", "sd", "mean_se", "mse", "coverage", "ci_len", "M",
)


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    estimator: str
    misspec: str
    bias: float
    sd: float
    mean_se: float
    mse: float
    coverage: float
    ci_len: float
    M: int


@dataclass(frozen=True)
class FailureRecord:
    replicate: int
    estimator: str
    error: str


@dataclass(frozen=True)
class MetricsTable:
    rows: Tuple[MetricsRow, ...]
    failures: Tuple[FailureRecord, ...] = ()
    attempted: int = 0

    def failure_fraction(self) -> float:
        total = self.attempted * len(self.rows)
        return len(self.failures) / total if total else 0.0


def thread_budget(n_jobs: Optional[int] = None) -> int:
    """Explicit request wins; FEDCAUSAL_THREADS caps the default of 1."""
    if n_jobs is not None:
        return max(1, int(n_jobs))
    try:
        return max(1, int(os.environ.get("FEDCAUSAL_THREADS", "1")))
    except ValueError:
        return 1


def replicate_boot_seed(seed: int, i: int) -> int:
    """Bootstrap seed stream for replicate i, disjoint from the data stream."""
    ss = np.random.SeedSequence(seed, spawn_key=(3, i))
    return int(ss.generate_state(1)[0])


def _run_estimator(
    name: str,
    data: MultiSiteData,
    *,
    measure: CausalMeasure,
    config: NuisanceConfig,
    misspec: MisspecSpec,
    B: int,
    lambda_grid: Optional[Sequence[float]],
    threshold_grid: Optional[ThresholdGrid],
    fast_bootstrap: bool,
    seed: int,
    transport=None,
) -> EstimateReport:
    if name in ("drt", "mr1", "mr2"):
        return estimate_measure(data, measure, mode=name, config=config, misspec=misspec)
    if name == "fwmr1":
        cohort = Cohort(data, transport=transport, config=config, measure=measure, seed=seed)
        return estimate_fw(cohort, B=B, lambda_grid=lambda_grid, misspec=misspec)
    if name == "fsmr1":
        cohort = Cohort(data, transport=transport, config=config, measure=measure, seed=seed)
        return estimate_fs(
            cohort, measure,
            grid=threshold_grid,
            plan=BootstrapPlan(B=B, seed=seed),
            lambda_grid=lambda_grid,
            fast=fast_bootstrap,
            misspec=misspec,
        )
    raise ValidationError(
        f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}"
    )


def _one_replicate(
    spec: ScenarioSpec,
    n: int,
    i: int,
    data_seed: np.random.SeedSequence,
    boot_seed: int,
    names: Tuple[str, ...],
    measure: CausalMeasure,
    config: NuisanceConfig,
    misspec: MisspecSpec,
    B: int,
    lambda_grid: Optional[Tuple[float, ...]],
    threshold_grid: Optional[ThresholdGrid],
    fast_bootstrap: bool,
) -> Dict[str, Union[EstimateReport, FailureRecord]]:
    data = generate(spec, n, data_seed)
    out: Dict[str, Union[EstimateReport, FailureRecord]] = {}
    for name in names:
        try:
            out[name] = _run_estimator(
                name, data,
                measure=measure, config=config, misspec=misspec,
                B=B, lambda_grid=lambda_grid, threshold_grid=threshold_grid,
                fast_bootstrap=fast_bootstrap, seed=boot_seed,
            )
        except Exception as exc:  # quarantined, reported in the table
            out[name] = FailureRecord(i, name, f"{type(exc).__name__}: {exc}")
    return out


def run_monte_carlo(
    scenario: Union[str, ScenarioSpec],
    M: int,
    seed: int,
    *,
    n: int = 1000,
    estimators: Sequence[str] = ("drt", "mr1", "mr2"),
    misspec: Union[str, MisspecSpec] = "i",
    measure: CausalMeasure = RISK_RATIO,
    config: NuisanceConfig = DEFAULT_CONFIG,
    B: int = 200,
    lambda_grid: Optional[Sequence[float]] = None,
    threshold_grid: Optional[ThresholdGrid] = None,
    fast_bootstrap: bool = False,
    n_jobs: Optional[int] = None,
) -> MetricsTable:
    """M independent draw-estimate-report runs, aggregated per estimator.

    Failures inside a replicate are quarantined: counted, excluded from the
    metrics, and returned on the table. Deterministic given (scenario, M,
    seed); replicate RNG streams are derived from the master seed and never
    overlap, so the parallel and serial schedules agree.
    """
    if isinstance(scenario, str):
        if scenario not in SCENARIOS:
            raise ValidationError(
                f"unknown scenario {scenario!r}; valid ids: {', '.join(sorted(SCENARIOS))}"
            )
        spec = SCENARIOS[scenario]
    else:
        spec = scenario
    if M < 2:
        raise ValidationError("Monte Carlo needs M >= 2")
    names = []
    for name in estimators:
        if name not in ESTIMATOR_NAMES:
            raise ValidationError(
                f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}"
            )
        if name not in names:
            names.append(name)
    if not names:
        raise ValidationError("at least one estimator is required")
    names = tuple(names)
    if isinstance(misspec, str):
        if misspec not in MISSPEC_TYPES:
            raise ValidationError(
                f"unknown misspec type {misspec!r}; valid: {', '.join(MISSPEC_TYPES)}"
            )
        label, ms = misspec, MISSPEC_TYPES[misspec]
    else:
        label, ms = ("i" if not misspec.targets else "custom"), misspec
    grid = tuple(float(v) for v in lambda_grid) if lambda_grid is not None else None

    truth = true_psi(spec, measure)[0]
    data_seeds = np.random.SeedSequence(seed).spawn(M)
    args = [
        (
            spec, n, i, data_seeds[i], replicate_boot_seed(seed, i),
            names, measure, config, ms, B, grid, threshold_grid, fast_bootstrap,
        )
        for i in range(M)
    ]
    jobs = thread_budget(n_jobs)
    if jobs == 1:
        results = [_one_replicate(*a) for a in args]
    else:
        results = Parallel(n_jobs=jobs)(delayed(_one_replicate)(*a) for a in args)

    rows = []
    failures: List[FailureRecord] = []
    for name in names:
        reports = []
        for rep in results:
            got = rep[name]
            if isinstance(got, FailureRecord):
                failures.append(got)
            else:
                reports.append(got)
        m = len(reports)
        if m >= 2:
            vals = np.array([r.psi_hat for r in reports])
            bias = float(np.mean(vals)) - truth
            sd = float(np.std(vals, ddof=1))
            mse = float(np.mean((vals - truth) ** 2))
            row = MetricsRow(
                scenario=spec.name, estimator=name, misspec=label,
                bias=bias, sd=sd,
                mean_se=float(np.mean([r.se for r in reports])),
                mse=mse,
                coverage=float(np.mean([r.covers(truth) for r in reports])),
                ci_len=float(np.mean([r.ci_length for r in reports])),
                M=m,
            )
            gap = abs(row.mse - (row.bias**2 + row.sd**2 * (m - 1) / m))
            if gap > 1e-10 * max(1.0, row.mse):
                raise FedcausalError(
                    f"metrics identity violated for {name}: gap {gap!r}"
                )
        else:
            nan = float("nan")
            row = MetricsRow(spec.name, name, label, nan, nan, nan, nan, nan, nan, m)
        rows.append(row)
    return MetricsTable(tuple(rows), tuple(failures), attempted=M)


def _format_cell(value, fmt: str) -> str:
    if isinstance(value, float):
        return repr(value) if fmt == "csv" else f"{value:.6g}"
    return str(value)


def emit_table(table: MetricsTable, fmt: str = "csv", path=None) -> str:
    """Render a metrics table; column order is fixed for downstream diffs."""
    if fmt not in ("csv", "markdown"):
        raise ValidationError(f"format must be csv or markdown, got {fmt!r}")
    lines = []
    if fmt == "csv":
        lines.append(",".join(TABLE_COLUMNS))
        for row in table.rows:
            lines.append(
                ",".join(_format_cell(getattr(row, c), "csv") for c in TABLE_COLUMNS)
            )
    else:
        lines.append("| " + " | ".join(TABLE_COLUMNS) + " |")
        lines.append("|" + "|".join([" --- "] * len(TABLE_COLUMNS)) + "|")
        for row in table.rows:
            cells = [_format_cell(getattr(row, c), "md") for c in TABLE_COLUMNS]
            lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if path is not None:
        try:
            Path(path).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write table to {path}: {exc}") from exc
    return text


def parse_table(text: str) -> MetricsTable:
    """Inverse of emit_table's csv mode (rows only; failures are not serialized)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ",".join(TABLE_COLUMNS):
        raise ValidationError("metrics csv must start with the standard header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(TABLE_COLUMNS):
            raise ValidationError(f"metrics csv row has {len(parts)} fields: {ln!r}")
        rows.append(MetricsRow(
            scenario=parts[0], estimator=parts[1], misspec=parts[2],
            bias=float(parts[3]), sd=float(parts[4]), mean_se=float(parts[5]),
            mse=float(parts[6]), coverage=float(parts[7]), ci_len=float(parts[8]),
            M=int(parts[9]),
        ))
    return MetricsTable(tuple(rows))
