"""Threshold selection over federated weights by bootstrap MSE.

Given solved blending weights, each threshold e keeps the sources whose
weight reaches e and refits the multiply robust estimator on that subset.
A stratified bootstrap prices every distinct selection set by the proxy

    MSE(e) = (psi_e - psi<0>)^2 + 2 cov(psi_e, psi<0>) - Var(psi<0>)

against the target-only estimator psi<0>; the largest threshold attaining
the minimal proxy wins, and the final report is the refit on its selection
set with the usual influence-function standard error (the bootstrap SE is
kept as a diagnostic).

Selection sets are fixed from the original-data weights; bootstrap
replicates refit nuisances and estimates on the resampled rows but do not
re-threshold.  This keeps duplicate selection sets exactly shared across
the grid and makes the empty-selection identity MSE(e) = Var(psi<0>) hold
bit for bit, since that entry's replicate draws are the target-only draws
themselves.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    CausalMeasure,
    EstimateReport,
    MultiSiteData,
    RISK_RATIO,
    TARGET_ID,
    ValidationError,
    resample_site,
)
from .federation import (
    Cohort,
    FederatedWeights,
    WeightSolution,
    as_cohort,
    federated_weights,
)
from .nuisance import DEFAULT_CONFIG, MisspecSpec, NO_MISSPEC, NuisanceConfig


@dataclass(frozen=True)
class ThresholdGrid:
    """Strictly increasing thresholds in (0, 1]."""

    values: Tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValidationError("threshold grid is empty")
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ValidationError("thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValidationError("thresholds must be strictly increasing")
        object.__setattr__(self, "values", vals)


def default_threshold_grid() -> ThresholdGrid:
    return ThresholdGrid(tuple(round(0.05 * (i + 1), 2) for i in range(20)))


@dataclass(frozen=True)
class BootstrapPlan:
    """Replicate count and seed; resamples preserve each site's n."""

    B: int
    seed: int = 0
    scheme: str = "site_stratified"

    def __post_init__(self):
        if self.B < 2:
            raise ValidationError("bootstrap needs B >= 2")
        if self.scheme != "site_stratified":
            raise ValidationError(f"unknown bootstrap scheme {self.scheme!r}")


def bootstrap_replicate(data: MultiSiteData, plan: BootstrapPlan, b: int) -> MultiSiteData:
    """The b-th stratified resample; identical to the sites' own streams."""
    if not 0 <= b < plan.B:
        raise ValidationError(f"replicate index {b} outside [0, {plan.B})")
    return MultiSiteData({
        k: resample_site(ds, plan.seed, b) for k, ds in data.sites.items()
    })


@dataclass(frozen=True)
class MsePoint:
    e: float
    selected_sites: Tuple[int, ...]
    psi_e: float
    mse_hat: float
    cov_hat: float
    var_target: float


@dataclass(frozen=True)
class MseCurve:
    """Bootstrap MSE proxy per threshold, plus the shared base quantities."""

    points: Tuple[MsePoint, ...]
    base_psi: float
    var_target: float
    B: int
    seed: int
    approximate: bool = False

    def __post_init__(self):
        if not self.points:
            raise ValidationError("curve has no points")
        prev: Optional[Tuple[int, ...]] = None
        for p in self.points:
            if TARGET_ID not in p.selected_sites:
                raise ValidationError("every selection set must keep the target")
            if prev is not None and not set(p.selected_sites) <= set(prev):
                raise ValidationError("selection sets must shrink as e grows")
            prev = p.selected_sites

    def to_csv(self) -> str:
        lines = ["e,selected,psi,mse_hat"]
        for p in self.points:
            selected = "|".join(str(k) for k in p.selected_sites)
            lines.append(f"{p.e!r},{selected},{p.psi_e!r},{p.mse_hat!r}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:12]


def selection_set(
    weights: Union[FederatedWeights, np.ndarray],
    source_ids: Sequence[int],
    e: float,
) -> Tuple[int, ...]:
    """Sites kept at threshold e: the target plus sources with weight >= e."""
    w = weights.w if isinstance(weights, FederatedWeights) else np.asarray(weights)
    if w.shape[0] != len(source_ids) + 1:
        raise ValidationError(
            f"weight vector has {w.shape[0]} entries for {len(source_ids)} sources"
        )
    kept = tuple(k for i, k in enumerate(sorted(source_ids)) if w[i + 1] >= e)
    return (TARGET_ID,) + kept


def _set_estimate(cohort: Cohort, sites: Tuple[int, ...], ctx: str,
                  bundle=None, replicate: Optional[int] = None,
                  misspec: MisspecSpec = NO_MISSPEC) -> EstimateReport:
    mode = "drt" if sites == (TARGET_ID,) else "mr1"
    return cohort.estimate(
        mode=mode, sites=sites, bundle=bundle, misspec=misspec,
        replicate=replicate, ctx=ctx,
    )


def psi_at_threshold(
    e: float,
    weights: Union[FederatedWeights, WeightSolution],
    data,
    measure: CausalMeasure = RISK_RATIO,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    misspec: MisspecSpec = NO_MISSPEC,
) -> EstimateReport:
    """Refit on the sites whose weight reaches e (target always kept)."""
    if not 0.0 < e <= 1.0:
        raise ValidationError("threshold must lie in (0, 1]")
    if isinstance(weights, WeightSolution):
        weights = weights.weights
    cohort = as_cohort(data, transport, config, measure)
    sites = selection_set(weights, cohort.source_ids, e)
    return _set_estimate(cohort, sites, ctx=f"orig:thresh:{e!r}", misspec=misspec)


def _resolve_plan(cohort: Cohort, plan: Optional[BootstrapPlan]) -> BootstrapPlan:
    if plan is None:
        return BootstrapPlan(B=200, seed=cohort.seed)
    if plan.seed != cohort.seed:
        raise ValidationError(
            f"plan seed {plan.seed} does not match cohort seed {cohort.seed}; "
            "site resample streams are keyed by the cohort seed"
        )
    return plan


def _cohort_for(data, transport, config, measure,
                plan: Optional[BootstrapPlan], seed: int) -> Cohort:
    if isinstance(data, Cohort):
        return data
    return Cohort(
        data, transport=transport, config=config, measure=measure,
        seed=plan.seed if plan is not None else seed,
    )


def _curve_artifacts(
    grid: ThresholdGrid,
    plan: BootstrapPlan,
    weights: FederatedWeights,
    cohort: Cohort,
    fast: bool,
    misspec: MisspecSpec = NO_MISSPEC,
) -> Tuple[MseCurve, Dict[Tuple[int, ...], EstimateReport], Dict[Tuple[int, ...], float]]:
    base_set = (TARGET_ID,)
    sets_by_e = {
        e: selection_set(weights, cohort.source_ids, e) for e in grid.values
    }
    distinct: List[Tuple[int, ...]] = []
    for e in grid.values:
        if sets_by_e[e] not in distinct:
            distinct.append(sets_by_e[e])
    if base_set not in distinct:
        distinct.append(base_set)  # the reference estimator is always priced

    def ctx_name(tag: str, sites: Tuple[int, ...]) -> str:
        return f"fs:{tag}:" + "|".join(str(k) for k in sites)

    reports: Dict[Tuple[int, ...], EstimateReport] = {}
    bundles: Dict[Tuple[int, ...], object] = {}
    for sites in distinct:
        if fast:
            bundles[sites] = cohort.fit_bundle(sites, misspec=misspec, need_tau=True)
        reports[sites] = _set_estimate(
            cohort, sites, ctx=ctx_name("orig", sites), bundle=bundles.get(sites),
            misspec=misspec,
        )

    draws = {sites: np.empty(plan.B) for sites in distinct}
    for b in range(plan.B):
        for sites in distinct:
            rep = _set_estimate(
                cohort, sites, ctx=ctx_name(f"b{b}", sites),
                bundle=bundles.get(sites), replicate=b, misspec=misspec,
            )
            draws[sites][b] = rep.psi_hat
        cohort.release(f"fs:b{b}:", replicate=b)

    base = draws[base_set]
    base_mean = float(np.mean(base))
    dev_base = base - base_mean

    def covariance(arr: np.ndarray) -> float:
        return float(np.sum((arr - float(np.mean(arr))) * dev_base)) / (plan.B - 1)

    var_target = covariance(base)
    base_psi = reports[base_set].psi_hat
    stats: Dict[Tuple[int, ...], Tuple[float, float]] = {}
    for sites in distinct:
        cov = covariance(draws[sites])
        diff = reports[sites].psi_hat - base_psi
        stats[sites] = (diff * diff + 2.0 * cov - var_target, cov)

    points = tuple(
        MsePoint(
            e=e, selected_sites=sets_by_e[e], psi_e=reports[sets_by_e[e]].psi_hat,
            mse_hat=stats[sets_by_e[e]][0], cov_hat=stats[sets_by_e[e]][1],
            var_target=var_target,
        )
        for e in grid.values
    )
    curve = MseCurve(
        points=points, base_psi=base_psi, var_target=var_target,
        B=plan.B, seed=plan.seed, approximate=fast,
    )
    boot_sd = {
        sites: float(np.std(draws[sites], ddof=1)) for sites in distinct
    }
    return curve, reports, boot_sd


def mse_curve(
    grid: Optional[ThresholdGrid],
    plan: Optional[BootstrapPlan],
    weights: Union[FederatedWeights, WeightSolution],
    data,
    measure: CausalMeasure = RISK_RATIO,
    fast: bool = False,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    misspec: MisspecSpec = NO_MISSPEC,
) -> MseCurve:
    """Bootstrap the MSE proxy for every threshold on the grid."""
    if isinstance(weights, WeightSolution):
        weights = weights.weights
    cohort = _cohort_for(data, transport, config, measure, plan, seed=0)
    plan = _resolve_plan(cohort, plan)
    grid = grid if grid is not None else default_threshold_grid()
    curve, _, _ = _curve_artifacts(grid, plan, weights, cohort, fast, misspec)
    return curve


def select_threshold(curve: MseCurve) -> float:
    """Largest threshold attaining the minimal MSE proxy."""
    best = min(p.mse_hat for p in curve.points)
    return max(p.e for p in curve.points if p.mse_hat == best)


def estimate_fs(
    data,
    measure: CausalMeasure = RISK_RATIO,
    grid: Optional[ThresholdGrid] = None,
    plan: Optional[BootstrapPlan] = None,
    solution: Optional[WeightSolution] = None,
    lambda_grid: Optional[Sequence[float]] = None,
    fast: bool = False,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    seed: int = 0,
    misspec: MisspecSpec = NO_MISSPEC,
) -> EstimateReport:
    """Full selection pipeline ending in the refit on the chosen set.

    The report's SE is the influence-function one from the selected-set
    refit; the bootstrap spread of that set's draws rides along in the
    diagnostics together with the audit fields (threshold, curve digest,
    replicate count, seed).
    """
    cohort = _cohort_for(data, transport, config, measure, plan, seed=seed)
    plan = _resolve_plan(cohort, plan)
    grid = grid if grid is not None else default_threshold_grid()
    if solution is None:
        solution = federated_weights(cohort, lambda_grid=lambda_grid, misspec=misspec)
    curve, reports, boot_sd = _curve_artifacts(
        grid, plan, solution.weights, cohort, fast, misspec
    )
    e_star = select_threshold(curve)
    chosen = next(p.selected_sites for p in curve.points if p.e == e_star)
    picked = reports[chosen]
    return EstimateReport(
        psi_hat=picked.psi_hat, psi0_hat=picked.psi0_hat, psi1_hat=picked.psi1_hat,
        se=picked.se, ci_lower=picked.ci_lower, ci_upper=picked.ci_upper,
        method="fsmr1", selected_sites=picked.selected_sites, n_used=picked.n_used,
        diagnostics={
            **picked.diagnostics,
            "e_star": e_star,
            "curve_digest": curve.digest(),
            "B": plan.B,
            "seed": plan.seed,
            "bootstrap_se": boot_sd[chosen],
            "weights": [float(v) for v in solution.weights.w],
            "lambda_n": solution.weights.lambda_n,
            "approximate_bootstrap": fast,
        },
    )
