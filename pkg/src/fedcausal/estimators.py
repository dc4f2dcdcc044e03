"""Multi-site estimators for target-population causal measures.

Each estimator writes the treated-arm mean of the target site as a plug-in
term plus row-level augmentations, one augmentation stream per participating
site, blended by closed-form precision weights:

    psi1_hat = (1/n0) sum_i [ I(S_i=0) mu1(X_i) + sum_k R_k(X_i) H_k(V_i) ]

Three blends are provided.  "mr1" assumes a shared conditional effect
function tau and rewrites every source-site treated mean on the target scale
through tau; it is consistent whenever tau is correct and no site has its
propensity and control regression simultaneously wrong, or when only tau is
wrong.  "mr2" assumes the outcome regressions themselves are shared and
pools the treated regression across sites; it is consistent whenever the
pooled regression is correct, or when only that regression is wrong.  "drt"
is the target-only doubly robust estimator (no source augmentation).

The control-arm mean uses the target-only augmentation for "mr1"/"drt" and
the pooled mirror for "mr2".  Measures combine the two arm means by the
delta method on the influence-function scale.

Every sum that crosses a site boundary is accumulated per site in ascending
site-id order; the federated driver reproduces the same arithmetic from
per-site partial sums, so pooled and federated runs agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CausalMeasure,
    EstimateReport,
    FedcausalError,
    MultiSiteData,
    RISK_RATIO,
    StackedData,
    TARGET_ID,
    measure_apply,
    measure_eif_combine,
    measure_g_inverse,
    wald_interval,
)
from .nuisance import (
    DEFAULT_CONFIG,
    MisspecSpec,
    NO_MISSPEC,
    NuisanceBundle,
    NuisanceConfig,
    fit_bundle,
)


class UnsupportedMeasureForMode(FedcausalError):
    pass


MODES = ("mr1", "mr2", "drt")


def _check_mode(mode: str, measure: CausalMeasure) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown estimator mode {mode!r}")
    if mode == "mr1" and not measure.is_ratio:
        # the source rewrite and its precision weights are ratio-specific
        raise UnsupportedMeasureForMode(
            "mr1 source augmentation is defined for the ratio measure only"
        )


def block_sum(values: np.ndarray, stacked: StackedData) -> float:
    """Sum per site block in ascending order, then add the per-site totals.

    This is the federation contract: a coordinator adding per-site partial
    sums in ascending site order performs these exact additions.
    """
    total = 0.0
    for k in sorted(stacked.slices):
        total += float(np.sum(values[stacked.slices[k]]))
    return total


@dataclass(frozen=True)
class PsiComponent:
    """One arm-mean estimate with its estimating-equation row decomposition.

    Rows are aligned to the stacked subset in ascending site order.  The
    influence function at any centering value psi is
    (plug + aug - target_mask * psi) / pr_s0, and its sample mean equals
    value - psi exactly when pr_s0 = n0 / n.
    """

    value: float
    plug: np.ndarray
    aug: np.ndarray
    target_mask: np.ndarray
    pr_s0: float
    n0: int
    n: int
    sites: Tuple[int, ...]
    diagnostics: dict = field(default_factory=dict)

    def influence_at(self, psi: float) -> np.ndarray:
        return (self.plug + self.aug - self.target_mask * psi) / self.pr_s0

    @property
    def eif(self) -> np.ndarray:
        return self.influence_at(self.value)


# -- precision weights ------------------------------------------------------------


def _site_functions(bundle: NuisanceBundle, k: int, x: np.ndarray):
    pi = bundle.propensity[k].predict(x)
    mu0 = bundle.mu0[k].predict(x)
    var1 = bundle.cond_var[(1, k)].variance(x)
    var0 = bundle.cond_var[(0, k)].variance(x)
    return pi, mu0, var1, var0


def mr1_weights(
    bundle: NuisanceBundle, sites: Sequence[int], x: np.ndarray
) -> Tuple[Dict[int, np.ndarray], int]:
    """Row-level blending weights R_k(x) for the shared-effect estimator.

    The weights minimize the conditional variance of the blended
    augmentation subject to summing to one.  Augmentations from different
    sources share their target-control piece, which produces the cross-site
    variance-ratio sum in the third term.  Rows where any source's precision
    ratio is non-finite fall back to target-only weights and are counted.
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    sources = [k for k in sorted(sites) if k != TARGET_ID]
    if not sources:
        return {TARGET_ID: np.ones(n)}, 0

    pi0, mu0_t, var1_t, var0_t = _site_functions(bundle, TARGET_ID, x)
    tau = bundle.tau(x)
    site_pr = bundle.site_prob(x, sites)

    # g_k compares source augmentation variances on a common scale
    g = {}
    for k in sources:
        pi_k, mu0_k, var1_k, var0_k = _site_functions(bundle, k, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            g[k] = (var1_k / pi_k + var0_k * tau**2 / (1.0 - pi_k)) / (
                site_pr[k] * mu0_k**2
            )
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_g_sum = sum(1.0 / g[k] for k in sources)

    raw = {}
    degenerate = np.zeros(n, dtype=bool)
    for k in sources:
        pi_k, mu0_k, var1_k, var0_k = _site_functions(bundle, k, x)
        q_k = bundle.q(k, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = (mu0_t / mu0_k) ** 2
            ratio = (
                q_k * pi0 * var1_k / (pi_k * var1_t) * scale
                + q_k * pi0 * var0_k / ((1.0 - pi_k) * var1_t) * tau**2 * scale
                + pi0 * var0_t * tau**2 / ((1.0 - pi0) * var1_t) * g[k] * inv_g_sum
            )
            w = 1.0 / ratio
        bad = ~np.isfinite(w) | (ratio <= 0.0)
        w = np.where(bad, 0.0, w)
        degenerate |= bad
        raw[k] = w

    denom = 1.0 + sum(raw[k] for k in sources)
    weights = {TARGET_ID: np.where(degenerate, 1.0, 1.0 / denom)}
    for k in sources:
        weights[k] = np.where(degenerate, 0.0, raw[k] / denom)
    return weights, int(np.sum(degenerate))


def mr2_weights(
    bundle: NuisanceBundle, sites: Sequence[int], x: np.ndarray, arm: int = 1
) -> Tuple[Dict[int, np.ndarray], int]:
    """Row-level weights for the shared-outcome-regression estimator.

    Source augmentations are mutually independent given X, so the blend is
    plain inverse conditional variance; arm selects the treated or control
    mirror.
    """
    x = np.atleast_2d(x)
    n = x.shape[0]
    sources = [k for k in sorted(sites) if k != TARGET_ID]
    if not sources:
        return {TARGET_ID: np.ones(n)}, 0
    pi0, _, var1_t, var0_t = _site_functions(bundle, TARGET_ID, x)
    p0 = pi0 if arm == 1 else 1.0 - pi0
    v0 = var1_t if arm == 1 else var0_t
    raw = {}
    degenerate = np.zeros(n, dtype=bool)
    for k in sources:
        pi_k, _, var1_k, var0_k = _site_functions(bundle, k, x)
        pk = pi_k if arm == 1 else 1.0 - pi_k
        vk = var1_k if arm == 1 else var0_k
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = bundle.q(k, x) * p0 * vk / (pk * v0)
            w = 1.0 / ratio
        bad = ~np.isfinite(w) | (ratio <= 0.0)
        w = np.where(bad, 0.0, w)
        degenerate |= bad
        raw[k] = w
    denom = 1.0 + sum(raw[k] for k in sources)
    weights = {TARGET_ID: np.where(degenerate, 1.0, 1.0 / denom)}
    for k in sources:
        weights[k] = np.where(degenerate, 0.0, raw[k] / denom)
    return weights, int(np.sum(degenerate))


# -- arm-mean estimators -----------------------------------------------------------


def psi1_site_arrays(
    bundle: NuisanceBundle,
    sites: Sequence[int],
    mode: str,
    ds,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """One site's treated-arm plug and augmentation rows.

    This is the unit of work a federated site performs locally; the pooled
    estimator fills its stacked arrays from the same calls.
    """
    measure = bundle.measure
    ids = tuple(sorted(sites))
    k = ds.site_id
    rr_floor = bundle.config.rr_floor
    plug = np.zeros(ds.n)
    degenerate = 0

    if mode in ("mr1", "drt"):
        if mode == "mr1":
            w_k, bad = mr1_weights(bundle, ids, ds.x)
            degenerate += bad
        if k == TARGET_ID:
            tau0 = bundle.tau(ds.x)
            mu0_t = bundle.mu0[TARGET_ID].predict(ds.x)
            mu1_t = measure_g_inverse(measure, mu0_t, tau0)
            pi_t = bundle.propensity[TARGET_ID].predict(ds.x)
            h0 = ds.a * (ds.y - mu1_t) / pi_t
            shared = (1.0 - ds.a) * tau0 * (ds.y - mu0_t) / (1.0 - pi_t)
            if mode == "drt" or len(ids) == 1:
                r0 = np.ones(ds.n)
            else:
                r0 = w_k[TARGET_ID]
            plug = mu1_t
            aug = r0 * h0 + (1.0 - r0) * shared
        else:
            tau_k = bundle.tau(ds.x)
            mu0_k = bundle.mu0[k].predict(ds.x)
            mu0_tk = bundle.mu0[TARGET_ID].predict(ds.x)
            mu1_k = measure_g_inverse(measure, mu0_k, tau_k)
            pi_k = bundle.propensity[k].predict(ds.x)
            q_k = bundle.q(k, ds.x)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = mu0_tk / mu0_k
                h = (
                    ds.a * q_k / pi_k * (ds.y - mu1_k) * scale
                    - (1.0 - ds.a) * q_k / (1.0 - pi_k) * (ds.y - mu0_k) * tau_k * scale
                )
            bad = np.abs(mu0_k) <= rr_floor
            degenerate += int(np.sum(bad & (w_k[k] > 0)))
            aug = np.where(bad, 0.0, w_k[k] * np.where(bad, 0.0, h))
    elif mode == "mr2":
        if bundle.mu1_pooled is None:
            raise ValueError("mr2 requires a bundle fitted with pooled regressions")
        w_k, bad = mr2_weights(bundle, ids, ds.x, arm=1)
        degenerate += bad
        mu1 = bundle.mu1_pooled.predict(ds.x)
        pi_k = bundle.propensity[k].predict(ds.x)
        h = ds.a * bundle.q(k, ds.x) * (ds.y - mu1) / pi_k
        aug = w_k[k] * h
        if k == TARGET_ID:
            plug = mu1
    else:
        raise ValueError(f"unknown estimator mode {mode!r}")
    return plug, aug, degenerate


def psi0_site_arrays(
    bundle: NuisanceBundle,
    sites: Sequence[int],
    mode: str,
    ds,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """One site's control-arm plug and augmentation rows."""
    ids = tuple(sorted(sites))
    k = ds.site_id
    plug = np.zeros(ds.n)
    aug = np.zeros(ds.n)
    degenerate = 0
    if mode == "mr2":
        if bundle.mu0_pooled is None:
            raise ValueError("mr2 requires a bundle fitted with pooled regressions")
        w_k, bad = mr2_weights(bundle, ids, ds.x, arm=0)
        degenerate += bad
        mu0 = bundle.mu0_pooled.predict(ds.x)
        pi_k = bundle.propensity[k].predict(ds.x)
        aug = w_k[k] * (1.0 - ds.a) * bundle.q(k, ds.x) * (ds.y - mu0) / (1.0 - pi_k)
        if k == TARGET_ID:
            plug = mu0
    elif k == TARGET_ID:
        mu0_t = bundle.mu0[TARGET_ID].predict(ds.x)
        pi_t = bundle.propensity[TARGET_ID].predict(ds.x)
        plug = mu0_t
        aug = (1.0 - ds.a) * (ds.y - mu0_t) / (1.0 - pi_t)
    return plug, aug, degenerate


def _assemble_component(data, bundle, sites, mode, pr_s0, site_arrays):
    ids = tuple(sorted(sites)) if sites is not None else bundle.sites
    sub = data.subset(ids)
    stacked = sub.stacked()
    n = stacked.y.shape[0]
    n0 = sub.target.n
    pr = pr_s0 if pr_s0 is not None else n0 / n
    target_mask = (stacked.s == TARGET_ID).astype(float)
    plug = np.zeros(n)
    aug = np.zeros(n)
    degenerate = 0
    for k in ids:
        p_k, a_k, d_k = site_arrays(bundle, ids, mode, sub.sites[k])
        sl = stacked.slices[k]
        plug[sl] = p_k
        aug[sl] = a_k
        degenerate += d_k
    value = (block_sum(plug, stacked) + block_sum(aug, stacked)) / n0
    return PsiComponent(
        value=value, plug=plug, aug=aug, target_mask=target_mask,
        pr_s0=pr, n0=n0, n=n, sites=ids,
        diagnostics={"mode": mode, "degenerate_rows": degenerate},
    )


def estimate_psi1(
    data: MultiSiteData,
    bundle: NuisanceBundle,
    sites: Optional[Sequence[int]] = None,
    mode: str = "mr1",
    pr_s0: Optional[float] = None,
) -> PsiComponent:
    """Treated-arm target mean via the blended closed form."""
    _check_mode(mode, bundle.measure if mode == "mr1" else RISK_RATIO)
    return _assemble_component(data, bundle, sites, mode, pr_s0, psi1_site_arrays)


def estimate_psi0(
    data: MultiSiteData,
    bundle: NuisanceBundle,
    sites: Optional[Sequence[int]] = None,
    mode: str = "mr1",
    pr_s0: Optional[float] = None,
) -> PsiComponent:
    """Control-arm target mean: target-only for mr1/drt, pooled mirror for mr2."""
    return _assemble_component(data, bundle, sites, mode, pr_s0, psi0_site_arrays)


# -- measure-level assembly ---------------------------------------------------------


def measure_influence(
    measure: CausalMeasure, psi0: PsiComponent, psi1: PsiComponent
) -> np.ndarray:
    return measure_eif_combine(measure, psi0.value, psi1.value, psi0.eif, psi1.eif)


def ridge_flags(bundle: NuisanceBundle) -> Tuple[str, ...]:
    flagged = []
    for k, m in sorted(bundle.propensity.items()):
        if m.converged_via_ridge:
            flagged.append(f"pi:{k}")
    for k, dr in sorted(bundle.density_ratio.items()):
        if dr.model.converged_via_ridge:
            flagged.append(f"q:{k}")
    return tuple(flagged)


def estimate_measure(
    data: MultiSiteData,
    measure: CausalMeasure = RISK_RATIO,
    mode: str = "mr1",
    sites: Optional[Sequence[int]] = None,
    bundle: Optional[NuisanceBundle] = None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    misspec: MisspecSpec = NO_MISSPEC,
) -> EstimateReport:
    """Point estimate, influence-function standard error, and Wald interval."""
    _check_mode(mode, measure)
    if mode == "drt":
        ids = (TARGET_ID,)
    else:
        ids = tuple(sorted(set(sites) | {TARGET_ID})) if sites is not None else data.site_ids
    if bundle is None:
        bundle = fit_bundle(
            data, ids, measure, config, misspec,
            need_tau=mode in ("mr1", "drt"), need_pooled=mode == "mr2",
        )
    psi1 = estimate_psi1(data, bundle, ids, mode)
    psi0 = estimate_psi0(data, bundle, ids, mode)
    psi_hat = measure_apply(measure, psi0.value, psi1.value)
    phi = measure_influence(measure, psi0, psi1)
    sub = data.subset(ids)
    stacked = sub.stacked()
    n = stacked.y.shape[0]
    variance = block_sum(phi * phi, stacked) / n
    se = float(np.sqrt(variance / n))
    lo, hi = wald_interval(psi_hat, se)
    return EstimateReport(
        psi_hat=psi_hat, psi0_hat=psi0.value, psi1_hat=psi1.value,
        se=se, ci_lower=lo, ci_upper=hi,
        method=mode, selected_sites=ids, n_used=n,
        diagnostics={
            "measure": measure.kind,
            "degenerate_rows": psi1.diagnostics["degenerate_rows"]
            + psi0.diagnostics["degenerate_rows"],
            "pr_s0": psi1.pr_s0,
            "ridge_fallbacks": list(ridge_flags(bundle)),
        },
    )
