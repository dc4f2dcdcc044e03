"""Nuisance-function fitting for multi-site causal estimation.

Fits propensities pi^(k), outcome regressions mu_a^(k), density ratios q^(k),
the shared conditional effect function tau, and conditional outcome variances
sigma^2_{a,k}.  Every fit that spans more than one site accumulates per-site
sufficient statistics in ascending site-id order, so that a pooled in-memory
fit and the federated message-passing fit perform identical arithmetic.

Misspecification is injected by refitting a targeted model on distorted
features; all other models are shared unchanged.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import expit

from .core import (
    CausalMeasure,
    DomainViolation,
    EmptyTreatmentArm,
    FedcausalError,
    MultiSiteData,
    RISK_RATIO,
    SiteDataset,
    TARGET_ID,
    measure_g,
    parse_measure,
    validate_multisite,
)


class SingleClassLabels(FedcausalError):
    pass


class NonConvergence(FedcausalError):
    pass


class RankDeficient(FedcausalError):
    pass


class UnknownTarget(FedcausalError):
    pass


FEATURE_MAPS = ("identity", "quadratic", "drop_last", "exponentiate")

# Fitted logits beyond this magnitude indicate (quasi-)separation.
_SEPARATION_LOGIT = 30.0


def apply_features(x: np.ndarray, feature_map: str) -> np.ndarray:
    """Map raw covariates (n, p) to model features (n, q), no intercept."""
    if feature_map == "identity":
        return x
    if feature_map == "quadratic":
        # coordinatewise squares appended; cross terms are not generated
        return np.hstack([x, x**2])
    if feature_map == "drop_last":
        return x[:, :-1]
    if feature_map == "exponentiate":
        return np.exp(x)
    raise ValueError(f"unknown feature map {feature_map!r}")


def design_matrix(x: np.ndarray, feature_map: str) -> np.ndarray:
    feats = apply_features(np.atleast_2d(x), feature_map)
    return np.hstack([np.ones((feats.shape[0], 1)), feats])


@dataclass(frozen=True)
class GlmModel:
    """Linear or logistic model on intercept-plus-mapped features."""

    family: str  # "linear" or "logistic"
    coef: np.ndarray
    feature_map: str = "identity"
    clip: Optional[Tuple[float, float]] = None
    converged_via_ridge: bool = False

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise ValueError(f"unknown family {self.family!r}")
        coef = np.asarray(self.coef, dtype=float)
        if not np.all(np.isfinite(coef)):
            raise ValueError("model coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return design_matrix(x, self.feature_map) @ self.coef

    def predict(self, x: np.ndarray) -> np.ndarray:
        eta = self.linear_predictor(x)
        out = expit(eta) if self.family == "logistic" else eta
        if self.clip is not None:
            out = np.clip(out, self.clip[0], self.clip[1])
        return out

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "coef": [float(c) for c in self.coef],
            "feature_map": self.feature_map,
            "clip": list(self.clip) if self.clip else None,
            "converged_via_ridge": self.converged_via_ridge,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GlmModel":
        return cls(
            family=raw["family"],
            coef=np.array(raw["coef"], dtype=float),
            feature_map=raw["feature_map"],
            clip=tuple(raw["clip"]) if raw.get("clip") else None,
            converged_via_ridge=bool(raw.get("converged_via_ridge", False)),
        )


@dataclass(frozen=True)
class DensityRatioModel:
    """q^(k)(x) = pr(S=0|x)/pr(S=k|x), via target-vs-source membership odds.

    The fitted odds of the pooled {0, k} membership logistic already carry
    the sampling fractions n_0/n_k, which estimate the population prior odds
    under the multinomial site mechanism; prior_correction = log(n_0/n_k) is
    recorded for diagnostics but not subtracted.
    """

    k: int
    model: GlmModel
    prior_correction: float
    clip: Tuple[float, float] = (1e-3, 1e3)

    def q(self, x: np.ndarray) -> np.ndarray:
        eta = self.model.linear_predictor(x)
        return np.clip(np.exp(eta), self.clip[0], self.clip[1])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "model": self.model.to_dict(),
            "prior_correction": self.prior_correction,
            "clip": list(self.clip),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DensityRatioModel":
        return cls(
            k=raw["k"],
            model=GlmModel.from_dict(raw["model"]),
            prior_correction=raw["prior_correction"],
            clip=tuple(raw["clip"]),
        )


@dataclass(frozen=True)
class TauModel:
    """Conditional effect function tau(x), linear in mapped features."""

    coef: np.ndarray
    feature_map: str
    measure_kind: str
    weighting: str

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float)
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    def tau(self, x: np.ndarray) -> np.ndarray:
        return design_matrix(x, self.feature_map) @ self.coef

    def to_dict(self) -> dict:
        return {
            "coef": [float(c) for c in self.coef],
            "feature_map": self.feature_map,
            "measure_kind": self.measure_kind,
            "weighting": self.weighting,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TauModel":
        return cls(
            coef=np.array(raw["coef"], dtype=float),
            feature_map=raw["feature_map"],
            measure_kind=raw["measure_kind"],
            weighting=raw["weighting"],
        )


@dataclass(frozen=True)
class VarianceModel:
    """Conditional outcome variance sigma^2_{a,k}(x), floored below."""

    mode: str  # "constant" or "regression"
    value: float = 1.0
    model: Optional[GlmModel] = None
    floor: float = 1e-4

    def variance(self, x: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(x).shape[0]
        if self.mode == "constant":
            return np.full(n, max(self.value, self.floor))
        return np.maximum(self.model.predict(x), self.floor)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "value": self.value,
            "model": self.model.to_dict() if self.model else None,
            "floor": self.floor,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "VarianceModel":
        return cls(
            mode=raw["mode"],
            value=raw["value"],
            model=GlmModel.from_dict(raw["model"]) if raw.get("model") else None,
            floor=raw["floor"],
        )


@dataclass(frozen=True)
class NuisanceConfig:
    """Model specification and numeric guards for all nuisance fits.

    Default feature maps follow the multiplicative-outcome reference setting:
    density-ratio logits and treated-arm means are one polynomial degree above
    the linear base functions they are built from, so both default to the
    quadratic expansion while the base regressions stay linear.
    """

    propensity_map: str = "identity"
    mu0_map: str = "identity"
    mu1_map: str = "quadratic"
    density_map: str = "quadratic"
    tau_map: str = "identity"
    tau_weighting: str = "mu0_squared"  # or "plain"
    var_mode: str = "constant"  # or "regression"
    propensity_clip: Tuple[float, float] = (0.01, 0.99)
    density_clip: Tuple[float, float] = (1e-3, 1e3)
    var_floor: float = 1e-4
    rr_floor: float = 1e-10
    max_iter: int = 100
    tol: float = 1e-8
    ridge: float = 1e-4


DEFAULT_CONFIG = NuisanceConfig()


@dataclass(frozen=True)
class MisspecSpec:
    """Which nuisance fits to distort, and how.

    Targets are atoms like "pi:2", "mu0:0", "q:1", "mu1:0", "mu1_pooled",
    "mu0_pooled" or "tau".  Distorted fits replace their feature map by the
    distortion map; everything else is untouched.
    """

    targets: frozenset = frozenset()
    distortion: str = "exponentiate"

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(self.targets))
        if self.distortion not in ("drop_last", "exponentiate"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        for atom in self.targets:
            _parse_target(atom)

    def hits(self, kind: str, site: Optional[int] = None) -> bool:
        atom = kind if site is None else f"{kind}:{site}"
        return atom in self.targets


NO_MISSPEC = MisspecSpec()


def _parse_target(atom: str) -> Tuple[str, Optional[int]]:
    if atom in ("tau", "mu1_pooled", "mu0_pooled"):
        return atom, None
    try:
        kind, site = atom.split(":")
        if kind not in ("pi", "mu0", "mu1", "q"):
            raise ValueError
        return kind, int(site)
    except ValueError:
        raise UnknownTarget(f"unknown misspecification target {atom!r}") from None


# -- generic fitters ----------------------------------------------------------


def _solve_newton(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.linalg.solve(hess, grad)


def logistic_block_stats(
    design: np.ndarray, labels: np.ndarray, beta: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, float]:
    """One block's Newton statistics (Hessian, score, largest |logit|).

    This is the unit of work a federated site performs per iteration; the
    pooled fit accumulates the same triples block by block.
    """
    if design.shape[0] == 0:
        dim = design.shape[1]
        return np.zeros((dim, dim)), np.zeros(dim), 0.0
    eta = design @ beta
    mu = expit(eta)
    w = mu * (1.0 - mu)
    hess = design.T @ (w[:, None] * design)
    grad = design.T @ (labels - mu)
    return hess, grad, float(np.max(np.abs(eta)))


def irls_driver(
    stats_fn,
    dim: int,
    n1: float,
    n0: float,
    max_iter: int,
    tol: float,
    ridge: float,
) -> Tuple[np.ndarray, bool]:
    """Newton/IRLS stepping over summed block statistics.

    stats_fn(beta) returns the accumulated (hessian, gradient, max |logit|);
    pooled and federated fits share this driver so their iterates agree bit
    for bit.  Quasi-separation triggers one ridge-penalized retry.
    """
    if n1 == 0 or n0 == 0:
        raise SingleClassLabels("labels are constant")

    def run(penalty: float) -> Optional[np.ndarray]:
        beta = np.zeros(dim)
        beta[0] = math.log(n1 / n0)
        for _ in range(max_iter):
            hess, grad, max_eta = stats_fn(beta)
            if penalty > 0.0:
                hess = hess + penalty * np.eye(dim)
                grad = grad - penalty * beta
            if not (np.all(np.isfinite(hess)) and np.all(np.isfinite(grad))):
                return None
            if float(np.max(np.abs(grad))) < tol:
                return beta
            if penalty == 0.0 and max_eta > _SEPARATION_LOGIT:
                return None
            try:
                beta = beta + _solve_newton(hess, grad)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(beta)):
                return None
        return None

    beta = run(0.0)
    if beta is not None:
        return beta, False
    beta = run(ridge)
    if beta is not None:
        return beta, True
    raise NonConvergence("logistic fit did not converge even with ridge fallback")


def _irls_blocks(
    blocks: Sequence[Tuple[np.ndarray, np.ndarray]],
    feature_map: str,
    max_iter: int,
    tol: float,
    ridge: float,
) -> Tuple[np.ndarray, bool]:
    """Pooled Newton/IRLS: blocks in ascending site order feed the driver."""
    designs = [design_matrix(x, feature_map) for x, _ in blocks]
    labels = [np.asarray(lab, dtype=float) for _, lab in blocks]
    dim = designs[0].shape[1]
    n1 = sum(float(np.sum(lab)) for lab in labels)
    n0 = sum(lab.shape[0] for lab in labels) - n1

    def stats(beta):
        hess = np.zeros((dim, dim))
        grad = np.zeros(dim)
        max_eta = 0.0
        for design, lab in zip(designs, labels):
            h, g, m = logistic_block_stats(design, lab, beta)
            hess += h
            grad += g
            max_eta = max(max_eta, m)
        return hess, grad, max_eta

    return irls_driver(stats, dim, n1, n0, max_iter, tol, ridge)


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
    feature_map: str = "identity",
    clip: Optional[Tuple[float, float]] = None,
    ridge: float = 1e-4,
) -> GlmModel:
    """Maximum-likelihood logistic regression with a ridge separation fallback."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    coef, via_ridge = _irls_blocks(
        [(features, labels)], feature_map, max_iter, tol, ridge
    )
    return GlmModel(
        family="logistic", coef=coef, feature_map=feature_map,
        clip=clip, converged_via_ridge=via_ridge,
    )


def fit_linear(
    features: np.ndarray,
    responses: np.ndarray,
    feature_map: str = "identity",
) -> GlmModel:
    """Least squares via QR; raises RankDeficient on singular designs."""
    design = design_matrix(np.asarray(features, dtype=float), feature_map)
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise RankDeficient("design matrix is rank deficient")
    coef = solve_triangular(r, q.T @ np.asarray(responses, dtype=float))
    return GlmModel(family="linear", coef=coef, feature_map=feature_map)


def fit_linear_blocks(
    blocks: Sequence[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]],
    feature_map: str,
    scale_design: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> GlmModel:
    """Weighted least squares from per-block normal equations.

    blocks holds (raw covariates, responses, row weights or None) in ascending
    site order; scale_design optionally multiplies each design row by a
    per-row factor (used by the effect-function fit).  Accumulation order is
    the federation contract.
    """
    gram = None
    moment = None
    for idx, (x, resp, w) in enumerate(blocks):
        design = design_matrix(np.asarray(x, dtype=float), feature_map)
        if scale_design is not None and scale_design[idx] is not None:
            design = design * scale_design[idx][:, None]
        resp = np.asarray(resp, dtype=float)
        if w is None:
            g = design.T @ design
            m = design.T @ resp
        else:
            g = design.T @ (w[:, None] * design)
            m = design.T @ (w * resp)
        gram = g if gram is None else gram + g
        moment = m if moment is None else moment + m
    return solve_linear_system(gram, moment, feature_map)


def solve_linear_system(gram: np.ndarray, moment: np.ndarray, feature_map: str) -> GlmModel:
    """Solve accumulated normal equations; shared by pooled and federated fits."""
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(moment))):
        raise RankDeficient("normal equations contain non-finite entries")
    try:
        coef = cho_solve(cho_factor(gram, lower=True), moment)
    except np.linalg.LinAlgError:
        raise RankDeficient("normal equations are singular") from None
    if not np.all(np.isfinite(coef)):
        raise RankDeficient("normal equations produced non-finite coefficients")
    return GlmModel(family="linear", coef=coef, feature_map=feature_map)


# -- named nuisance fits --------------------------------------------------------


def fit_propensity(
    data: MultiSiteData,
    k: int,
    config: NuisanceConfig = DEFAULT_CONFIG,
    feature_map: Optional[str] = None,
) -> GlmModel:
    """Logistic regression of A on X within site k, predictions clipped."""
    ds = data.sites[k]
    for arm in (0, 1):
        if int(np.sum(ds.a == arm)) == 0:
            raise EmptyTreatmentArm(k, arm)
    model = fit_logistic(
        ds.x, ds.a,
        max_iter=config.max_iter, tol=config.tol,
        feature_map=feature_map or config.propensity_map,
        clip=config.propensity_clip, ridge=config.ridge,
    )
    return model


def fit_density_ratio(
    data: MultiSiteData,
    k: int,
    config: NuisanceConfig = DEFAULT_CONFIG,
    feature_map: Optional[str] = None,
) -> DensityRatioModel:
    """Membership logistic on pooled {0, k} rows; q(x) is the fitted odds."""
    if k == TARGET_ID:
        raise ValueError("density ratio is defined for source sites only")
    target = data.sites[TARGET_ID]
    source = data.sites[k]
    blocks = [
        (target.x, np.ones(target.n)),
        (source.x, np.zeros(source.n)),
    ]
    coef, via_ridge = _irls_blocks(
        blocks, feature_map or config.density_map,
        config.max_iter, config.tol, config.ridge,
    )
    model = GlmModel(
        family="logistic", coef=coef,
        feature_map=feature_map or config.density_map,
        converged_via_ridge=via_ridge,
    )
    return DensityRatioModel(
        k=k, model=model,
        prior_correction=math.log(target.n / source.n),
        clip=config.density_clip,
    )


def site_outcome_models(
    ds: SiteDataset,
    config: NuisanceConfig = DEFAULT_CONFIG,
    mu0_map: Optional[str] = None,
    mu1_map: Optional[str] = None,
) -> Tuple[GlmModel, GlmModel]:
    """Per-arm outcome regressions from one site's rows alone."""
    control = ds.a == 0
    treated = ds.a == 1
    if not control.any():
        raise EmptyTreatmentArm(ds.site_id, 0)
    if not treated.any():
        raise EmptyTreatmentArm(ds.site_id, 1)
    mu0 = fit_linear(ds.x[control], ds.y[control], mu0_map or config.mu0_map)
    mu1 = fit_linear(ds.x[treated], ds.y[treated], mu1_map or config.mu1_map)
    return mu0, mu1


def arm_site_stats(
    ds: SiteDataset, arm: int, feature_map: str
) -> Tuple[np.ndarray, np.ndarray]:
    """Normal-equation pieces for one site's rows in one treatment arm."""
    mask = ds.a == arm
    design = design_matrix(ds.x[mask], feature_map)
    resp = ds.y[mask]
    return design.T @ design, design.T @ resp


def tau_site_stats(
    ds: SiteDataset,
    measure: CausalMeasure,
    config: NuisanceConfig = DEFAULT_CONFIG,
    feature_map: Optional[str] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Normal-equation pieces of the effect-function fit for one site.

    Pseudo-responses come from the site's own per-arm outcome fits evaluated
    on all of its rows.  For the ratio measure the default mu0^2 weighting
    regresses mu1(x) on the design scaled by mu0(x) and never divides by mu0;
    "plain" weighting divides and raises DomainViolation when mu0 falls
    inside the singularity floor.
    """
    fmap = feature_map or config.tau_map
    use_scaled = measure.is_ratio and config.tau_weighting == "mu0_squared"
    mu0_k, mu1_k = site_outcome_models(ds, config)
    m0 = mu0_k.predict(ds.x)
    m1 = mu1_k.predict(ds.x)
    design = design_matrix(ds.x, fmap)
    if use_scaled:
        design = design * m0[:, None]
        resp = m1
    else:
        if measure.is_ratio and np.any(np.abs(m0) <= config.rr_floor):
            raise DomainViolation(
                f"site {ds.site_id}: mu0 prediction inside the singularity "
                "floor; plain tau weighting cannot divide"
            )
        resp = measure_g(measure, m0, m1)
    return design.T @ design, design.T @ resp


def _accumulate(stats: Sequence[Tuple[np.ndarray, np.ndarray]]):
    gram = None
    moment = None
    for g, m in stats:
        gram = g if gram is None else gram + g
        moment = m if moment is None else moment + m
    return gram, moment


def fit_outcome_models(
    data: MultiSiteData,
    k: int,
    config: NuisanceConfig = DEFAULT_CONFIG,
    pooled_treated: bool = False,
    sites: Optional[Sequence[int]] = None,
    mu0_map: Optional[str] = None,
    mu1_map: Optional[str] = None,
) -> Tuple[GlmModel, GlmModel]:
    """Per-arm outcome regressions within site k (mu1 optionally pooled)."""
    mu0, mu1 = site_outcome_models(data.sites[k], config, mu0_map, mu1_map)
    if pooled_treated:
        ids = sites if sites is not None else data.site_ids
        mu1 = fit_pooled_arm(data, ids, 1, mu1_map or config.mu1_map)
    return mu0, mu1


def fit_pooled_arm(
    data: MultiSiteData,
    sites: Sequence[int],
    arm: int,
    feature_map: str,
) -> GlmModel:
    """One outcome regression over the listed sites' rows in one arm."""
    gram, moment = _accumulate(
        [arm_site_stats(data.sites[j], arm, feature_map) for j in sorted(sites)]
    )
    return solve_linear_system(gram, moment, feature_map)


def fit_pooled_control(
    data: MultiSiteData,
    sites: Sequence[int],
    config: NuisanceConfig = DEFAULT_CONFIG,
    feature_map: Optional[str] = None,
) -> GlmModel:
    return fit_pooled_arm(data, sites, 0, feature_map or config.mu0_map)


def fit_tau(
    data: MultiSiteData,
    sites: Sequence[int],
    measure: CausalMeasure,
    config: NuisanceConfig = DEFAULT_CONFIG,
    feature_map: Optional[str] = None,
) -> TauModel:
    """Shared effect function from per-site normal-equation pieces.

    Accumulation runs in ascending site order; a federated execution that
    ships each site's (gram, moment) pair reproduces this fit bit for bit.
    """
    fmap = feature_map or config.tau_map
    use_scaled = measure.is_ratio and config.tau_weighting == "mu0_squared"
    gram, moment = _accumulate(
        [tau_site_stats(data.sites[k], measure, config, fmap) for k in sorted(sites)]
    )
    model = solve_linear_system(gram, moment, fmap)
    return TauModel(
        coef=model.coef, feature_map=fmap,
        measure_kind=measure.kind,
        weighting="mu0_squared" if use_scaled else "plain",
    )


def site_cond_variance(
    ds: SiteDataset,
    a: int,
    outcome_model: GlmModel,
    config: NuisanceConfig = DEFAULT_CONFIG,
    mode: Optional[str] = None,
) -> VarianceModel:
    """Conditional variance of Y within one arm of one site's rows."""
    arm = ds.a == a
    if not arm.any():
        raise EmptyTreatmentArm(ds.site_id, a)
    resid2 = (ds.y[arm] - outcome_model.predict(ds.x[arm])) ** 2
    mode = mode or config.var_mode
    if mode == "constant":
        return VarianceModel(
            mode="constant", value=float(np.mean(resid2)), floor=config.var_floor
        )
    model = fit_linear(ds.x[arm], resid2, config.mu0_map)
    return VarianceModel(mode="regression", model=model, floor=config.var_floor)


def fit_cond_variance(
    data: MultiSiteData,
    a: int,
    k: int,
    outcome_model: GlmModel,
    config: NuisanceConfig = DEFAULT_CONFIG,
    mode: Optional[str] = None,
) -> VarianceModel:
    """Conditional variance of Y within arm (a, k) from squared residuals."""
    return site_cond_variance(data.sites[k], a, outcome_model, config, mode)


# -- the bundle -----------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceBundle:
    """All fitted nuisance functions for one estimator call."""

    measure: CausalMeasure
    sites: Tuple[int, ...]
    propensity: Dict[int, GlmModel]
    mu0: Dict[int, GlmModel]
    mu1: Dict[int, GlmModel]
    cond_var: Dict[Tuple[int, int], VarianceModel]
    density_ratio: Dict[int, DensityRatioModel] = field(default_factory=dict)
    tau_model: Optional[TauModel] = None
    mu1_pooled: Optional[GlmModel] = None
    mu0_pooled: Optional[GlmModel] = None
    config: NuisanceConfig = DEFAULT_CONFIG

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(sorted(self.sites)))

    def tau(self, x: np.ndarray) -> np.ndarray:
        if self.tau_model is None:
            raise ValueError("bundle was fitted without an effect function")
        return self.tau_model.tau(x)

    def q(self, k: int, x: np.ndarray) -> np.ndarray:
        if k == TARGET_ID:
            return np.ones(np.atleast_2d(x).shape[0])
        return self.density_ratio[k].q(x)

    def site_prob(self, x: np.ndarray, sites: Sequence[int]) -> Dict[int, np.ndarray]:
        """pr(S=k | X, S in sites), reconstructed from pairwise ratios.

        1/q^(k) is proportional to pr(S=k|X)/pr(S=0|X); normalizing the
        inverse ratios over the participating sites conditions the site
        probability on membership in that set.
        """
        inv = {k: 1.0 / self.q(k, x) for k in sorted(sites)}
        total = sum(inv.values())
        return {k: v / total for k, v in inv.items()}


def fit_bundle(
    data: MultiSiteData,
    sites: Optional[Sequence[int]] = None,
    measure: CausalMeasure = RISK_RATIO,
    config: NuisanceConfig = DEFAULT_CONFIG,
    misspec: MisspecSpec = NO_MISSPEC,
    need_tau: bool = True,
    need_pooled: bool = False,
) -> NuisanceBundle:
    """Fit every nuisance required on the listed sites (target always included)."""
    ids = tuple(sorted(set(sites) | {TARGET_ID})) if sites is not None else data.site_ids
    sub = data.subset(ids)
    validate_multisite(sub)

    def pick(kind: str, site: Optional[int], default: str) -> str:
        return misspec.distortion if misspec.hits(kind, site) else default

    propensity = {}
    mu0 = {}
    mu1 = {}
    cond_var = {}
    for k in ids:
        propensity[k] = fit_propensity(sub, k, config, pick("pi", k, config.propensity_map))
        m0, m1 = fit_outcome_models(
            sub, k, config,
            mu0_map=pick("mu0", k, config.mu0_map),
            mu1_map=pick("mu1", k, config.mu1_map),
        )
        mu0[k], mu1[k] = m0, m1
        cond_var[(0, k)] = fit_cond_variance(sub, 0, k, m0, config)
        cond_var[(1, k)] = fit_cond_variance(sub, 1, k, m1, config)

    density_ratio = {
        k: fit_density_ratio(sub, k, config, pick("q", k, config.density_map))
        for k in ids if k != TARGET_ID
    }

    tau_model = None
    if need_tau:
        tau_model = fit_tau(sub, ids, measure, config, pick("tau", None, config.tau_map))

    mu1_pooled = None
    mu0_pooled = None
    if need_pooled:
        mu1_pooled = fit_pooled_arm(sub, ids, 1, pick("mu1_pooled", None, config.mu1_map))
        mu0_pooled = fit_pooled_arm(sub, ids, 0, pick("mu0_pooled", None, config.mu0_map))

    return NuisanceBundle(
        measure=measure, sites=ids,
        propensity=propensity, mu0=mu0, mu1=mu1,
        cond_var=cond_var, density_ratio=density_ratio,
        tau_model=tau_model, mu1_pooled=mu1_pooled, mu0_pooled=mu0_pooled,
        config=config,
    )


def apply_misspec(
    data: MultiSiteData,
    bundle: NuisanceBundle,
    misspec: MisspecSpec,
) -> NuisanceBundle:
    """Refit the targeted models on distorted features; share the rest."""
    for atom in misspec.targets:
        kind, site = _parse_target(atom)
        if site is not None and site not in bundle.sites:
            raise UnknownTarget(f"target {atom!r} references a site outside the bundle")
        if kind == "q" and site == TARGET_ID:
            raise UnknownTarget("q:0 does not exist; the target ratio is identically 1")
    sub = data.subset(bundle.sites)
    config = bundle.config
    propensity = dict(bundle.propensity)
    mu0 = dict(bundle.mu0)
    mu1 = dict(bundle.mu1)
    cond_var = dict(bundle.cond_var)
    density_ratio = dict(bundle.density_ratio)
    for k in bundle.sites:
        if misspec.hits("pi", k):
            propensity[k] = fit_propensity(sub, k, config, misspec.distortion)
        refit_mu0 = misspec.hits("mu0", k)
        refit_mu1 = misspec.hits("mu1", k)
        if refit_mu0 or refit_mu1:
            m0, m1 = fit_outcome_models(
                sub, k, config,
                mu0_map=misspec.distortion if refit_mu0 else config.mu0_map,
                mu1_map=misspec.distortion if refit_mu1 else config.mu1_map,
            )
            if refit_mu0:
                mu0[k] = m0
                cond_var[(0, k)] = fit_cond_variance(sub, 0, k, m0, config)
            if refit_mu1:
                mu1[k] = m1
                cond_var[(1, k)] = fit_cond_variance(sub, 1, k, m1, config)
        if k != TARGET_ID and misspec.hits("q", k):
            density_ratio[k] = fit_density_ratio(sub, k, config, misspec.distortion)
    tau_model = bundle.tau_model
    if misspec.hits("tau") and bundle.tau_model is not None:
        tau_model = fit_tau(sub, bundle.sites, bundle.measure, config, misspec.distortion)
    mu1_pooled = bundle.mu1_pooled
    if misspec.hits("mu1_pooled") and bundle.mu1_pooled is not None:
        mu1_pooled = fit_pooled_arm(sub, bundle.sites, 1, misspec.distortion)
    mu0_pooled = bundle.mu0_pooled
    if misspec.hits("mu0_pooled") and bundle.mu0_pooled is not None:
        mu0_pooled = fit_pooled_arm(sub, bundle.sites, 0, misspec.distortion)
    return NuisanceBundle(
        measure=bundle.measure, sites=bundle.sites,
        propensity=propensity, mu0=mu0, mu1=mu1,
        cond_var=cond_var, density_ratio=density_ratio,
        tau_model=tau_model, mu1_pooled=mu1_pooled, mu0_pooled=mu0_pooled,
        config=config,
    )


# -- serialization ----------------------------------------------------------------


def config_to_dict(config: NuisanceConfig) -> dict:
    raw = dataclasses.asdict(config)
    raw["propensity_clip"] = list(config.propensity_clip)
    raw["density_clip"] = list(config.density_clip)
    return raw


def config_from_dict(raw: dict) -> NuisanceConfig:
    raw = dict(raw)
    raw["propensity_clip"] = tuple(raw["propensity_clip"])
    raw["density_clip"] = tuple(raw["density_clip"])
    return NuisanceConfig(**raw)


def bundle_to_dict(bundle: NuisanceBundle) -> dict:
    """JSON form of a fitted bundle; the federated wire carries this."""
    return {
        "measure": bundle.measure.kind,
        "sites": list(bundle.sites),
        "propensity": {str(k): m.to_dict() for k, m in bundle.propensity.items()},
        "mu0": {str(k): m.to_dict() for k, m in bundle.mu0.items()},
        "mu1": {str(k): m.to_dict() for k, m in bundle.mu1.items()},
        "cond_var": {
            f"{a}:{k}": m.to_dict() for (a, k), m in bundle.cond_var.items()
        },
        "density_ratio": {
            str(k): m.to_dict() for k, m in bundle.density_ratio.items()
        },
        "tau_model": bundle.tau_model.to_dict() if bundle.tau_model else None,
        "mu1_pooled": bundle.mu1_pooled.to_dict() if bundle.mu1_pooled else None,
        "mu0_pooled": bundle.mu0_pooled.to_dict() if bundle.mu0_pooled else None,
        "config": config_to_dict(bundle.config),
    }


def bundle_from_dict(raw: dict) -> NuisanceBundle:
    def cv_key(text: str) -> Tuple[int, int]:
        a, k = text.split(":")
        return int(a), int(k)

    return NuisanceBundle(
        measure=parse_measure(raw["measure"]),
        sites=tuple(raw["sites"]),
        propensity={int(k): GlmModel.from_dict(m) for k, m in raw["propensity"].items()},
        mu0={int(k): GlmModel.from_dict(m) for k, m in raw["mu0"].items()},
        mu1={int(k): GlmModel.from_dict(m) for k, m in raw["mu1"].items()},
        cond_var={
            cv_key(key): VarianceModel.from_dict(m)
            for key, m in raw["cond_var"].items()
        },
        density_ratio={
            int(k): DensityRatioModel.from_dict(m)
            for k, m in raw["density_ratio"].items()
        },
        tau_model=TauModel.from_dict(raw["tau_model"]) if raw["tau_model"] else None,
        mu1_pooled=GlmModel.from_dict(raw["mu1_pooled"]) if raw["mu1_pooled"] else None,
        mu0_pooled=GlmModel.from_dict(raw["mu0_pooled"]) if raw["mu0_pooled"] else None,
        config=config_from_dict(raw["config"]),
    )
