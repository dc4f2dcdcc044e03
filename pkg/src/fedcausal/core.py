"""Data model for multi-site observational data and causal measures.

A study consists of a target site (id 0) and K source sites, each holding
tuples V = (Y, X, A, S).  Rows never cross the site boundary inside this
package; estimators consume per-site arrays and combine only per-site
aggregates.  The causal measure m(psi0, psi1) is represented together with
its base decomposition g_z / g_z^{-1}, which links treated and control
outcome regressions through the conditional effect function tau(x).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

# 95% Wald interval quantile, fixed by convention.
Z95 = 1.959964

# Floor on |psi0| below which risk ratios are treated as singular.
RR_FLOOR = 1e-10

TARGET_ID = 0


class FedcausalError(Exception):
    """Base class for all package errors."""


class DomainViolation(FedcausalError):
    """A causal-measure argument left the measure's domain."""


class ValidationError(FedcausalError):
    """Multi-site data failed a structural check."""


class MissingTargetSite(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyTreatmentArm(ValidationError):
    def __init__(self, site_id: int, arm: int):
        super().__init__(f"site {site_id} has no rows with a={arm}")
        self.site_id = site_id
        self.arm = arm


class NoTargetRows(ValidationError):
    pass


class SchemaError(FedcausalError):
    """A data file violated the expected column schema."""


class IoFailure(FedcausalError):
    pass


def _as_float_array(values, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Individual:
    """One observed tuple V = (y, x, a, s)."""

    y: float
    x: np.ndarray
    a: int
    s: int

    def __post_init__(self):
        if self.a not in (0, 1):
            raise ValidationError(f"treatment indicator must be 0 or 1, got {self.a}")
        if self.s < 0:
            raise ValidationError(f"site index must be nonnegative, got {self.s}")
        if not (math.isfinite(self.y) and np.all(np.isfinite(self.x))):
            raise ValidationError("individual contains non-finite coordinates")


@dataclass(frozen=True)
class SiteDataset:
    """All rows belonging to one site, stored as column arrays."""

    site_id: int
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray  # shape (n, p)

    def __post_init__(self):
        y = _as_float_array(self.y, "y", 1)
        a = np.asarray(self.a)
        x = _as_float_array(self.x, "x", 2)
        if not np.isin(a, (0, 1)).all():
            raise ValidationError("treatment indicator must be binary")
        a = a.astype(np.int8)
        n = y.shape[0]
        if a.shape[0] != n or x.shape[0] != n:
            raise DimensionMismatch(
                f"site {self.site_id}: y, a, x row counts disagree "
                f"({n}, {a.shape[0]}, {x.shape[0]})"
            )
        if n == 0:
            raise ValidationError(f"site {self.site_id} is empty")
        for name, arr in (("y", y), ("a", a), ("x", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def rows(self) -> Iterator[Individual]:
        for i in range(self.n):
            yield Individual(float(self.y[i]), self.x[i], int(self.a[i]), self.site_id)


@dataclass(frozen=True)
class MultiSiteData:
    """Immutable map from site id to its dataset; site 0 is the target."""

    sites: Dict[int, SiteDataset]

    def __post_init__(self):
        if TARGET_ID not in self.sites:
            raise MissingTargetSite("site 0 (target) is required")
        dims = {k: ds.p for k, ds in self.sites.items()}
        if len(set(dims.values())) != 1:
            raise DimensionMismatch(f"covariate dimension differs across sites: {dims}")
        for k, ds in self.sites.items():
            if ds.site_id != k:
                raise ValidationError(f"site map key {k} disagrees with dataset id {ds.site_id}")

    @property
    def site_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.sites))

    @property
    def source_ids(self) -> Tuple[int, ...]:
        return tuple(k for k in self.site_ids if k != TARGET_ID)

    @property
    def n(self) -> int:
        return sum(ds.n for ds in self.sites.values())

    @property
    def p(self) -> int:
        return self.sites[TARGET_ID].p

    @property
    def target(self) -> SiteDataset:
        return self.sites[TARGET_ID]

    def subset(self, site_ids: Iterable[int]) -> "MultiSiteData":
        ids = sorted(set(site_ids) | {TARGET_ID})
        missing = [k for k in ids if k not in self.sites]
        if missing:
            raise ValidationError(f"unknown site ids {missing}")
        return MultiSiteData({k: self.sites[k] for k in ids})

    def stacked(self) -> "StackedData":
        """Concatenate sites in ascending id order into flat row arrays."""
        ids = self.site_ids
        y = np.concatenate([self.sites[k].y for k in ids])
        a = np.concatenate([self.sites[k].a for k in ids])
        x = np.concatenate([self.sites[k].x for k in ids])
        s = np.concatenate([np.full(self.sites[k].n, k, dtype=np.int64) for k in ids])
        slices = {}
        start = 0
        for k in ids:
            stop = start + self.sites[k].n
            slices[k] = slice(start, stop)
            start = stop
        return StackedData(y=y, a=a, x=x, s=s, slices=slices)


@dataclass(frozen=True)
class StackedData:
    """Row-aligned view of a MultiSiteData, ascending site order."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    s: np.ndarray
    slices: Dict[int, slice]

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class CausalMeasure:
    """Contrast m(psi0, psi1) with base decomposition g_z(z') and inverse.

    Risk ratio:      m = psi1 / psi0,  g_z(z') = z'/z,  g_z^{-1}(z') = z'z.
    Risk difference: m = psi1 - psi0,  g_z(z') = z'-z,  g_z^{-1}(z') = z'+z.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("rr", "rd"):
            raise ValueError(f"unknown causal measure kind {self.kind!r}")

    @property
    def is_ratio(self) -> bool:
        return self.kind == "rr"

    def __str__(self) -> str:
        return self.kind


RISK_RATIO = CausalMeasure("rr")
RISK_DIFFERENCE = CausalMeasure("rd")


def parse_measure(text: str) -> CausalMeasure:
    try:
        return CausalMeasure(text.strip().lower())
    except ValueError as exc:
        raise DomainViolation(str(exc)) from None


def _check_rr_base(psi0, floor: float = RR_FLOOR) -> None:
    bad = np.any(np.asarray(psi0) == 0.0)
    near = np.any(np.abs(np.asarray(psi0)) <= floor)
    if bad or near:
        raise DomainViolation(
            f"risk ratio base is zero or within the singularity floor {floor:g}"
        )


def measure_apply(m: CausalMeasure, psi0, psi1):
    """Evaluate m(psi0, psi1)."""
    if m.is_ratio:
        _check_rr_base(psi0)
        return psi1 / psi0
    return psi1 - psi0


def measure_g(m: CausalMeasure, base, value):
    """g_base(value): RR divides, RD subtracts."""
    if m.is_ratio:
        _check_rr_base(base)
        return value / base
    return value - base


def measure_g_inverse(m: CausalMeasure, mu0, tau):
    """Recover mu1 = g_{mu0}^{-1}(tau): tau*mu0 for RR, tau+mu0 for RD."""
    if m.is_ratio:
        return tau * mu0
    return tau + mu0


def measure_eif_combine(m: CausalMeasure, psi0: float, psi1: float, phi0, phi1):
    """Per-observation influence of m(psi0, psi1) given component influences.

    Delta method along the plug-in path: for RR the pathwise derivative is
    phi1/psi0 - (psi1/psi0^2) phi0; for RD it is phi1 - phi0.
    """
    if m.is_ratio:
        _check_rr_base(psi0)
        return phi1 / psi0 - (psi1 / psi0**2) * phi0
    return phi1 - phi0


@dataclass(frozen=True)
class InfluenceSample:
    """Per-observation EIF evaluations, aligned with StackedData row order."""

    values: np.ndarray
    psi_component: str  # "psi0", "psi1" or "measure"

    def __post_init__(self):
        values = _as_float_array(self.values, "values", 1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.psi_component not in ("psi0", "psi1", "measure"):
            raise ValueError(f"unknown psi component {self.psi_component!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def mean(self) -> float:
        return float(np.mean(self.values))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phi"])
            for v in self.values:
                writer.writerow([repr(float(v))])


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with EIF-based Wald inference and provenance."""

    psi_hat: float
    psi0_hat: float
    psi1_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    method: str
    selected_sites: Tuple[int, ...]
    n_used: int
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be nonnegative")
        if not (self.ci_lower <= self.psi_hat <= self.ci_upper):
            raise ValueError("confidence interval must bracket the point estimate")
        object.__setattr__(self, "selected_sites", tuple(sorted(self.selected_sites)))

    def covers(self, truth: float) -> bool:
        return self.ci_lower <= truth <= self.ci_upper

    @property
    def ci_length(self) -> float:
        return self.ci_upper - self.ci_lower

    def to_json(self) -> str:
        payload = {
            "psi_hat": self.psi_hat,
            "psi0_hat": self.psi0_hat,
            "psi1_hat": self.psi1_hat,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "method": self.method,
            "selected_sites": list(self.selected_sites),
            "n_used": self.n_used,
            "diagnostics": _jsonable(self.diagnostics),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        raw = json.loads(text)
        raw["selected_sites"] = tuple(raw["selected_sites"])
        return cls(**raw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def wald_interval(psi_hat: float, se: float) -> Tuple[float, float]:
    return psi_hat - Z95 * se, psi_hat + Z95 * se


def resample_site(ds: SiteDataset, seed: int, replicate: int) -> SiteDataset:
    """Bootstrap resample of one site's rows, preserving its sample size.

    The stream is keyed by (seed, replicate, site id), so a pooled driver and
    each federated site draw identical indices without coordination.
    """
    seq = np.random.SeedSequence(seed, spawn_key=(1, replicate, ds.site_id))
    idx = np.random.default_rng(seq).integers(0, ds.n, size=ds.n)
    return SiteDataset(site_id=ds.site_id, y=ds.y[idx], a=ds.a[idx], x=ds.x[idx])


@dataclass(frozen=True)
class ValidationReport:
    """Per-site arm counts produced by validate_multisite."""

    arm_counts: Dict[int, Tuple[int, int]]  # site -> (n control, n treated)
    p: int
    n_total: int


def validate_multisite(data: MultiSiteData) -> ValidationReport:
    """Check structural preconditions shared by every estimator.

    Raises MissingTargetSite, EmptyTreatmentArm or DimensionMismatch;
    the check is read-only and idempotent.
    """
    if TARGET_ID not in data.sites:
        raise MissingTargetSite("site 0 (target) is required")
    dims = {k: ds.p for k, ds in data.sites.items()}
    if len(set(dims.values())) != 1:
        raise DimensionMismatch(f"covariate dimension differs across sites: {dims}")
    arm_counts = {}
    for k in data.site_ids:
        ds = data.sites[k]
        n_treated = int(np.sum(ds.a))
        n_control = ds.n - n_treated
        for arm, count in ((0, n_control), (1, n_treated)):
            if count == 0:
                raise EmptyTreatmentArm(k, arm)
        arm_counts[k] = (n_control, n_treated)
    return ValidationReport(arm_counts=arm_counts, p=data.p, n_total=data.n)


# -- per-site CSV interchange -------------------------------------------------

CSV_HEADER_PREFIX = ("y", "a")


def expected_header(p: int) -> Tuple[str, ...]:
    return CSV_HEADER_PREFIX + tuple(f"x{j}" for j in range(1, p + 1))


def read_site_csv(path, site_id: int) -> SiteDataset:
    """Read one site's rows from `y,a,x1,...,xp` CSV; missing values rejected."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: file is empty") from None
            header = tuple(h.strip() for h in header)
            if len(header) < 3 or header[:2] != CSV_HEADER_PREFIX:
                raise SchemaError(
                    f"{path}: header must start with 'y,a,x1,...', got {','.join(header)}"
                )
            p = len(header) - 2
            if header != expected_header(p):
                offending = [h for h, e in zip(header, expected_header(p)) if h != e]
                raise SchemaError(
                    f"{path}: unexpected column name(s) {offending}; "
                    f"expected {','.join(expected_header(p))}"
                )
            y, a, x = [], [], []
            for i, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise SchemaError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
                cells = [c.strip() for c in row]
                if any(c == "" or c.lower() in ("na", "nan") for c in cells):
                    col = header[[c == "" or c.lower() in ("na", "nan") for c in cells].index(True)]
                    raise SchemaError(f"{path}: missing value at row {i}, column {col}")
                try:
                    y.append(float(cells[0]))
                    a.append(int(float(cells[1])))
                    x.append([float(c) for c in cells[2:]])
                except ValueError as exc:
                    raise SchemaError(f"{path}: row {i}: {exc}") from None
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    if not y:
        raise SchemaError(f"{path}: no data rows")
    return SiteDataset(site_id=site_id, y=np.array(y), a=np.array(a), x=np.array(x))


def write_site_csv(path, dataset: SiteDataset) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(expected_header(dataset.p))
            for i in range(dataset.n):
                writer.writerow(
                    [repr(float(dataset.y[i])), int(dataset.a[i])]
                    + [repr(float(v)) for v in dataset.x[i]]
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None
