"""Aggregate-only federation driver.

A cohort couples a coordinator with one worker per site.  All cross-site
computation happens in synchronous rounds: the coordinator broadcasts one
request, every addressed worker answers with aggregate statistics (model
coefficients, gram blocks, partial sums), and the coordinator reduces the
answers in ascending site-id order.  Row-level data never enters a message,
and payload sizes are governed by model dimension, never by site sample
size.

Two transports deliver messages.  MemoryTransport hands each message through
unchanged; FileTransport serializes it to outbox/<round>_<origin>_<kind>.json
and returns the parsed file content.  Payloads hold plain Python floats whose
JSON text round-trips exactly, so a memory run and a file run of the same
cohort produce bit-identical results.  Both match the pooled in-memory
estimators because workers call the same per-site kernels and the
coordinator performs the same ascending-order additions.

The post-federation weighting layer also lives here: pairwise target+source
estimates, the gram of their centered influence rows, the penalized simplex
program for the blending weights, cross-validated penalty selection, and the
fixed-weights estimator.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    CausalMeasure,
    EmptyTreatmentArm,
    EstimateReport,
    FedcausalError,
    IoFailure,
    MissingTargetSite,
    MultiSiteData,
    RISK_RATIO,
    SchemaError,
    SiteDataset,
    TARGET_ID,
    measure_apply,
    measure_eif_combine,
    parse_measure,
    resample_site,
    wald_interval,
)
from .estimators import _check_mode, psi0_site_arrays, psi1_site_arrays, ridge_flags
from .nuisance import (
    DEFAULT_CONFIG,
    DensityRatioModel,
    GlmModel,
    MisspecSpec,
    NO_MISSPEC,
    NuisanceBundle,
    NuisanceConfig,
    TauModel,
    VarianceModel,
    _accumulate,
    arm_site_stats,
    bundle_from_dict,
    bundle_to_dict,
    design_matrix,
    fit_logistic,
    irls_driver,
    logistic_block_stats,
    site_cond_variance,
    site_outcome_models,
    solve_linear_system,
    tau_site_stats,
)


class ProtocolViolation(FedcausalError):
    pass


class EmptyGrid(FedcausalError):
    pass


SCHEMA_VERSION = 1
COORDINATOR = "coord"

# Request kinds a worker understands.  "local_models" answers with fitted
# model parameters; everything else answers with aggregate sums.
MODEL_KINDS = frozenset({"local_models"})
AGGREGATE_KINDS = frozenset({
    "counts",
    "logistic_init",
    "logistic_stats",
    "tau_stats",
    "arm_stats",
    "psi_parts",
    "phi_sums",
    "gram_target",
    "gram_source",
    "gram_target_folds",
    "gram_source_folds",
})
KNOWN_KINDS = MODEL_KINDS | AGGREGATE_KINDS


@dataclass(frozen=True)
class Message:
    """One wire message; payload must contain only JSON-plain values."""

    round: int
    origin: str
    kind: str
    payload: dict
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        try:
            return json.dumps(
                {
                    "round": self.round,
                    "origin": self.origin,
                    "kind": self.kind,
                    "payload": self.payload,
                    "schema_version": self.schema_version,
                },
                sort_keys=True,
                allow_nan=False,
            )
        except (TypeError, ValueError) as exc:
            raise ProtocolViolation(f"unserializable payload: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Message":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed message: {exc}") from None
        missing = {"round", "origin", "kind", "payload", "schema_version"} - set(raw)
        if missing:
            raise SchemaError(f"message missing fields {sorted(missing)}")
        if raw["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(
                f"schema version {raw['schema_version']} unsupported "
                f"(expected {SCHEMA_VERSION})"
            )
        return cls(
            round=raw["round"], origin=raw["origin"], kind=raw["kind"],
            payload=raw["payload"], schema_version=raw["schema_version"],
        )


class MemoryTransport:
    """In-process delivery; keeps the transcript as a list of messages."""

    def __init__(self):
        self.log: List[Message] = []

    def deliver(self, msg: Message) -> Message:
        self.log.append(msg)
        return msg


class FileTransport:
    """Delivery through outbox/<round>_<origin>_<kind>.json files.

    Every message is written, then read back and parsed; the parsed copy is
    what flows onward, so all numbers pass through their JSON text.  Python
    prints floats in shortest round-trip form, hence the read-back value is
    bit-identical and a file run matches a memory run exactly.  The outbox is
    append-only: overwriting an existing message is a protocol violation.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.outbox = self.root / "outbox"
        try:
            self.outbox.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create outbox under {self.root}: {exc}") from None
        self.log: List[Message] = []

    def deliver(self, msg: Message) -> Message:
        path = self.outbox / f"{msg.round:05d}_{msg.origin}_{msg.kind}.json"
        if path.exists():
            raise ProtocolViolation(f"transcript is append-only: {path.name} exists")
        text = msg.to_json()
        try:
            path.write_text(text)
            echoed = Message.from_json(path.read_text())
        except OSError as exc:
            raise IoFailure(f"outbox write failed for {path.name}: {exc}") from None
        self.log.append(echoed)
        return echoed


def audit_transcript(log: Sequence[Message], limit: int = 32) -> int:
    """Fail if any payload holds a list longer than limit entries.

    Legitimate payloads scale with model dimension (coefficient vectors,
    gram blocks, fold summaries), all far below the limit; a row-level leak
    scales with site sample size and trips it.  Returns messages checked.
    """

    def walk(node, trail):
        if isinstance(node, dict):
            for key, val in node.items():
                walk(val, f"{trail}.{key}")
        elif isinstance(node, (list, tuple)):
            if len(node) > limit:
                raise ProtocolViolation(
                    f"payload list at {trail} has {len(node)} entries (limit {limit})"
                )
            for i, val in enumerate(node):
                walk(val, f"{trail}[{i}]")

    for msg in log:
        if msg.kind not in KNOWN_KINDS:
            raise ProtocolViolation(f"unknown message kind {msg.kind!r}")
        walk(msg.payload, f"{msg.kind}@{msg.round}")
    return len(log)


# -- site worker ------------------------------------------------------------------


class SiteNode:
    """One site's private rows; answers aggregate-only requests.

    Bootstrap replicates are materialized locally from a stream keyed by
    (seed, replicate, site id); the pooled driver uses the same key, so no
    indices ever cross the wire.
    """

    def __init__(self, dataset: SiteDataset, config: NuisanceConfig = DEFAULT_CONFIG,
                 seed: int = 0):
        self._data = dataset
        self.site_id = dataset.site_id
        self.config = config
        self.seed = seed
        self._replicates: Dict[int, SiteDataset] = {}
        self._cache: Dict[str, dict] = {}
        self._folds: Dict[int, np.ndarray] = {}
        self._last_round = 0

    # -- helpers --

    def dataset(self, replicate: Optional[int]) -> SiteDataset:
        if replicate is None:
            return self._data
        if replicate not in self._replicates:
            self._replicates[replicate] = resample_site(self._data, self.seed, replicate)
        return self._replicates[replicate]

    def release(self, prefix: str, replicate: Optional[int] = None) -> None:
        """Drop cached influence rows (and optionally a replicate's resample)."""
        self._cache = {
            key: val for key, val in self._cache.items()
            if not key.startswith(prefix)
        }
        if replicate is not None:
            self._replicates.pop(replicate, None)

    def fold_ids(self, n_folds: int) -> np.ndarray:
        # fold split of the original rows, deterministic per (seed, site)
        if n_folds not in self._folds:
            seq = np.random.SeedSequence(self.seed, spawn_key=(2, self.site_id))
            perm = np.random.default_rng(seq).permutation(self._data.n)
            folds = np.empty(self._data.n, dtype=np.int64)
            folds[perm] = np.arange(self._data.n) % n_folds
            self._folds[n_folds] = folds
        return self._folds[n_folds]

    def _labels(self, n: int) -> np.ndarray:
        value = 1.0 if self.site_id == TARGET_ID else 0.0
        return np.full(n, value)

    def _cached_phi1(self, ctx: str, center: float) -> np.ndarray:
        c = self._cache[ctx]
        return (c["plug1"] + c["aug1"] - c["mask"] * center) / c["pr"]

    # -- request handlers --

    def handle(self, msg: Message) -> Message:
        if msg.schema_version != SCHEMA_VERSION:
            raise SchemaError(f"schema version {msg.schema_version} unsupported")
        if msg.kind not in KNOWN_KINDS:
            raise ProtocolViolation(f"unknown message kind {msg.kind!r}")
        if msg.round <= self._last_round:
            raise ProtocolViolation(
                f"round {msg.round} arrived after round {self._last_round}"
            )
        self._last_round = msg.round
        out = getattr(self, f"_on_{msg.kind}")(msg.payload)
        return Message(
            round=msg.round, origin=str(self.site_id), kind=msg.kind, payload=out
        )

    def _on_counts(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        treated = int(np.sum(ds.a))
        return {"n": ds.n, "p": ds.p, "arm1": treated, "arm0": ds.n - treated}

    def _on_local_models(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        config = self.config
        misspec = MisspecSpec(
            targets=frozenset(payload["targets"]), distortion=payload["distortion"]
        )

        def pick(kind: str, default: str) -> str:
            return misspec.distortion if misspec.hits(kind, self.site_id) else default

        for arm in (0, 1):
            if int(np.sum(ds.a == arm)) == 0:
                raise EmptyTreatmentArm(self.site_id, arm)
        propensity = fit_logistic(
            ds.x, ds.a, max_iter=config.max_iter, tol=config.tol,
            feature_map=pick("pi", config.propensity_map),
            clip=config.propensity_clip, ridge=config.ridge,
        )
        mu0, mu1 = site_outcome_models(
            ds, config,
            mu0_map=pick("mu0", config.mu0_map),
            mu1_map=pick("mu1", config.mu1_map),
        )
        return {
            "propensity": propensity.to_dict(),
            "mu0": mu0.to_dict(),
            "mu1": mu1.to_dict(),
            "var0": site_cond_variance(ds, 0, mu0, config).to_dict(),
            "var1": site_cond_variance(ds, 1, mu1, config).to_dict(),
        }

    def _on_logistic_init(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        labels = self._labels(ds.n)
        return {
            "n1": float(np.sum(labels)),
            "rows": ds.n,
            "dim": design_matrix(ds.x, payload["feature_map"]).shape[1],
        }

    def _on_logistic_stats(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        design = design_matrix(ds.x, payload["feature_map"])
        beta = np.asarray(payload["beta"], dtype=float)
        hess, grad, max_eta = logistic_block_stats(design, self._labels(ds.n), beta)
        return {"hess": hess.tolist(), "grad": grad.tolist(), "max_eta": max_eta}

    def _on_tau_stats(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        gram, moment = tau_site_stats(
            ds, parse_measure(payload["measure"]), self.config, payload["feature_map"]
        )
        return {"gram": gram.tolist(), "moment": moment.tolist()}

    def _on_arm_stats(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        gram, moment = arm_site_stats(ds, payload["arm"], payload["feature_map"])
        return {"gram": gram.tolist(), "moment": moment.tolist()}

    def _on_psi_parts(self, payload: dict) -> dict:
        ds = self.dataset(payload.get("replicate"))
        bundle = bundle_from_dict(payload["bundle"])
        sites = tuple(payload["sites"])
        mode = payload["mode"]
        plug1, aug1, deg1 = psi1_site_arrays(bundle, sites, mode, ds)
        plug0, aug0, deg0 = psi0_site_arrays(bundle, sites, mode, ds)
        self._cache[payload["ctx"]] = {
            "plug1": plug1, "aug1": aug1, "plug0": plug0, "aug0": aug0,
            "pr": payload["pr_s0"],
            "mask": 1.0 if self.site_id == TARGET_ID else 0.0,
        }
        return {
            "n": ds.n,
            "plug1": float(np.sum(plug1)), "aug1": float(np.sum(aug1)), "deg1": deg1,
            "plug0": float(np.sum(plug0)), "aug0": float(np.sum(aug0)), "deg0": deg0,
        }

    def _on_phi_sums(self, payload: dict) -> dict:
        c = self._cache[payload["ctx"]]
        psi0 = payload["psi0"]
        psi1 = payload["psi1"]
        phi1 = (c["plug1"] + c["aug1"] - c["mask"] * psi1) / c["pr"]
        phi0 = (c["plug0"] + c["aug0"] - c["mask"] * psi0) / c["pr"]
        phi = measure_eif_combine(
            parse_measure(payload["measure"]), psi0, psi1, phi0, phi1
        )
        return {"sum_sq": float(np.sum(phi * phi))}

    def _on_gram_target(self, payload: dict) -> dict:
        phis = [self._cached_phi1(ctx, payload["center"]) for ctx in payload["ctxs"]]
        m = len(phis)
        cross = [[0.0] * m for _ in range(m)]
        for i in range(m):
            for j in range(i, m):
                val = float(np.sum(phis[i] * phis[j]))
                cross[i][j] = val
                cross[j][i] = val
        return {"cross": cross}

    def _on_gram_source(self, payload: dict) -> dict:
        ctx = payload["ctx_map"][str(self.site_id)]
        phi = self._cached_phi1(ctx, 0.0)  # mask is 0 off target; center drops out
        return {"sum_sq": float(np.sum(phi * phi))}

    def _on_gram_target_folds(self, payload: dict) -> dict:
        n_folds = payload["n_folds"]
        folds = self.fold_ids(n_folds)
        phis = [self._cached_phi1(ctx, payload["center"]) for ctx in payload["ctxs"]]
        m = len(phis)
        cross = []
        count = []
        for f in range(n_folds):
            mask = folds == f
            block = [[0.0] * m for _ in range(m)]
            for i in range(m):
                for j in range(i, m):
                    val = float(np.sum(phis[i][mask] * phis[j][mask]))
                    block[i][j] = val
                    block[j][i] = val
            cross.append(block)
            count.append(int(np.sum(mask)))
        return {"cross": cross, "count": count}

    def _on_gram_source_folds(self, payload: dict) -> dict:
        n_folds = payload["n_folds"]
        folds = self.fold_ids(n_folds)
        ctx = payload["ctx_map"][str(self.site_id)]
        phi = self._cached_phi1(ctx, 0.0)
        sums = []
        count = []
        for f in range(n_folds):
            mask = folds == f
            sums.append(float(np.sum(phi[mask] * phi[mask])))
            count.append(int(np.sum(mask)))
        return {"sum_sq": sums, "count": count}


# -- coordinator ------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseEstimate:
    """One source site's pairwise treated-arm estimate and gram row."""

    k: int
    psi1_pair: float
    eif_gram_row: np.ndarray
    delta_hat: float

    def __post_init__(self):
        if self.delta_hat < 0:
            raise ValueError("delta_hat must be nonnegative")
        row = np.asarray(self.eif_gram_row, dtype=float)
        row.setflags(write=False)
        object.__setattr__(self, "eif_gram_row", row)


@dataclass(frozen=True)
class FederatedWeights:
    """Blending weights over (target, sources), on the probability simplex."""

    w: np.ndarray
    lambda_n: float
    objective_value: float
    converged: bool = True

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class WeightSolution:
    """Everything the weighting pipeline produced for one dataset."""

    weights: FederatedWeights
    pairs: Tuple[PairwiseEstimate, ...]
    gram: np.ndarray
    b: np.ndarray
    c: float
    psi0_target: float
    psi1_target: float
    n_total: int
    cv_losses: Optional[Dict[float, float]] = None

    @property
    def pair_ids(self) -> Tuple[int, ...]:
        return tuple(p.k for p in self.pairs)


class Cohort:
    """Coordinator plus one SiteNode per site, joined by a transport."""

    def __init__(
        self,
        data: MultiSiteData,
        transport=None,
        config: NuisanceConfig = DEFAULT_CONFIG,
        measure: CausalMeasure = RISK_RATIO,
        seed: int = 0,
    ):
        if TARGET_ID not in data.sites:
            raise MissingTargetSite("site 0 (target) is required")
        self.config = config
        self.measure = measure
        self.seed = seed
        self.transport = transport if transport is not None else MemoryTransport()
        self.workers = {
            k: SiteNode(ds, config, seed) for k, ds in data.sites.items()
        }
        self._round = 0
        self._counts = self._exchange("counts", {}, self.site_ids)

    @property
    def site_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.workers))

    @property
    def source_ids(self) -> Tuple[int, ...]:
        return tuple(k for k in self.site_ids if k != TARGET_ID)

    @property
    def n_total(self) -> int:
        return sum(self._counts[k]["n"] for k in self.site_ids)

    def site_n(self, k: int) -> int:
        return self._counts[k]["n"]

    def release(self, prefix: str, replicate: Optional[int] = None) -> None:
        """Local resource bookkeeping only; nothing crosses the wire."""
        for k in self.site_ids:
            self.workers[k].release(prefix, replicate)

    def _exchange(self, kind: str, payload: dict, to: Sequence[int]) -> Dict[int, dict]:
        """One synchronous round: broadcast, collect, key responses by origin.

        Responses are keyed by origin and consumed in ascending site order,
        so delivery order cannot change any reduction.
        """
        self._round += 1
        request = self.transport.deliver(
            Message(round=self._round, origin=COORDINATOR, kind=kind, payload=payload)
        )
        responses = {}
        for k in sorted(to):
            reply = self.transport.deliver(self.workers[k].handle(request))
            if reply.round != request.round:
                raise ProtocolViolation(
                    f"response round {reply.round} does not match request "
                    f"round {request.round}"
                )
            responses[int(reply.origin)] = reply.payload
        return responses

    # -- federated nuisance fits --

    def _fit_density(self, k: int, feature_map: str,
                     replicate: Optional[int]) -> DensityRatioModel:
        pair = (TARGET_ID, k)
        init = self._exchange(
            "logistic_init",
            {"pair": k, "feature_map": feature_map, "replicate": replicate},
            pair,
        )
        dims = {init[j]["dim"] for j in pair}
        if len(dims) != 1:
            raise ProtocolViolation(f"feature dimension differs across pair {pair}")
        dim = dims.pop()
        n1 = sum(init[j]["n1"] for j in sorted(pair))
        n0 = sum(init[j]["rows"] for j in sorted(pair)) - n1

        def stats(beta: np.ndarray):
            out = self._exchange(
                "logistic_stats",
                {"pair": k, "feature_map": feature_map,
                 "beta": beta.tolist(), "replicate": replicate},
                pair,
            )
            hess = np.zeros((dim, dim))
            grad = np.zeros(dim)
            max_eta = 0.0
            for j in sorted(out):
                hess += np.asarray(out[j]["hess"], dtype=float)
                grad += np.asarray(out[j]["grad"], dtype=float)
                max_eta = max(max_eta, out[j]["max_eta"])
            return hess, grad, max_eta

        coef, via_ridge = irls_driver(
            stats, dim, n1, n0,
            self.config.max_iter, self.config.tol, self.config.ridge,
        )
        model = GlmModel(
            family="logistic", coef=coef, feature_map=feature_map,
            converged_via_ridge=via_ridge,
        )
        return DensityRatioModel(
            k=k, model=model,
            prior_correction=math.log(self.site_n(TARGET_ID) / self.site_n(k)),
            clip=self.config.density_clip,
        )

    def _fit_tau(self, sites: Sequence[int], feature_map: str,
                 replicate: Optional[int]) -> TauModel:
        out = self._exchange(
            "tau_stats",
            {"feature_map": feature_map, "measure": self.measure.kind,
             "replicate": replicate},
            sites,
        )
        gram, moment = _accumulate([
            (np.asarray(out[k]["gram"], dtype=float),
             np.asarray(out[k]["moment"], dtype=float))
            for k in sorted(out)
        ])
        model = solve_linear_system(gram, moment, feature_map)
        use_scaled = self.measure.is_ratio and self.config.tau_weighting == "mu0_squared"
        return TauModel(
            coef=model.coef, feature_map=feature_map,
            measure_kind=self.measure.kind,
            weighting="mu0_squared" if use_scaled else "plain",
        )

    def _fit_arm(self, sites: Sequence[int], arm: int, feature_map: str,
                 replicate: Optional[int]) -> GlmModel:
        out = self._exchange(
            "arm_stats",
            {"arm": arm, "feature_map": feature_map, "replicate": replicate},
            sites,
        )
        gram, moment = _accumulate([
            (np.asarray(out[k]["gram"], dtype=float),
             np.asarray(out[k]["moment"], dtype=float))
            for k in sorted(out)
        ])
        return solve_linear_system(gram, moment, feature_map)

    def fit_bundle(
        self,
        sites: Optional[Sequence[int]] = None,
        misspec: MisspecSpec = NO_MISSPEC,
        need_tau: bool = True,
        need_pooled: bool = False,
        replicate: Optional[int] = None,
    ) -> NuisanceBundle:
        """Federated mirror of the pooled bundle fit (identical values)."""
        ids = (
            tuple(sorted(set(sites) | {TARGET_ID}))
            if sites is not None else self.site_ids
        )
        config = self.config

        def pick(kind: str, site: Optional[int], default: str) -> str:
            return misspec.distortion if misspec.hits(kind, site) else default

        local = self._exchange(
            "local_models",
            {"targets": sorted(misspec.targets), "distortion": misspec.distortion,
             "replicate": replicate},
            ids,
        )
        propensity = {k: GlmModel.from_dict(local[k]["propensity"]) for k in ids}
        mu0 = {k: GlmModel.from_dict(local[k]["mu0"]) for k in ids}
        mu1 = {k: GlmModel.from_dict(local[k]["mu1"]) for k in ids}
        cond_var = {}
        for k in ids:
            cond_var[(0, k)] = VarianceModel.from_dict(local[k]["var0"])
            cond_var[(1, k)] = VarianceModel.from_dict(local[k]["var1"])
        density_ratio = {
            k: self._fit_density(k, pick("q", k, config.density_map), replicate)
            for k in ids if k != TARGET_ID
        }
        tau_model = None
        if need_tau:
            tau_model = self._fit_tau(ids, pick("tau", None, config.tau_map), replicate)
        mu1_pooled = None
        mu0_pooled = None
        if need_pooled:
            mu1_pooled = self._fit_arm(
                ids, 1, pick("mu1_pooled", None, config.mu1_map), replicate
            )
            mu0_pooled = self._fit_arm(
                ids, 0, pick("mu0_pooled", None, config.mu0_map), replicate
            )
        return NuisanceBundle(
            measure=self.measure, sites=ids,
            propensity=propensity, mu0=mu0, mu1=mu1,
            cond_var=cond_var, density_ratio=density_ratio,
            tau_model=tau_model, mu1_pooled=mu1_pooled, mu0_pooled=mu0_pooled,
            config=config,
        )

    # -- federated estimation --

    def _psi_parts(self, ctx: str, bundle: NuisanceBundle, sites: Tuple[int, ...],
                   mode: str, pr_s0: float, replicate: Optional[int]) -> Dict[int, dict]:
        return self._exchange(
            "psi_parts",
            {"ctx": ctx, "bundle": bundle_to_dict(bundle), "sites": list(sites),
             "mode": mode, "pr_s0": pr_s0, "replicate": replicate},
            sites,
        )

    def estimate(
        self,
        mode: str = "mr1",
        sites: Optional[Sequence[int]] = None,
        bundle: Optional[NuisanceBundle] = None,
        misspec: MisspecSpec = NO_MISSPEC,
        replicate: Optional[int] = None,
        ctx: Optional[str] = None,
    ) -> EstimateReport:
        """Federated run of one estimator; equals the pooled report bit for bit."""
        _check_mode(mode, self.measure)
        if mode == "drt":
            ids = (TARGET_ID,)
        else:
            ids = (
                tuple(sorted(set(sites) | {TARGET_ID}))
                if sites is not None else self.site_ids
            )
        if bundle is None:
            bundle = self.fit_bundle(
                ids, misspec,
                need_tau=mode in ("mr1", "drt"), need_pooled=mode == "mr2",
                replicate=replicate,
            )
        if ctx is None:
            tag = "orig" if replicate is None else f"b{replicate}"
            ctx = f"{tag}:est:{mode}:" + ",".join(str(k) for k in ids)
        n = sum(self.site_n(k) for k in ids)
        n0 = self.site_n(TARGET_ID)
        pr = n0 / n
        parts = self._psi_parts(ctx, bundle, ids, mode, pr, replicate)
        plug1 = aug1 = plug0 = aug0 = 0.0
        degenerate = 0
        for k in sorted(parts):
            plug1 += parts[k]["plug1"]
            aug1 += parts[k]["aug1"]
            plug0 += parts[k]["plug0"]
            aug0 += parts[k]["aug0"]
            degenerate += parts[k]["deg1"] + parts[k]["deg0"]
        psi1 = (plug1 + aug1) / n0
        psi0 = (plug0 + aug0) / n0
        psi_hat = measure_apply(self.measure, psi0, psi1)
        phi = self._exchange(
            "phi_sums",
            {"ctx": ctx, "psi0": psi0, "psi1": psi1, "measure": self.measure.kind},
            ids,
        )
        sum_sq = 0.0
        for k in sorted(phi):
            sum_sq += phi[k]["sum_sq"]
        variance = sum_sq / n
        se = float(np.sqrt(variance / n))
        lo, hi = wald_interval(psi_hat, se)
        return EstimateReport(
            psi_hat=psi_hat, psi0_hat=psi0, psi1_hat=psi1,
            se=se, ci_lower=lo, ci_upper=hi,
            method=mode, selected_sites=ids, n_used=n,
            diagnostics={
                "measure": self.measure.kind,
                "degenerate_rows": degenerate,
                "pr_s0": pr,
                "ridge_fallbacks": list(ridge_flags(bundle)),
            },
        )

    # -- pairwise layer --

    def pair_component(self, k: int, replicate: Optional[int] = None,
                       misspec: MisspecSpec = NO_MISSPEC) -> dict:
        """Pairwise {target, k} estimate in the whole-cohort representation.

        Nuisances are refit on the pair alone; the influence rows are scaled
        by pr_s0 = n0 / n_total so rows of non-participating sites count as
        structural zeros and all pairs share one empirical measure.
        """
        pair_sites = (TARGET_ID,) if k == TARGET_ID else (TARGET_ID, k)
        bundle = self.fit_bundle(
            pair_sites, misspec=misspec, need_tau=True, replicate=replicate
        )
        tag = "orig" if replicate is None else f"b{replicate}"
        ctx = f"{tag}:pair:{k}"
        pr = self.site_n(TARGET_ID) / self.n_total
        parts = self._psi_parts(ctx, bundle, pair_sites, "mr1", pr, replicate)
        plug1 = aug1 = plug0 = aug0 = 0.0
        for j in sorted(parts):
            plug1 += parts[j]["plug1"]
            aug1 += parts[j]["aug1"]
            plug0 += parts[j]["plug0"]
            aug0 += parts[j]["aug0"]
        n0 = self.site_n(TARGET_ID)
        return {
            "k": k, "ctx": ctx,
            "psi1": (plug1 + aug1) / n0,
            "psi0": (plug0 + aug0) / n0,
            "pr": pr,
        }

    def gram_components(self, components: Sequence[dict],
                        center: float) -> Tuple[np.ndarray, Dict[int, float]]:
        """Target cross-product block and per-source diagonal sums."""
        ctxs = [comp["ctx"] for comp in components]
        cross = self._exchange(
            "gram_target", {"ctxs": ctxs, "center": center}, (TARGET_ID,)
        )[TARGET_ID]["cross"]
        sources = [comp["k"] for comp in components if comp["k"] != TARGET_ID]
        source_sq: Dict[int, float] = {}
        if sources:
            ctx_map = {
                str(comp["k"]): comp["ctx"]
                for comp in components if comp["k"] != TARGET_ID
            }
            out = self._exchange("gram_source", {"ctx_map": ctx_map}, sources)
            source_sq = {k: out[k]["sum_sq"] for k in sources}
        return np.asarray(cross, dtype=float), source_sq

    def gram_fold_components(self, components: Sequence[dict], center: float,
                             n_folds: int) -> List[dict]:
        """Per-fold versions of the gram pieces, for penalty cross-validation."""
        ctxs = [comp["ctx"] for comp in components]
        target = self._exchange(
            "gram_target_folds",
            {"ctxs": ctxs, "center": center, "n_folds": n_folds},
            (TARGET_ID,),
        )[TARGET_ID]
        sources = [comp["k"] for comp in components if comp["k"] != TARGET_ID]
        per_source: Dict[int, dict] = {}
        if sources:
            ctx_map = {
                str(comp["k"]): comp["ctx"]
                for comp in components if comp["k"] != TARGET_ID
            }
            per_source = self._exchange(
                "gram_source_folds", {"ctx_map": ctx_map, "n_folds": n_folds}, sources
            )
        folds = []
        for f in range(n_folds):
            folds.append({
                "cross": np.asarray(target["cross"][f], dtype=float),
                "source_sq": {k: per_source[k]["sum_sq"][f] for k in sources},
                "count": target["count"][f]
                + sum(per_source[k]["count"][f] for k in sources),
            })
        return folds


def as_cohort(
    data,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    measure: CausalMeasure = RISK_RATIO,
    seed: int = 0,
) -> Cohort:
    """Pass a Cohort through; wrap a MultiSiteData in an in-memory one."""
    if isinstance(data, Cohort):
        return data
    return Cohort(data, transport=transport, config=config, measure=measure, seed=seed)


# -- gram assembly and the weight program -------------------------------------------


def assemble_gram(
    cross_target: np.ndarray,
    source_sq: Dict[int, float],
    pair_ids: Sequence[int],
    n_total: int,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Quadratic pieces of the weight loss from pairwise influence products.

    The loss is the empirical mean of (phi<0> - sum_k u_k phi<k>)^2 over the
    whole cohort, phi<0> the target-only influence row and phi<k> the pair-k
    rows under the common centering.  Expanding gives u'Gu - 2b'u + c with
    G_jk = Pn(phi<j> phi<k>) over sources, b_k = Pn(phi<0> phi<k>), and
    c = Pn(phi<0> squared).  Two different pairs overlap only on target rows,
    so every cross product comes from the target node and each diagonal adds
    its own source node's scalar sum.
    """
    M = np.array(cross_target, dtype=float)
    for idx, k in enumerate(pair_ids):
        if k != TARGET_ID:
            M[idx, idx] += source_sq[k]
    M /= n_total
    G = M[1:, 1:].copy()
    b = M[0, 1:].copy()
    c = float(M[0, 0])
    return G, b, c


def moment_matrix(
    cross_target: np.ndarray,
    source_sq: Dict[int, float],
    pair_ids: Sequence[int],
    n_total: int,
) -> np.ndarray:
    """Full (K+1) x (K+1) product matrix [[c, b'], [b, G]]; rows feed reports."""
    M = np.array(cross_target, dtype=float)
    for idx, k in enumerate(pair_ids):
        if k != TARGET_ID:
            M[idx, idx] += source_sq[k]
    return M / n_total


def _project_capped_simplex(u: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {u >= 0, sum(u) <= 1}."""
    v = np.maximum(u, 0.0)
    if v.sum() <= 1.0:
        return v
    # cap active: project onto the unit simplex by the sorting rule
    z = np.sort(u)[::-1]
    css = np.cumsum(z) - 1.0
    ranks = np.arange(1, u.shape[0] + 1)
    rho = np.nonzero(z - css / ranks > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(u - theta, 0.0)


def solve_weights(
    G: np.ndarray,
    b: np.ndarray,
    c: float,
    delta_sq: np.ndarray,
    lam: float,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    restarts: int = 10,
) -> FederatedWeights:
    """Minimize u'Gu - 2b'u + c + lam * sum_k u_k delta_k^2 in source weights.

    u holds the K source weights; the target weight is the simplex slack
    w0 = 1 - sum(u), so the feasible set is {u >= 0, sum(u) <= 1} and the
    returned w is (w0, u).  Projected gradient descent with Armijo
    backtracking runs from multiple deterministic starts; steps are seeded
    with the spectral (Barzilai-Borwein) length and backtracked until the
    descent condition holds, so each accepted step decreases the objective.
    Convergence is the fixed-point gap of the projected step at the 1/L
    reference step size, which is scale-free in u, with a float-resolution
    stagnation stop for ill-conditioned instances.  If the iteration budget
    runs out the best iterate is returned flagged rather than raised.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    delta_sq = np.asarray(delta_sq, dtype=float)
    K = G.shape[0]

    def embed(u: np.ndarray) -> np.ndarray:
        w = np.empty(K + 1)
        w[0] = 1.0 - float(np.sum(u))
        w[1:] = u
        return w

    def objective(u: np.ndarray) -> float:
        return float(u @ G @ u - 2.0 * b @ u + c + lam * (delta_sq @ u))

    if K == 0:
        return FederatedWeights(w=np.ones(1), lambda_n=lam, objective_value=float(c))

    def gradient(u: np.ndarray) -> np.ndarray:
        return 2.0 * (G @ u - b) + lam * delta_sq

    curvature = float(np.max(np.linalg.eigvalsh(2.0 * G)))
    step0 = 1.0 / max(curvature, 1e-12)

    starts = [np.zeros(K), np.full(K, 1.0 / (K + 1))]
    starts += [np.eye(K)[i] for i in range(min(K, restarts - len(starts)))]
    rng = np.random.default_rng(0)
    while len(starts) < restarts:
        raw = rng.random(K + 1)
        starts.append((raw / raw.sum())[1:])

    best_u = None
    best_f = np.inf
    best_conv = False
    budget = max_iter
    for start in starts:
        u = _project_capped_simplex(np.asarray(start, dtype=float))
        f = objective(u)
        g = gradient(u)
        conv = False
        step_next = step0
        while budget > 0:
            budget -= 1
            # stationarity at the 1/L reference step, scale-free in u
            base = _project_capped_simplex(u - step0 * g)
            if float(np.max(np.abs(base - u))) < tol:
                conv = True
                break
            step = step_next
            cand = _project_capped_simplex(u - step * g)
            move = cand - u
            f_cand = objective(cand)
            for _ in range(60):
                if f_cand <= f + float(g @ move) + float(move @ move) / (2.0 * step):
                    break
                step *= 0.5
                cand = _project_capped_simplex(u - step * g)
                move = cand - u
                f_cand = objective(cand)
            if float(np.max(np.abs(move))) < 1e-14:
                conv = True  # pinned at float resolution, cannot improve
                break
            g_new = gradient(cand)
            # spectral step seed for the next Armijo search
            sz = float(move @ (g_new - g))
            if sz > 0.0:
                step_next = min(max(float(move @ move) / sz, 1e-3 * step0), 1e9 * step0)
            else:
                step_next = step0
            u, f, g = cand, f_cand, g_new
        if f < best_f:
            best_f, best_u, best_conv = f, u, conv
        if budget <= 0:
            break
    return FederatedWeights(
        w=embed(best_u), lambda_n=lam, objective_value=best_f,
        converged=best_conv,
    )


def default_lambda_grid(n_total: int) -> Tuple[float, ...]:
    return (0.0, n_total ** 0.3, n_total ** 0.4, n_total ** 0.45)


def select_lambda(
    fold_parts: Sequence[dict],
    pair_ids: Sequence[int],
    delta_sq: np.ndarray,
    grid: Sequence[float],
) -> Tuple[float, Dict[float, float]]:
    """Pick the penalty by K-fold cross-validation of the unpenalized loss.

    Folds are stratified by site (each site splits its own rows).  For each
    candidate, weights are fit on the held-in gram pieces with the penalty
    and scored on the held-out quadratic without it; the smallest candidate
    attaining the minimal mean loss wins.
    """
    grid = sorted(grid)
    if not grid:
        raise EmptyGrid("penalty grid is empty")
    usable = [f for f in range(len(fold_parts)) if fold_parts[f]["count"] > 0]
    losses = {lam: 0.0 for lam in grid}
    for f in usable:
        test = fold_parts[f]
        train_cross = sum(fold_parts[g]["cross"] for g in usable if g != f)
        train_sq = {
            k: sum(fold_parts[g]["source_sq"][k] for g in usable if g != f)
            for k in test["source_sq"]
        }
        n_train = sum(fold_parts[g]["count"] for g in usable if g != f)
        G_tr, b_tr, c_tr = assemble_gram(train_cross, train_sq, pair_ids, n_train)
        G_te, b_te, c_te = assemble_gram(
            test["cross"], test["source_sq"], pair_ids, test["count"]
        )
        for lam in grid:
            u = solve_weights(G_tr, b_tr, c_tr, delta_sq, lam).w[1:]
            losses[lam] += float(u @ G_te @ u - 2.0 * b_te @ u + c_te)
    mean = {lam: losses[lam] / len(usable) for lam in grid}
    best = min(grid, key=lambda lam: (mean[lam], lam))
    return best, mean


def federated_weights(
    data,
    lambda_grid: Optional[Sequence[float]] = None,
    lam: Optional[float] = None,
    n_folds: int = 5,
    replicate: Optional[int] = None,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    measure: CausalMeasure = RISK_RATIO,
    seed: int = 0,
    misspec: MisspecSpec = NO_MISSPEC,
) -> WeightSolution:
    """Run the whole weighting pipeline: pairs, gram, penalty, weights."""
    cohort = as_cohort(data, transport, config, measure, seed)
    pair_ids = (TARGET_ID,) + cohort.source_ids
    components = [cohort.pair_component(k, replicate, misspec) for k in pair_ids]
    center = components[0]["psi1"]
    psi0_target = components[0]["psi0"]
    deltas = np.array([abs(comp["psi1"] - center) for comp in components])
    delta_sq = deltas[1:] ** 2
    cross, source_sq = cohort.gram_components(components, center)
    G, b, c = assemble_gram(cross, source_sq, pair_ids, cohort.n_total)
    M = moment_matrix(cross, source_sq, pair_ids, cohort.n_total)
    cv_losses = None
    if lam is None:
        grid = tuple(lambda_grid) if lambda_grid is not None else default_lambda_grid(
            cohort.n_total
        )
        if len(grid) == 0:
            raise EmptyGrid("penalty grid is empty")
        if len(grid) == 1:
            lam = float(grid[0])
        else:
            fold_parts = cohort.gram_fold_components(components, center, n_folds)
            lam, cv_losses = select_lambda(fold_parts, pair_ids, delta_sq, grid)
    weights = solve_weights(G, b, c, delta_sq, lam)
    pairs = tuple(
        PairwiseEstimate(
            k=comp["k"], psi1_pair=comp["psi1"],
            eif_gram_row=M[idx], delta_hat=float(deltas[idx]),
        )
        for idx, comp in enumerate(components)
    )
    return WeightSolution(
        weights=weights, pairs=pairs, gram=G, b=b, c=c,
        psi0_target=psi0_target, psi1_target=center,
        n_total=cohort.n_total, cv_losses=cv_losses,
    )


def pairwise_estimate(data, k: int, transport=None,
                      config: NuisanceConfig = DEFAULT_CONFIG,
                      measure: CausalMeasure = RISK_RATIO,
                      seed: int = 0) -> PairwiseEstimate:
    """Pairwise estimate for source k against the target-only run.

    Runs the two needed pairs (target alone, then {target, k}) and returns
    the source's entry; its gram row spans those two estimates.  k = 0
    degenerates to the target-only estimate with delta 0.
    """
    cohort = as_cohort(data, transport, config, measure, seed)
    if k != TARGET_ID and k not in cohort.source_ids:
        raise ValueError(f"site {k} is not part of the cohort")
    pair_ids = (TARGET_ID,) if k == TARGET_ID else (TARGET_ID, k)
    components = [cohort.pair_component(j) for j in pair_ids]
    center = components[0]["psi1"]
    cross, source_sq = cohort.gram_components(components, center)
    M = moment_matrix(cross, source_sq, pair_ids, cohort.n_total)
    idx = len(pair_ids) - 1
    comp = components[idx]
    return PairwiseEstimate(
        k=k, psi1_pair=comp["psi1"], eif_gram_row=M[idx],
        delta_hat=abs(comp["psi1"] - center),
    )


def blend_psi1(solution: WeightSolution) -> float:
    total = 0.0
    for idx in range(len(solution.pairs)):
        total += float(solution.weights.w[idx]) * solution.pairs[idx].psi1_pair
    return total


def estimate_fw(
    data,
    solution: Optional[WeightSolution] = None,
    B: int = 200,
    lambda_grid: Optional[Sequence[float]] = None,
    transport=None,
    config: NuisanceConfig = DEFAULT_CONFIG,
    measure: CausalMeasure = RISK_RATIO,
    seed: int = 0,
    misspec: MisspecSpec = NO_MISSPEC,
) -> EstimateReport:
    """Fixed-weights estimate: blend the pairwise means, bootstrap the SE.

    Each replicate resamples every site's rows in place, refits the pairwise
    nuisances, and re-solves the weights at the selected penalty, so the SE
    reflects the weight estimation step as well.  Weights equal to
    (1, 0, ..., 0) reduce the point estimate to the target-only run, and the
    report then carries that run's influence-function SE.
    """
    cohort = as_cohort(data, transport, config, measure, seed)
    if solution is None:
        solution = federated_weights(cohort, lambda_grid=lambda_grid, misspec=misspec)
    w = solution.weights.w
    blend = blend_psi1(solution)
    psi0 = solution.psi0_target
    psi_hat = measure_apply(cohort.measure, psi0, blend)
    diagnostics = {
        "measure": cohort.measure.kind,
        "weights": [float(v) for v in w],
        "lambda_n": solution.weights.lambda_n,
        "solver_converged": solution.weights.converged,
    }
    if w[0] == 1.0 and not np.any(w[1:]):
        base = cohort.estimate(mode="drt", ctx="fw:drt")
        return EstimateReport(
            psi_hat=base.psi_hat, psi0_hat=base.psi0_hat, psi1_hat=base.psi1_hat,
            se=base.se, ci_lower=base.ci_lower, ci_upper=base.ci_upper,
            method="fwmr1", selected_sites=(TARGET_ID,), n_used=base.n_used,
            diagnostics={**diagnostics, "reduced_to_target_only": True},
        )
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    values = np.empty(B)
    for rep in range(B):
        sol_b = federated_weights(
            cohort, lam=solution.weights.lambda_n, replicate=rep, misspec=misspec
        )
        values[rep] = measure_apply(
            cohort.measure, sol_b.psi0_target, blend_psi1(sol_b)
        )
        cohort.release(f"b{rep}:", replicate=rep)
    se = float(np.std(values, ddof=1))
    lo, hi = wald_interval(psi_hat, se)
    selected = tuple(
        solution.pair_ids[i] for i in range(len(w)) if w[i] > 0.0
    )
    return EstimateReport(
        psi_hat=psi_hat, psi0_hat=psi0, psi1_hat=blend,
        se=se, ci_lower=lo, ci_upper=hi,
        method="fwmr1", selected_sites=selected, n_used=cohort.n_total,
        diagnostics={**diagnostics, "bootstrap_B": B, "bootstrap_seed": cohort.seed},
    )
