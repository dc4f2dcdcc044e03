"""Command-line front end: simulation runs, CSV estimation, federated runs.

Exit codes are stable: 0 success, 2 partial replicate failures above 1%,
64 bad configuration or usage (unknown flags included), 65 input schema
errors, 70 federation protocol violations, 74 I/O failures, 1 any other
error.
"""

from __future__ import annotations

import argparse
import csv as csvmod
import hashlib
import io
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CausalMeasure,
    EstimateReport,
    FedcausalError,
    IoFailure,
    MultiSiteData,
    SchemaError,
    SiteDataset,
    ValidationError,
    parse_measure,
)
from .estimators import estimate_measure
from .federation import (
    Cohort,
    FileTransport,
    MemoryTransport,
    ProtocolViolation,
    audit_transcript,
    estimate_fw,
    federated_weights,
)
from .nuisance import DEFAULT_CONFIG, NO_MISSPEC
from .pfws import (
    BootstrapPlan,
    ThresholdGrid,
    default_threshold_grid,
    estimate_fs,
    mse_curve,
    select_threshold,
)
from .sim import (
    ESTIMATOR_NAMES,
    SCENARIOS,
    ScenarioSpec,
    _run_estimator,
    emit_table,
    generate,
    load_scenario,
    run_monte_carlo,
)

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_CONFIG = 64
EXIT_SCHEMA = 65
EXIT_PROTOCOL = 70
EXIT_IO = 74


class ConfigError(FedcausalError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage mistakes (unknown flags included) exit through the config code,
    # keeping 2 reserved for partial simulation failures
    def error(self, message: str):
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# argument helpers


def _parse_floats(text: str, flag: str) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{flag} must be comma-separated numbers: {exc}") from None


def _parse_estimators(text: str) -> Tuple[str, ...]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    for name in names:
        if name not in ESTIMATOR_NAMES:
            raise ConfigError(
                f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}"
            )
    # the target-only estimator is always the reference baseline
    if "drt" not in names:
        names = ["drt"] + names
    out: List[str] = []
    for name in names:
        if name not in out:
            out.append(name)
    return tuple(out)


def _resolve_scenario(text: str) -> ScenarioSpec:
    if text.endswith(".toml") or text.endswith(".json"):
        return load_scenario(text)
    if text not in SCENARIOS:
        raise ConfigError(
            f"unknown scenario {text!r}; valid ids: {', '.join(sorted(SCENARIOS))} "
            "(or pass a .toml/.json scenario file)"
        )
    return SCENARIOS[text]


def _threshold_grid(arg: Optional[str]) -> Optional[ThresholdGrid]:
    if arg is None:
        return None
    return ThresholdGrid(_parse_floats(arg, "--grid"))


def _lambda_grid(arg: Optional[str]) -> Optional[Tuple[float, ...]]:
    if arg is None:
        return None
    return _parse_floats(arg, "--lambda-grid")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc}") from None
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# site CSV input


def read_site_csv(path: Path, site_id: int) -> SiteDataset:
    """One site's rows: columns y, a, then covariates, any order."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    rows = list(csvmod.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise SchemaError(f"{path}: duplicate column '{dupes[0]}'")
    for required in ("y", "a"):
        if required not in header:
            raise SchemaError(f"{path}: missing required column '{required}'")
    covs = [h for h in header if h not in ("y", "a")]
    if not covs:
        raise SchemaError(f"{path}: needs at least one covariate column besides y and a")
    idx = {name: header.index(name) for name in header}

    y: List[float] = []
    a: List[int] = []
    x: List[List[float]] = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise SchemaError(
                f"{path}: row {i} has {len(row)} fields, expected {len(header)}"
            )

        def cell(name: str) -> float:
            raw = row[idx[name]]
            try:
                return float(raw)
            except ValueError:
                raise SchemaError(
                    f"{path}: row {i}, column '{name}': cannot parse {raw!r}"
                ) from None

        y.append(cell("y"))
        treated = cell("a")
        if treated not in (0.0, 1.0):
            raise SchemaError(f"{path}: row {i}, column 'a': treatment must be 0 or 1")
        a.append(int(treated))
        x.append([cell(c) for c in covs])
    if not y:
        raise SchemaError(f"{path}: no data rows")
    return SiteDataset(site_id, np.asarray(y), np.asarray(a), np.asarray(x))


def load_csv_data(target: str, sources: Sequence[str]) -> MultiSiteData:
    sites = {0: read_site_csv(Path(target), 0)}
    for k, src in enumerate(sources, start=1):
        sites[k] = read_site_csv(Path(src), k)
    return MultiSiteData(sites)


# ---------------------------------------------------------------------------
# report rendering


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def forest_table(
    data: MultiSiteData,
    reports: Dict[str, EstimateReport],
    measure: CausalMeasure,
) -> str:
    """Per-site within-site estimates, then the requested cross-site ones."""
    rows = [("site/estimator", "n", "estimate", "95% CI")]
    for k in sorted(data.sites):
        ds = data.sites[k]
        label = "target" if k == 0 else f"source {k}"
        try:
            rep = estimate_measure(
                MultiSiteData({0: SiteDataset(0, ds.y, ds.a, ds.x)}),
                measure, mode="drt",
            )
            rows.append((
                label, str(ds.n), _fmt(rep.psi_hat),
                f"[{_fmt(rep.ci_lower)}, {_fmt(rep.ci_upper)}]",
            ))
        except (FedcausalError, ValueError) as exc:
            rows.append((label, str(ds.n), "unavailable", type(exc).__name__))
    rows.append(("", "", "", ""))
    for name, rep in reports.items():
        rows.append((
            name, str(rep.n_used), _fmt(rep.psi_hat),
            f"[{_fmt(rep.ci_lower)}, {_fmt(rep.ci_upper)}]",
        ))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    lines = []
    for i, row in enumerate(rows):
        lines.append(
            "  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip()
        )
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _write_reports(outdir: Path, reports: Dict[str, EstimateReport]) -> None:
    for name, rep in reports.items():
        _write_text(outdir / f"{name}.json", rep.to_json() + "\n")


def _run_requested(
    args: argparse.Namespace,
    data: MultiSiteData,
    transport_root: Optional[Path],
) -> Tuple[Dict[str, EstimateReport], list]:
    """Run the requested estimator set; one transport (and transcript) each.

    With a transport root every estimator executes through its own federated
    cohort so each transcript under <root>/<name>/outbox is self-contained.
    """
    measure = parse_measure(args.measure)
    names = _parse_estimators(args.estimators)
    lam = _lambda_grid(args.lambda_grid)
    grid = _threshold_grid(args.grid)
    reports: Dict[str, EstimateReport] = {}
    log: list = []
    for name in names:
        if transport_root is None:
            reports[name] = _run_estimator(
                name, data,
                measure=measure, config=DEFAULT_CONFIG, misspec=NO_MISSPEC,
                B=args.B, lambda_grid=lam, threshold_grid=grid,
                fast_bootstrap=args.fast_bootstrap, seed=args.seed,
                transport=None,
            )
            continue
        transport = FileTransport(transport_root / name)
        cohort = Cohort(data, transport=transport, measure=measure, seed=args.seed)
        if name in ("drt", "mr1", "mr2"):
            reports[name] = cohort.estimate(name)
        elif name == "fwmr1":
            reports[name] = estimate_fw(cohort, B=args.B, lambda_grid=lam)
        else:
            reports[name] = estimate_fs(
                cohort, measure, grid=grid,
                plan=BootstrapPlan(B=args.B, seed=args.seed),
                lambda_grid=lam, fast=args.fast_bootstrap,
            )
        log.extend(transport.log)
    return reports, log


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = _resolve_scenario(args.scenario)
    table = run_monte_carlo(
        spec, args.M, args.seed,
        n=args.n,
        estimators=_parse_estimators(args.estimators),
        misspec=args.misspec,
        measure=parse_measure(args.measure),
        B=args.B,
        lambda_grid=_lambda_grid(args.lambda_grid),
        threshold_grid=_threshold_grid(args.grid),
        fast_bootstrap=args.fast_bootstrap,
        n_jobs=args.jobs,
    )
    outdir = _ensure_dir(Path(args.out) / spec.name)
    csv_text = emit_table(table, "csv", outdir / "metrics.csv")
    emit_table(table, "markdown", outdir / "metrics.md")
    if table.failures:
        fail_lines = ["replicate,estimator,error"]
        fail_lines += [f"{f.replicate},{f.estimator},{f.error!r}" for f in table.failures]
        _write_text(outdir / "failures.csv", "\n".join(fail_lines) + "\n")
    print(emit_table(table, "markdown"), end="")
    frac = table.failure_fraction()
    print(f"failures: {len(table.failures)} ({100 * frac:.2f}% of fits)")
    print(f"wrote {outdir}/metrics.csv  digest {_digest(csv_text)}")
    return EXIT_PARTIAL if frac > 0.01 else EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    data = load_csv_data(args.target, args.sources)
    outdir = _ensure_dir(Path(args.out))
    root = outdir if args.transport == "files" else None
    reports, _ = _run_requested(args, data, root)
    _write_reports(outdir, reports)
    table = forest_table(data, reports, parse_measure(args.measure))
    _write_text(outdir / "summary.txt", table)
    print(table, end="")
    print(f"wrote {len(reports)} reports under {outdir}")
    return EXIT_OK


def cmd_fed_run(args: argparse.Namespace) -> int:
    site_dirs = [Path(args.target)] + [Path(s) for s in args.sources]
    csv_paths = []
    for d in site_dirs:
        if not d.is_dir():
            raise ProtocolViolation(f"missing site directory: {d}")
        found = sorted(d.glob("*.csv"))
        if len(found) != 1:
            raise ProtocolViolation(
                f"site directory {d} must hold exactly one csv, found {len(found)}"
            )
        csv_paths.append(found[0])
    data = MultiSiteData({k: read_site_csv(p, k) for k, p in enumerate(csv_paths)})
    outdir = _ensure_dir(Path(args.out))
    reports, log = _run_requested(args, data, outdir)
    audit_transcript(log)
    _write_reports(outdir, reports)
    table = forest_table(data, reports, parse_measure(args.measure))
    _write_text(outdir / "summary.txt", table)
    print(table, end="")
    print(f"privacy audit: ok ({len(log)} messages, aggregates only)")
    print(f"transcripts under {outdir}/<estimator>/outbox")
    return EXIT_OK


def cmd_mse_curve(args: argparse.Namespace) -> int:
    measure = parse_measure(args.measure)
    if args.scenario is not None:
        if args.target is not None:
            raise ConfigError("pass either --scenario or --target, not both")
        spec = _resolve_scenario(args.scenario)
        data = generate(spec, args.n, args.seed)
    elif args.target is not None:
        data = load_csv_data(args.target, args.sources)
    else:
        raise ConfigError("mse-curve needs --scenario or --target/--sources")
    outdir = _ensure_dir(Path(args.out))
    transport = FileTransport(outdir) if args.transport == "files" else MemoryTransport()
    cohort = Cohort(data, transport=transport, measure=measure, seed=args.seed)
    solution = federated_weights(cohort, lambda_grid=_lambda_grid(args.lambda_grid))
    grid = _threshold_grid(args.grid) or default_threshold_grid()
    curve = mse_curve(
        grid, BootstrapPlan(B=args.B, seed=args.seed),
        solution.weights, cohort, measure=measure, fast=args.fast_bootstrap,
    )
    text = curve.to_csv()
    _write_text(outdir / "mse_curve.csv", text)
    e_star = select_threshold(curve)
    w = ", ".join(f"{v:.4f}" for v in solution.weights.w)
    print(f"weights: ({w})  lambda: {solution.weights.lambda_n:g}")
    for pt in curve.points:
        mark = "  <- e*" if pt.e == e_star else ""
        print(
            f"e={pt.e:.2f}  sites={list(pt.selected_sites)}  "
            f"psi={pt.psi_e:.4f}  mse_hat={pt.mse_hat:.6g}{mark}"
        )
    print(f"selected threshold e*={e_star:.2f}")
    print(f"wrote {outdir}/mse_curve.csv  digest {curve.digest()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser, *, estimators_default: str) -> None:
    p.add_argument("--measure", choices=("rr", "rd"), default="rr",
                   help="causal measure: risk ratio or risk difference")
    p.add_argument("--estimators", default=estimators_default,
                   help=f"comma list from {{{','.join(ESTIMATOR_NAMES)}}}; "
                        "drt is always added as the baseline")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")
    p.add_argument("--B", type=int, default=200, help="bootstrap replicates")
    p.add_argument("--grid", default=None,
                   help="comma list of thresholds in (0,1] for fsmr1")
    p.add_argument("--lambda-grid", default=None,
                   help="comma list of penalty levels for the weight program")
    p.add_argument("--fast-bootstrap", action="store_true",
                   help="reuse original nuisance fits inside the threshold bootstrap")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fedcausal",
        description="Federated causal estimation for a designated target site.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="Monte Carlo study for a scenario")
    p_sim.add_argument("--scenario", required=True,
                       help="scenario id (1.1, 1.2, 2.1, 2.2, 2.3) or a .toml/.json file")
    p_sim.add_argument("--M", type=int, default=200, help="number of replications")
    p_sim.add_argument("--n", type=int, default=1000, help="rows per dataset")
    p_sim.add_argument("--misspec", default="i",
                       help="misspecification pattern: i, ii, iii or iv")
    p_sim.add_argument("--jobs", type=int, default=None,
                       help="parallel replicates (default: FEDCAUSAL_THREADS or 1)")
    _add_common(p_sim, estimators_default="drt,mr1,mr2")
    p_sim.set_defaults(func=cmd_simulate, out_default="results")

    p_est = sub.add_parser("estimate", help="estimate from per-site CSV files")
    p_est.add_argument("--target", required=True, help="target site CSV")
    p_est.add_argument("--sources", nargs="*", default=[], help="source site CSVs")
    p_est.add_argument("--transport", choices=("memory", "files"), default="memory",
                       help="message transport for the estimators")
    _add_common(p_est, estimators_default="drt,mr1,fwmr1,fsmr1")
    p_est.set_defaults(func=cmd_estimate, out_default="estimates")

    p_fed = sub.add_parser("fed-run", help="federated run over site directories")
    p_fed.add_argument("--target", required=True, help="target site directory")
    p_fed.add_argument("--sources", nargs="*", default=[],
                       help="source site directories")
    _add_common(p_fed, estimators_default="drt,fwmr1,fsmr1")
    p_fed.set_defaults(func=cmd_fed_run, out_default="fedrun")

    p_mse = sub.add_parser("mse-curve", help="bootstrap MSE over the threshold grid")
    p_mse.add_argument("--scenario", default=None,
                       help="scenario id or file to generate data from")
    p_mse.add_argument("--n", type=int, default=1000, help="rows when generating")
    p_mse.add_argument("--target", default=None, help="target site CSV")
    p_mse.add_argument("--sources", nargs="*", default=[], help="source site CSVs")
    p_mse.add_argument("--transport", choices=("memory", "files"), default="memory")
    _add_common(p_mse, estimators_default="drt")
    p_mse.set_defaults(func=cmd_mse_curve, out_default="msecurve")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.out is None:
            args.out = args.out_default
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ProtocolViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # stable nonzero exit for anything unplanned
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
