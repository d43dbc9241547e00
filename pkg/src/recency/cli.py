"""Command-line interface: ``recency {estimate,simulate,experiment,enrollment,assay}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import estimators as est
from .assay import DAYS_PER_YEAR, CalibrationEstimate, estimate_frr, estimate_mdri, frr, mdri
from .bootstrap import BootstrapPlan, DataSources, Sample, nonparametric_ci, parametric_ci
from .errors import NumericError, PreconditionError, RecencyError, SchemaError
from .experiment import format_table, load_spec, parse_config, resolve_assays, resolve_table, run_experiment
from .io import read_assays, read_panel, read_records, write_panel, write_records
from .numkernel import RngStream
from .simulate import SimConfig, enrollment_probabilities, simulate_data

log = logging.getLogger("recency")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_PRECONDITION = 4
EXIT_NUMERIC = 5
EXIT_IO = 6

ESTIMATORS = ("standard", "extended-external", "extended-internal", "subtype-old", "subtype-stratified",
              "subtype-external", "subtype-internal", "modified-standard", "modified-internal")


def _emit_json(obj, out: str | None):
    line = json.dumps(obj, sort_keys=True, default=_json_default)
    if out:
        with open(out, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    else:
        print(line)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _calibration(args, subtypes):
    """(mdri, frr, panels) per subtype from panels, explicit values, or an assay spec."""
    panels = {}
    for item in args.panel or ():
        sub, sep, path = item.partition("=")
        if not sep:
            sub, path = "", item
        panels[sub] = read_panel(path)
    mdri_e, frr_e = {}, {}
    rng = RngStream(args.seed, 1)
    for i, (s, p) in enumerate(sorted(panels.items())):
        mdri_e[s] = estimate_mdri(p, args.t_star, n_boot=args.mdri_boot, rng=rng.substream(i).generator)
        frr_e[s] = estimate_frr(p)
    if args.mdri is not None:
        lo, hi = _ci_pair(args.mdri_ci, args.mdri)
        mdri_e[""] = CalibrationEstimate("MDRI", args.mdri, (hi - lo) / (2 * 1.959964), lo, hi)
    if args.frr is not None:
        lo, hi = _ci_pair(args.frr_ci, args.frr)
        frr_e[""] = CalibrationEstimate("FRR", args.frr, (hi - lo) / (2 * 1.959964), lo, hi)
    if args.assays:
        for s, a in read_assays(args.assays).items():
            mdri_e.setdefault(s, CalibrationEstimate.exact("MDRI", mdri(a)))
            frr_e.setdefault(s, CalibrationEstimate.exact("FRR", frr(a)))
    # single-subtype data: records have subtype "" or one label
    for s in subtypes:
        for d in (mdri_e, frr_e):
            if s not in d and len(d) == 1:
                d[s] = next(iter(d.values()))
            if s not in d and "" in d:
                d[s] = d[""]
    missing = [s or "(none)" for s in subtypes if s not in mdri_e or s not in frr_e]
    if missing:
        raise PreconditionError(f"no MDRI/FRR for subtype(s) {missing}; pass --panel, --mdri/--frr or --assays")
    if len(panels) and set(panels) != set(subtypes) and not (len(panels) == 1 and len(subtypes) == 1):
        raise PreconditionError("one calibration panel per subtype is required")
    if len(panels) == 1 and len(subtypes) == 1:
        (only,) = subtypes
        panels = {only: next(iter(panels.values()))}
    return ({s: mdri_e[s] for s in subtypes}, {s: frr_e[s] for s in subtypes}, panels)


def _ci_pair(text, point):
    if not text:
        return point, point
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise SchemaError(f"CI must be 'lo,hi', got {text!r}") from None
    return lo, hi


def estimate_fn(name: str, t_star: float, order: int):
    """Bootstrap-ready estimator for a CLI estimator name."""

    def fn(sample: Sample) -> dict:
        cross, target = sample.cross, sample.target
        a = {s: (sample.mdri[s], sample.frr[s]) for s in sample.mdri}
        only = next(iter(a.values())) if len(a) == 1 else None
        if name in ("standard", "extended-external", "extended-internal", "modified-standard",
                    "modified-internal") and only is None:
            raise PreconditionError(f"{name} needs a single subtype; use a subtype-* estimator")
        if name == "standard":
            r = est.standard_incidence(cross, *only, t_star)
        elif name == "extended-external":
            r = est.incidence_external_target(cross, target, *only, t_star, order)
        elif name == "extended-internal":
            r = est.incidence_internal_target(cross, *only, t_star, order)
        elif name == "modified-standard":
            r = est.modified_kassanjee(est.CountSummary.from_records(cross), *only, t_star)
        elif name == "modified-internal":
            r = est.modified_internal(cross, *only, t_star, order)
        elif name == "subtype-old":
            r = est.subtype_old(est.counts_by_subtype(cross), a, t_star)
        elif name == "subtype-stratified":
            r = est.subtype_stratified(est.counts_by_subtype(cross), a, t_star)
        elif name == "subtype-external":
            r = est.subtype_external(cross, target, a, t_star, order)
        elif name == "subtype-internal":
            r = est.subtype_internal(cross, a, t_star, order)
        else:
            raise PreconditionError(f"unknown estimator {name!r}")
        return {"estimate": r.estimate}

    return fn


def _record_requirements(name):
    req = ["hiv_positive"]
    if not name.startswith("modified"):
        req.append("recent")
    else:
        req += ["recent", "recency_tested"]
    if name.endswith("internal"):
        req.append("in_target")
    if name.startswith("subtype"):
        req.append("subtype")
    return req


def run_estimate(args) -> dict:
    cross = read_records(args.cross, require=_record_requirements(args.estimator))
    target = None
    if args.target:
        target = read_records(args.target)
        if target.covariate_names != cross.covariate_names:
            raise SchemaError(f"{args.target}: covariate columns differ from {args.cross}")
        if len(target) and np.any(target.population == 0):
            target = target.replace(population=np.ones(len(target), dtype=np.int8))
    elif np.any(cross.population == 1):
        target = cross.external
        cross = cross.cross_sectional
    if args.estimator.endswith("external") and target is None:
        raise PreconditionError(f"{args.estimator} needs --target")
    subtypes = cross.subtypes()
    m, f, panels = _calibration(args, subtypes)
    fn = estimate_fn(args.estimator, args.t_star, args.order)
    point = fn(Sample(cross, {s: e.point for s, e in m.items()}, {s: e.point for s, e in f.items()}, target))
    result = {"estimator": args.estimator, "estimate": point["estimate"], "negative": point["estimate"] < 0,
              "n_cross": len(cross), "n_target": 0 if target is None else len(target),
              "mdri": {s: e.point for s, e in m.items()}, "frr": {s: e.point for s, e in f.items()},
              "seed": args.seed}
    if args.ci != "none":
        sources = DataSources(cross, panels, target, {}, args.t_star)
        rng = RngStream(args.seed, 2)
        for scheme in (("nonparametric", "parametric") if args.ci == "both" else (args.ci,)):
            plan = BootstrapPlan(scheme, args.B, interval=args.interval)
            if scheme == "nonparametric":
                if not panels:
                    log.warning("no calibration panels: nonparametric bootstrap holds MDRI/FRR fixed")
                ci = nonparametric_ci(sources, fn, plan, rng.substream(0), names=("estimate",))["estimate"]
            else:
                ci = parametric_ci(sources, m, f, fn, plan, rng.substream(1), names=("estimate",))["estimate"]
            result[scheme] = {"ci_lo": ci.ci_lo, "ci_hi": ci.ci_hi, "se": ci.se, "B": args.B,
                              "failed": ci.n_failed + ci.n_nonpositive, "unreliable": ci.unreliable}
    return result


def cmd_estimate(args) -> int:
    res = run_estimate(args)
    lines = [f"estimator  {res['estimator']}", f"estimate   {res['estimate']:.6f} per person-year"
             + ("  (negative)" if res["negative"] else "")]
    for scheme in ("nonparametric", "parametric"):
        if scheme in res:
            c = res[scheme]
            flag = "  UNRELIABLE" if c["unreliable"] else ""
            lines.append(f"{scheme:<11}95% CI ({c['ci_lo']:.6f}, {c['ci_hi']:.6f})  SE {c['se']:.6f}  "
                         f"B={c['B']} failed={c['failed']}{flag}")
    print("\n".join(lines), file=sys.stderr if not args.out else sys.stdout)
    _emit_json(res, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8")
    exp, per = parse_config(text, args.config)
    if args.setting is not None:
        if args.setting not in per:
            raise SchemaError(f"{args.config}: no setting {args.setting}")
        kw = per[args.setting]
    else:
        kw = per[min(per)]
    if args.seed is not None:
        kw = dict(kw, seed=args.seed)
    cfg = SimConfig(**kw)
    table = resolve_table(exp.get("table", "table5"), args.config)
    table.check_feasible(cfg.t_star)
    assays = resolve_assays(exp.get("assays", "default"), table, exp.get("single_subtype", "B"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for rep in range(cfg.replications):
        d = simulate_data(cfg, table, assays, RngStream(cfg.seed, rep))
        rdir = out / f"rep{rep:04d}"
        rdir.mkdir(exist_ok=True)
        write_records(d.cross, rdir / "cross.csv")
        files.append(str(rdir / "cross.csv"))
        if d.target is not None:
            write_records(d.target, rdir / "target.csv")
            files.append(str(rdir / "target.csv"))
        for s, p in sorted(d.panels.items()):
            name = f"panel_{s}.csv" if s else "panel.csv"
            write_panel(p, rdir / name)
            files.append(str(rdir / name))
        if d.trial is not None:
            with open(rdir / "trial.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["id", "infected", "person_years"])
                ids = np.flatnonzero(d.cross.in_target == 1) + 1
                for i, inf, py in zip(ids.tolist(), d.trial.infected.tolist(), d.trial.person_years.tolist()):
                    w.writerow([i, inf, repr(float(py))])
            files.append(str(rdir / "trial.csv"))
    manifest = {"config": args.config, "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
                "seed": cfg.seed, "setting": cfg.setting, "replications": cfg.replications,
                "mode": cfg.mode, "n_cross": cfg.n_cross, "n_target": cfg.n_target,
                "files": [str(Path(f).relative_to(out)) for f in files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {cfg.replications} replication(s) to {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment / enrollment / assay
# ---------------------------------------------------------------------------


def cmd_experiment(args) -> int:
    spec = load_spec(args.spec)
    overrides = {"seed": args.seed, "bootstrap_rounds": args.B, "replications": args.replications,
                 "ci": args.ci}
    settings = [int(s) for s in args.setting.split(",")] if args.setting else None

    def progress(i, n):
        if args.verbose:
            print(f"  replication {i}/{n}", file=sys.stderr)

    rows, summary = run_experiment(spec, settings, args.workers, overrides, progress)
    print(format_table(summary, title=spec.name))
    for k, rs in rows.items():
        bad = [r for r in rs if r.get("error")]
        if bad:
            print(f"setting {k}: {len(bad)} of {len(rs)} replications failed; first: {bad[0]['error']}",
                  file=sys.stderr)
    if args.out:
        Path(args.out).write_text("", encoding="utf-8")
        for r in summary:
            _emit_json({"experiment": spec.name, **r.scaled()}, args.out)
    if args.rows:
        Path(args.rows).write_text("", encoding="utf-8")
        for k, rs in rows.items():
            for r in rs:
                _emit_json({"experiment": spec.name, "setting": k, **r}, args.rows)
    return EXIT_OK


def cmd_enrollment(args) -> int:
    table = resolve_table(args.table, normalize=False)
    probs = enrollment_probabilities(table, args.N, args.M)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*table.covariate_names, *(["subtype"] if table.has_subtype else []), "raw", "truncated"])
        for i in range(len(table)):
            w.writerow([*table.covariates[i].tolist(), *([table.subtype[i]] if table.has_subtype else []),
                        f"{probs.raw[i]:.6f}", f"{probs.truncated[i]:.6f}"])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_assay(args) -> int:
    if args.spec:
        for s, a in sorted(read_assays(args.spec).items()):
            res = {"subtype": s, "mdri_years": mdri(a), "mdri_days": mdri(a) * DAYS_PER_YEAR, "frr": frr(a)}
            print(f"subtype {s or '-'}: MDRI {res['mdri_days']:.2f} days, FRR {res['frr']:.6g}", file=sys.stderr)
            _emit_json(res, args.out)
    if args.panel:
        panel = read_panel(args.panel)
        res = {"panel": args.panel}
        if len(panel.duration):
            m = estimate_mdri(panel, args.t_star, n_boot=args.B, rng=RngStream(args.seed).generator)
            res.update(mdri_years=m.point, mdri_se=m.se, mdri_ci=[m.ci_lo, m.ci_hi],
                       mdri_days=m.point * DAYS_PER_YEAR)
            print(f"MDRI {m.point * DAYS_PER_YEAR:.1f} days (95% CI {m.ci_lo * DAYS_PER_YEAR:.1f}, "
                  f"{m.ci_hi * DAYS_PER_YEAR:.1f})", file=sys.stderr)
        if len(panel.long_recent):
            f = estimate_frr(panel)
            res.update(frr=f.point, frr_se=f.se, frr_ci=[f.ci_lo, f.ci_hi])
            print(f"FRR {f.point:.4f} (95% CI {f.ci_lo:.4f}, {f.ci_hi:.4f})", file=sys.stderr)
        _emit_json(res, args.out)
    if not args.spec and not args.panel:
        raise PreconditionError("pass --spec and/or --panel")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recency", description="Cross-sectional HIV incidence from recency tests.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate incidence from subject-record CSVs")
    e.add_argument("--cross", required=True, help="cross-sectional records CSV")
    e.add_argument("--target", help="external-target records CSV")
    e.add_argument("--estimator", choices=ESTIMATORS, default="standard")
    e.add_argument("--panel", action="append", metavar="[SUBTYPE=]CSV", help="calibration panel (repeatable)")
    e.add_argument("--assays", help="assay spec CSV (exact MDRI/FRR per subtype)")
    e.add_argument("--mdri", type=float, help="MDRI in years")
    e.add_argument("--frr", type=float, help="FRR")
    e.add_argument("--mdri-ci", help="lo,hi")
    e.add_argument("--frr-ci", help="lo,hi")
    e.add_argument("--mdri-boot", type=int, default=200, help="bootstrap rounds for the MDRI standard error")
    e.add_argument("--t-star", type=float, default=2.0)
    e.add_argument("--order", type=int, default=1, help="interaction order of the weight model")
    e.add_argument("--ci", choices=("none", "nonparametric", "parametric", "both"), default="both")
    e.add_argument("--no-ci", dest="ci", action="store_const", const="none")
    e.add_argument("--B", type=int, default=500)
    e.add_argument("--interval", choices=("lognormal_normal_approx", "log_percentile"),
                   default="lognormal_normal_approx")
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--out", help="append the JSON result line to this file")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="write simulated datasets")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--setting", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("experiment", help="run a simulation study and print the summary table")
    x.add_argument("spec", help="spec INI path or bundled name: " + ", ".join(
        ("table1", "table2", "table3", "table4_external", "table4_internal")))
    x.add_argument("--setting", help="comma-separated settings to run")
    x.add_argument("--replications", type=int)
    x.add_argument("--B", type=int)
    x.add_argument("--ci", choices=("none", "nonparametric", "parametric", "both"))
    x.add_argument("--seed", type=int)
    x.add_argument("--workers", type=int, help="process count (default: RECENCY_THREADS or CPU count)")
    x.add_argument("--out", help="summary JSON-lines file")
    x.add_argument("--rows", help="per-replication JSON-lines file")
    x.set_defaults(func=cmd_experiment)

    n = sub.add_parser("enrollment", help="enrollment probabilities for an internal target")
    n.add_argument("--table", required=True, help="population table CSV or bundled name")
    n.add_argument("--N", type=int, required=True)
    n.add_argument("--M", type=int, required=True)
    n.add_argument("--out")
    n.set_defaults(func=cmd_enrollment)

    a = sub.add_parser("assay", help="MDRI/FRR from an assay spec or a calibration panel")
    a.add_argument("--spec", help="assay spec CSV")
    a.add_argument("--panel", help="calibration panel CSV")
    a.add_argument("--t-star", type=float, default=2.0)
    a.add_argument("--B", type=int, default=200)
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_assay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "verbose"):
        args.verbose = False
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RecencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
