"""Experiment specifications, the replication runner and bias/SE/coverage summary tables."""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .assay import RecencyAssay, SUBTYPE_A, SUBTYPE_B
from .errors import PreconditionError, SchemaError
from .simulate import BUNDLED_TABLES, PopulationTable, SimConfig, bundled_table, load_table, run_replication

BUNDLED_EXPERIMENTS = ("table1", "table2", "table3", "table4_external", "table4_internal")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    table: str  # bundled table name or CSV path
    assays: str = "default"  # "default" or an assay-spec CSV path
    single_subtype: str = "B"  # assay used for tables without a subtype column
    settings: Mapping[int, SimConfig] = field(default_factory=dict)
    estimators: tuple = ("standard", "proposed")

    def __post_init__(self):
        if not self.settings:
            raise SchemaError(f"experiment {self.name!r}: no settings")
        if not self.estimators:
            raise SchemaError(f"experiment {self.name!r}: empty estimator set")


_INT_FIELDS = {f.name for f in dataclasses.fields(SimConfig) if f.type in ("int", int)}
_FLOAT_FIELDS = {f.name for f in dataclasses.fields(SimConfig) if f.type in ("float", float)}
_STR_FIELDS = {f.name for f in dataclasses.fields(SimConfig) if f.type in ("str", str)}


def _config_kwargs(section: Mapping[str, str], where: str) -> dict:
    out = {}
    for k, v in section.items():
        try:
            if k in _INT_FIELDS:
                out[k] = int(v)
            elif k in _FLOAT_FIELDS:
                out[k] = float(v)
            elif k in _STR_FIELDS:
                out[k] = v.strip()
            else:
                raise SchemaError(f"{where}: unknown key {k!r}")
        except ValueError:
            raise SchemaError(f"{where}: key {k!r}: bad value {v!r}") from None
    return out


def parse_config(text: str, source: str = "<config>") -> tuple[dict, dict[int, dict]]:
    """Return (experiment section, {setting: SimConfig kwargs}) from INI text.

    ``[config]`` holds keys shared by all settings and ``[setting.K]`` holds
    per-setting overrides. A file with only ``[config]`` defines one setting,
    taken from its ``setting`` key.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise SchemaError(f"{source}: {exc}") from None
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    shared = _config_kwargs(cp["config"], f"{source} [config]") if cp.has_section("config") else {}
    per = {}
    for sec in cp.sections():
        if sec.startswith("setting."):
            try:
                k = int(sec.split(".", 1)[1])
            except ValueError:
                raise SchemaError(f"{source}: bad section name [{sec}]") from None
            kw = dict(shared)
            kw.update(_config_kwargs(cp[sec], f"{source} [{sec}]"))
            kw["setting"] = k
            per[k] = kw
    if not per:
        per[int(shared.get("setting", 1))] = shared
    return exp, per


def _read_text(spec: str) -> tuple[str, str]:
    if spec in BUNDLED_EXPERIMENTS:
        ref = resources.files("recency") / "data" / "experiments" / f"{spec}.ini"
        return ref.read_text(encoding="utf-8"), spec
    try:
        return Path(spec).read_text(encoding="utf-8"), spec
    except FileNotFoundError:
        raise SchemaError(f"{spec}: experiment spec not found") from None


def load_spec(spec: str) -> ExperimentSpec:
    text, source = _read_text(spec)
    exp, per = parse_config(text, source)
    try:
        settings = {k: SimConfig(**kw) for k, kw in per.items()}
    except PreconditionError as exc:
        raise SchemaError(f"{source}: {exc}") from None
    est = tuple(e.strip() for e in exp.get("estimators", "standard,proposed").split(",") if e.strip())
    spec_obj = ExperimentSpec(exp.get("name", Path(source).stem), exp.get("table", "table5"),
                              exp.get("assays", "default"), exp.get("single_subtype", "B"), settings, est)
    resolve_table(spec_obj.table, source)
    return spec_obj


def resolve_table(table: str, source: str = "", normalize: bool = True) -> PopulationTable:
    if table in BUNDLED_TABLES:
        return bundled_table(table, normalize)
    path = Path(table)
    if not path.is_absolute() and source and not path.exists():
        path = Path(source).parent / path
    if not path.exists():
        raise SchemaError(f"{source}: population table {table!r} not found")
    return load_table(path, normalize)


def resolve_assays(assays: str, table: PopulationTable, single_subtype: str = "B") -> dict[str, RecencyAssay]:
    """Assay per subtype label in ``table``; tables without subtypes use ``single_subtype``."""
    if assays == "default":
        spec = {"A": SUBTYPE_A, "B": SUBTYPE_B}
    else:
        from .io import read_assays
        spec = read_assays(assays)
    out = dict(spec)
    if not table.has_subtype:
        if single_subtype not in spec:
            raise SchemaError(f"assay for subtype {single_subtype!r} not defined")
        out[""] = spec[single_subtype]
    missing = [s for s in table.subtypes if s not in out]
    if missing:
        raise SchemaError(f"no assay for table subtype(s) {missing}")
    return out


def worker_count() -> int:
    try:
        cap = int(os.environ.get("RECENCY_THREADS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(cap, n) if cap > 0 else n)


def _job(args):
    config, table, assays, rep = args
    return run_replication(config, table, assays, rep)


def run_setting(config: SimConfig, table: PopulationTable, assays, workers: int | None = None,
                progress=None) -> list[dict]:
    """All replications of one setting, ordered by replication index."""
    workers = worker_count() if workers is None else max(1, workers)
    jobs = [(config, table, assays, r) for r in range(config.replications)]
    if workers == 1 or len(jobs) <= 1:
        rows = []
        for j in jobs:
            rows.append(_job(j))
            if progress:
                progress(len(rows), len(jobs))
        return rows
    with ProcessPoolExecutor(max_workers=workers) as ex:
        rows = list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return sorted(rows, key=lambda r: r["rep"])


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    setting: int
    quantity: str  # incidence | efficacy
    estimator: str
    n_used: int
    bias: float
    se: float
    np_see: float
    np_cov: float
    p_see: float
    p_cov: float

    def scaled(self) -> dict:
        """Values in the table layout: bias, SE and SEE times 100; coverage in percent."""
        return {"setting": self.setting, "quantity": self.quantity, "estimator": self.estimator,
                "n": self.n_used, "bias_x100": 100 * self.bias, "se_x100": 100 * self.se,
                "np_see_x100": 100 * self.np_see, "np_cov": self.np_cov,
                "p_see_x100": 100 * self.p_see, "p_cov": self.p_cov}


def _nanmean(v):
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def _coverage(truth, lo, hi):
    lo, hi, truth = (np.asarray(v, dtype=float) for v in (lo, hi, truth))
    ok = np.isfinite(lo) & np.isfinite(hi)
    if not ok.any():
        return math.nan
    return float(100 * np.mean((lo[ok] <= truth[ok]) & (truth[ok] <= hi[ok])))


def _quantity(rows, name, efficacy: bool):
    """Estimates, truths and per-scheme (lo, hi, se) for one quantity."""
    est, truth, ci = [], [], {"np": ([], [], []), "p": ([], [], [])}
    key = f"ratio_{name}" if efficacy else name
    for r in rows:
        if r.get("error") or key not in r or not math.isfinite(r[key]):
            continue
        if efficacy:
            est.append(1.0 - r[key])
            truth.append(r["efficacy_truth"])
        else:
            est.append(r[key])
            truth.append(r["truth"])
        for tag, (lo, hi, se) in ci.items():
            a, b = r.get(f"{key}_{tag}_lo", math.nan), r.get(f"{key}_{tag}_hi", math.nan)
            if efficacy:
                a, b = 1.0 - b, 1.0 - a
            lo.append(a)
            hi.append(b)
            se.append(r.get(f"{key}_{tag}_se", math.nan))
    return np.asarray(est), np.asarray(truth), ci


def summarize(rows: Sequence[dict], setting: int, estimators=("standard", "proposed")) -> list[SummaryRow]:
    out = []
    quantities = [("incidence", False)]
    if any("ratio_proposed" in r for r in rows):
        quantities.append(("efficacy", True))
    for qname, eff in quantities:
        for name in estimators:
            est, truth, ci = _quantity(rows, name, eff)
            n = len(est)
            bias = float(np.mean(est - truth)) if n else math.nan
            se = float(np.std(est, ddof=1)) if n > 1 else math.nan
            out.append(SummaryRow(setting, qname, name, n, bias, se,
                                  _nanmean(ci["np"][2]), _coverage(truth, ci["np"][0], ci["np"][1]),
                                  _nanmean(ci["p"][2]), _coverage(truth, ci["p"][0], ci["p"][1])))
    return out


def format_table(rows: Sequence[SummaryRow], title: str = "") -> str:
    head = f"{'Setting':>7} {'Quantity':<10} {'Estimator':<10} {'n':>4} {'Bias x100':>10} {'SE x100':>8} " \
           f"{'NP SEE':>7} {'NP Cov':>7} {'P SEE':>7} {'P Cov':>7}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]

    def f(v, w, p):
        return f"{v:>{w}.{p}f}" if math.isfinite(v) else f"{'-':>{w}}"

    for r in rows:
        s = r.scaled()
        lines.append(f"{r.setting:>7} {r.quantity:<10} {r.estimator:<10} {r.n_used:>4} "
                     f"{f(s['bias_x100'], 10, 2)} {f(s['se_x100'], 8, 2)} {f(s['np_see_x100'], 7, 2)} "
                     f"{f(s['np_cov'], 7, 1)} {f(s['p_see_x100'], 7, 2)} {f(s['p_cov'], 7, 1)}")
    return "\n".join(lines)


def run_experiment(spec: ExperimentSpec, settings: Sequence[int] | None = None, workers: int | None = None,
                   overrides: Mapping[str, object] | None = None, progress=None):
    """Run the chosen settings; returns ({setting: rows}, [SummaryRow])."""
    table = resolve_table(spec.table)
    assays = resolve_assays(spec.assays, table, spec.single_subtype)
    chosen = sorted(spec.settings) if settings is None else list(settings)
    all_rows, summary = {}, []
    for k in chosen:
        if k not in spec.settings:
            raise SchemaError(f"experiment {spec.name!r} has no setting {k}")
        cfg = spec.settings[k]
        if overrides:
            cfg = dataclasses.replace(cfg, **{kk: v for kk, v in overrides.items() if v is not None})
        rows = run_setting(cfg, table, assays, workers, progress)
        all_rows[k] = rows
        summary.extend(summarize(rows, k, spec.estimators))
    return all_rows, summary
