"""CSV readers and writers for subject records, assay specifications and calibration panels."""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .assay import (CalibrationPanel, GammaSurvival, GammaSurvivalWithPlateau, RecencyAssay, Tabulated)
from .errors import SchemaError
from .numkernel import GammaParams
from .records import CROSS_SECTIONAL, EXTERNAL_TARGET, MISSING, Records

PathLike = Union[str, Path]
RECORD_FIELDS = ("subtype", "hiv_positive", "recency_tested", "recent", "in_target", "population")
_INDICATORS = ("hiv_positive", "recency_tested", "recent", "in_target")
_POPULATIONS = {CROSS_SECTIONAL: 0, EXTERNAL_TARGET: 1}


def _read_rows(path: PathLike):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise SchemaError(f"{path}: missing header row")
            return [h.strip() for h in reader.fieldnames], list(reader)
    except FileNotFoundError:
        raise SchemaError(f"{path}: file not found") from None


def _indicator(v: str, path, line, col) -> int:
    v = (v or "").strip()
    if v == "":
        return MISSING
    if v in ("0", "1"):
        return int(v)
    raise SchemaError(f"{path}: row {line}, column {col!r}: expected 0, 1 or empty, got {v!r}")


# ---------------------------------------------------------------------------
# Subject records
# ---------------------------------------------------------------------------


def read_records(path: PathLike, require: Sequence[str] = ()) -> Records:
    """Parse a subject-record CSV.

    Columns ``id`` and the fields in ``RECORD_FIELDS`` are reserved; every
    other column is an integer-coded covariate. Empty cells are missing.
    ``require`` lists reserved columns that must be present.
    """
    header, rows = _read_rows(path)
    for col in require:
        if col not in header:
            raise SchemaError(f"{path}: required column {col!r} is missing")
    cov_names = [h for h in header if h not in RECORD_FIELDS and h != "id"]
    n = len(rows)
    cov = np.zeros((n, len(cov_names)), dtype=np.int64)
    cols = {c: np.full(n, MISSING, dtype=np.int8) for c in _INDICATORS}
    sub = np.full(n, "", dtype="<U16")
    pop = np.zeros(n, dtype=np.int8)
    for i, row in enumerate(rows):
        line = i + 2
        for j, c in enumerate(cov_names):
            v = (row.get(c) or "").strip()
            try:
                cov[i, j] = int(v)
            except ValueError:
                raise SchemaError(f"{path}: row {line}, column {c!r}: covariate must be an integer, got {v!r}") from None
        for c in _INDICATORS:
            if c in row:
                cols[c][i] = _indicator(row[c], path, line, c)
        if "subtype" in row:
            sub[i] = (row["subtype"] or "").strip()
        if "population" in row:
            p = (row["population"] or "").strip() or CROSS_SECTIONAL
            if p not in _POPULATIONS:
                raise SchemaError(f"{path}: row {line}, column 'population': unknown value {p!r}")
            pop[i] = _POPULATIONS[p]
    rec = Records(cov, cols["hiv_positive"], cols["recent"], cols["recency_tested"], sub,
                  cols["in_target"], pop, tuple(cov_names))
    _check_record_invariants(rec, path)
    return rec


def _check_record_invariants(rec: Records, path):
    cross = rec.population == 0
    bad = np.flatnonzero(cross & (rec.hiv == MISSING))
    if bad.size:
        raise SchemaError(f"{path}: row {bad[0] + 2}, column 'hiv_positive': required for cross-sectional rows")
    bad = np.flatnonzero((rec.recent != MISSING) & (rec.hiv != 1))
    if bad.size:
        raise SchemaError(f"{path}: row {bad[0] + 2}, column 'recent': only HIV-positive rows may carry a result")
    bad = np.flatnonzero((rec.recent != MISSING) & (rec.tested == 0))
    if bad.size:
        raise SchemaError(f"{path}: row {bad[0] + 2}, column 'recent': result present but recency_tested is 0")


def _cell(v: int) -> str:
    return "" if v == MISSING else str(int(v))


def write_records(records: Records, path_or_buf, ids: Iterable | None = None) -> None:
    header = ["id", *records.covariate_names, *RECORD_FIELDS]
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        ids = list(ids) if ids is not None else range(1, len(records) + 1)
        names = {v: k for k, v in _POPULATIONS.items()}
        for i, rid in zip(range(len(records)), ids):
            w.writerow([rid, *records.covariates[i].tolist(), records.subtype[i],
                        _cell(records.hiv[i]), _cell(records.tested[i]), _cell(records.recent[i]),
                        _cell(records.in_target[i]), names[int(records.population[i])]])
    finally:
        if own:
            fh.close()


def records_to_csv(records: Records) -> str:
    buf = _io.StringIO()
    write_records(records, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Assay specifications
# ---------------------------------------------------------------------------

ASSAY_FIELDS = ("subtype", "family", "shape", "rate", "plateau", "cut_years", "t_star_years")


def read_assays(path: PathLike) -> dict[str, RecencyAssay]:
    """Parse an assay specification CSV into ``{subtype: RecencyAssay}``.

    ``gamma`` and ``gamma_plateau`` take one row per subtype. ``tabulated``
    curves take one row per node, with the node duration in ``cut_years`` and
    the test-recent probability in ``plateau``.
    """
    header, rows = _read_rows(path)
    missing = [c for c in ASSAY_FIELDS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")

    def num(row, col, line, required=True):
        v = (row.get(col) or "").strip()
        if v == "":
            if required:
                raise SchemaError(f"{path}: row {line}, column {col!r}: value required")
            return None
        try:
            return float(v)
        except ValueError:
            raise SchemaError(f"{path}: row {line}, column {col!r}: not a number: {v!r}") from None

    out, nodes = {}, {}
    for i, row in enumerate(rows):
        line = i + 2
        sub = (row["subtype"] or "").strip()
        fam = (row["family"] or "").strip()
        t_star = num(row, "t_star_years", line)
        try:
            if fam == "gamma":
                spec = GammaSurvival(GammaParams(num(row, "shape", line), num(row, "rate", line)))
            elif fam == "gamma_plateau":
                spec = GammaSurvivalWithPlateau(GammaParams(num(row, "shape", line), num(row, "rate", line)),
                                                num(row, "plateau", line), num(row, "cut_years", line))
            elif fam == "tabulated":
                d = nodes.setdefault(sub, ([], [], t_star))
                d[0].append(num(row, "cut_years", line))
                d[1].append(num(row, "plateau", line))
                continue
            else:
                raise SchemaError(f"{path}: row {line}, column 'family': unknown family {fam!r}")
        except SchemaError:
            raise
        except ValueError as exc:
            raise SchemaError(f"{path}: row {line}: {exc}") from None
        if sub in out:
            raise SchemaError(f"{path}: row {line}, column 'subtype': duplicate subtype {sub!r}")
        out[sub] = RecencyAssay(sub, spec, t_star)
    for sub, (d, p, t_star) in nodes.items():
        if sub in out:
            raise SchemaError(f"{path}: subtype {sub!r} defined twice")
        try:
            out[sub] = RecencyAssay(sub, Tabulated(tuple(d), tuple(p)), t_star)
        except ValueError as exc:
            raise SchemaError(f"{path}: subtype {sub!r}: {exc}") from None
    if not out:
        raise SchemaError(f"{path}: no assay rows")
    return out


# ---------------------------------------------------------------------------
# Calibration panels
# ---------------------------------------------------------------------------

PANEL_FIELDS = ("subject_id", "duration_years", "recent", "cohort")


def read_panel(path: PathLike) -> CalibrationPanel:
    header, rows = _read_rows(path)
    missing = [c for c in PANEL_FIELDS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    sid, dur, rec, lsid, lrec = [], [], [], [], []
    ids = {}
    for i, row in enumerate(rows):
        line = i + 2
        cohort = (row["cohort"] or "").strip()
        r = _indicator(row["recent"], path, line, "recent")
        if r == MISSING:
            raise SchemaError(f"{path}: row {line}, column 'recent': value required")
        key = (row["subject_id"] or "").strip()
        code = ids.setdefault(key, len(ids))
        if cohort == "longitudinal":
            v = (row["duration_years"] or "").strip()
            try:
                d = float(v)
            except ValueError:
                raise SchemaError(f"{path}: row {line}, column 'duration_years': number required") from None
            if d < 0:
                raise SchemaError(f"{path}: row {line}, column 'duration_years': must be nonnegative")
            sid.append(code)
            dur.append(d)
            rec.append(r)
        elif cohort == "long_infected":
            lsid.append(code)
            lrec.append(r)
        else:
            raise SchemaError(f"{path}: row {line}, column 'cohort': expected longitudinal or long_infected")
    return CalibrationPanel(np.asarray(sid, dtype=np.int64), np.asarray(dur, dtype=float),
                            np.asarray(rec, dtype=np.int8), np.asarray(lsid, dtype=np.int64),
                            np.asarray(lrec, dtype=np.int8))


def write_panel(panel: CalibrationPanel, path: PathLike, prefix: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_FIELDS)
        for s, d, r in zip(panel.subject_id.tolist(), panel.duration.tolist(), panel.recent.tolist()):
            w.writerow([f"{prefix}L{s}", repr(float(d)), r, "longitudinal"])
        for s, r in zip(panel.long_subject_id.tolist(), panel.long_recent.tolist()):
            w.writerow([f"{prefix}X{s}", "", r, "long_infected"])
