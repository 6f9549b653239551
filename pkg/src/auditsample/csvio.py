"""CSV readers and writers for unit data, plans, selections and reports.

All files are UTF-8, comma-separated, with a mandatory header row.
Category labels are strings; they are mapped to 0-based indices in order
of first appearance unless a mapping is supplied.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


class CsvFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}" if line else f"{path}: {message}")
        self.path = str(path)
        self.line = line


class UnknownLabelError(ValueError):
    def __init__(self, column, labels):
        self.column = column
        self.labels = sorted(labels)
        super().__init__(f"unknown {column} labels: {', '.join(self.labels)}")


def _reader(path, required):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise CsvFormatError(path, 1, "file is empty, a header row is required") from None
    header = [h.strip() for h in header]
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise CsvFormatError(path, 1, f"header lacks column(s) {', '.join(missing)}")
    return fh, reader, {c: header.index(c) for c in header}, len(header)


def _rows(path, required):
    fh, reader, cols, width = _reader(path, required)
    with fh:
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise CsvFormatError(path, line, f"expected {width} fields, found {len(row)}")
            yield line, {c: row[k].strip() for c, k in cols.items()}


class LabelIndex:
    """Label -> index map that grows in first-appearance order unless frozen."""

    def __init__(self, labels=(), frozen=False):
        self.labels = list(labels)
        self.index = {lab: k for k, lab in enumerate(self.labels)}
        self.frozen = frozen
        self.unknown = set()

    def __call__(self, label):
        k = self.index.get(label)
        if k is None:
            if self.frozen:
                self.unknown.add(label)
                return -1
            k = self.index[label] = len(self.labels)
            self.labels.append(label)
        return k

    def __len__(self):
        return len(self.labels)


def read_units(path, x_labels=None, y_labels=None):
    """Read ``unit_id,x,y,z``; returns (Units, x LabelIndex, y LabelIndex)."""
    from .sampler import Units

    xi = LabelIndex(x_labels or (), frozen=x_labels is not None)
    yi = LabelIndex(y_labels or (), frozen=y_labels is not None)
    ids, xs, ys, zs = [], [], [], []
    seen = {}
    for line, rec in _rows(path, ("unit_id", "x", "y", "z")):
        uid = rec["unit_id"]
        if not uid:
            raise CsvFormatError(path, line, "empty unit_id")
        if uid in seen:
            raise CsvFormatError(path, line, f"duplicate unit_id {uid!r} (first on line {seen[uid]})")
        seen[uid] = line
        if rec["z"] not in ("0", "1"):
            raise CsvFormatError(path, line, f"z must be 0 or 1, got {rec['z']!r}")
        ids.append(uid)
        xs.append(xi(rec["x"]))
        ys.append(yi(rec["y"]))
        zs.append(int(rec["z"]))
    for name, idx in (("x", xi), ("y", yi)):
        if idx.unknown:
            raise UnknownLabelError(name, idx.unknown)
    if not ids:
        raise CsvFormatError(path, None, "no data rows")
    units = Units(np.array(ids, dtype=str), np.array(xs), np.array(ys), np.array(zs))
    return units, xi, yi


def read_counts(path):
    """Read an aggregated ``x,y,z,count`` table."""
    xi, yi = LabelIndex(), LabelIndex()
    recs = []
    for line, rec in _rows(path, ("x", "y", "z", "count")):
        if rec["z"] not in ("0", "1"):
            raise CsvFormatError(path, line, f"z must be 0 or 1, got {rec['z']!r}")
        try:
            c = int(rec["count"])
        except ValueError:
            raise CsvFormatError(path, line, f"count must be an integer, got {rec['count']!r}") from None
        if c < 0:
            raise CsvFormatError(path, line, "count must be nonnegative")
        recs.append((xi(rec["x"]), yi(rec["y"]), int(rec["z"]), c))
    if not recs:
        raise CsvFormatError(path, None, "no data rows")
    counts = np.zeros((len(xi), len(yi), 2), dtype=np.int64)
    for i, j, k, c in recs:
        counts[i, j, k] += c
    return counts, xi, yi


PLAN_COLUMNS = ("x", "y", "i", "j", "n_ij0", "n_ij1", "delta_plus", "delta_minus")


def write_plan(path, plan, x_labels, y_labels):
    n = plan.table.counts
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        for i in range(plan.table.I):
            for j in range(plan.table.J):
                w.writerow([x_labels[i], y_labels[j], i + 1, j + 1, int(n[i, j, 0]), int(n[i, j, 1]),
                            int(plan.delta_plus[i, j]), int(plan.delta_minus[i, j])])


def read_plan(path):
    """Returns (counts, delta_plus, delta_minus, x labels, y labels)."""
    recs = []
    for line, rec in _rows(path, PLAN_COLUMNS):
        try:
            vals = [int(rec[c]) for c in PLAN_COLUMNS[2:]]
        except ValueError:
            raise CsvFormatError(path, line, "plan columns i..delta_minus must be integers") from None
        recs.append((line, rec["x"], rec["y"], *vals))
    if not recs:
        raise CsvFormatError(path, None, "no data rows")
    I = max(r[3] for r in recs)
    J = max(r[4] for r in recs)
    counts = np.zeros((I, J, 2), dtype=np.int64)
    dp = np.zeros((I, J), dtype=np.int64)
    dm = np.zeros((I, J), dtype=np.int64)
    xl = [None] * I
    yl = [None] * J
    for line, xlab, ylab, i, j, n0, n1, a, b in recs:
        if i < 1 or j < 1:
            raise CsvFormatError(path, line, "indices i and j start at 1")
        counts[i - 1, j - 1] = (n0, n1)
        dp[i - 1, j - 1] = a
        dm[i - 1, j - 1] = b
        for labels, k, lab, name in ((xl, i - 1, xlab, "x"), (yl, j - 1, ylab, "y")):
            if labels[k] is None:
                labels[k] = lab
            elif labels[k] != lab:
                raise CsvFormatError(path, line, f"{name} index {k + 1} has labels {labels[k]!r} and {lab!r}")
    if None in xl or None in yl:
        raise CsvFormatError(path, None, "plan does not cover every (i, j) stratum")
    return counts, dp, dm, xl, yl


def write_selection(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit_id", "action"))
        w.writerows(rows)


def read_audited(path, y_labels=None):
    """Read ``w,x,y`` records of audited units."""
    wi, xi = LabelIndex(), LabelIndex()
    yi = LabelIndex(y_labels or (), frozen=y_labels is not None)
    ws, xs, ys = [], [], []
    for _, rec in _rows(path, ("w", "x", "y")):
        ws.append(wi(rec["w"]))
        xs.append(xi(rec["x"]))
        ys.append(yi(rec["y"]))
    if yi.unknown:
        raise UnknownLabelError("y", yi.unknown)
    if not ws:
        raise CsvFormatError(path, None, "no data rows")
    return np.array(ws), np.array(xs), np.array(ys), wi, xi, yi


def read_margins(path):
    """Read ``y,p``; returns (labels, proportions)."""
    labels, ps = [], []
    for line, rec in _rows(path, ("y", "p")):
        try:
            p = float(rec["p"])
        except ValueError:
            raise CsvFormatError(path, line, f"p must be a number, got {rec['p']!r}") from None
        if rec["y"] in labels:
            raise CsvFormatError(path, line, f"duplicate stratum {rec['y']!r}")
        labels.append(rec["y"])
        ps.append(p)
    if not labels:
        raise CsvFormatError(path, None, "no data rows")
    return labels, np.array(ps)


def fmt(v):
    """Stable float formatting for reports."""
    if isinstance(v, (float, np.floating)):
        if np.isnan(v):
            return "NA"
        return repr(float(v))
    return v


def write_rows(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
