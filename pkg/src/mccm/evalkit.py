"""ROC, AUC and D-EER for pristine-vs-synthetic scores, plus result tables.

The positive class is pristine (label 1): TPR is the fraction of pristine
images accepted, FPR the fraction of synthetic images accepted. Many
forensics tools use the opposite convention.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imgdata import atomic_write_text


@dataclass(frozen=True)
class ScoreSet:
    ids: tuple[str, ...]
    labels: np.ndarray
    scores: np.ndarray

    @classmethod
    def from_arrays(cls, labels, scores, ids: Sequence[str] | None = None) -> "ScoreSet":
        labels = np.asarray(labels, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if labels.shape != scores.shape or labels.ndim != 1:
            raise ValueError("labels and scores must be 1-D arrays of equal length")
        if ids is None:
            ids = [str(i) for i in range(len(labels))]
        return cls(tuple(ids), labels, scores)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at which each point (after the origin) is reached

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass
class EvalReport:
    auc: float
    d_eer: float
    n_pos: int
    n_neg: int
    curve: RocCurve | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"auc": self.auc, "d_eer": self.d_eer, "n_pos": self.n_pos, "n_neg": self.n_neg, **self.meta}


def roc_curve(scores: ScoreSet) -> RocCurve:
    """Threshold sweep from the highest score down; tied scores form one step."""
    y = scores.labels
    s = scores.scores
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one pristine (1) and one synthetic (0) sample")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted == 1)
    fp = np.cumsum(y_sorted == 0)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fpr = np.r_[0.0, fp[ends] / n_neg]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    return RocCurve(fpr, tpr, s_sorted[ends])


def auc(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def d_eer(curve: RocCurve) -> float:
    """Rate where FPR equals FNR, linearly interpolated between operating points."""
    diff = curve.fpr - (1.0 - curve.tpr)
    exact = np.flatnonzero(diff == 0.0)
    if exact.size:
        return float(curve.fpr[exact[0]])
    i = int(np.flatnonzero((diff[:-1] < 0) & (diff[1:] > 0))[0])
    t = -diff[i] / (diff[i + 1] - diff[i])
    return float(curve.fpr[i] + t * (curve.fpr[i + 1] - curve.fpr[i]))


def evaluate(scores: ScoreSet, **meta) -> EvalReport:
    curve = roc_curve(scores)
    return EvalReport(
        auc(curve),
        d_eer(curve),
        int((scores.labels == 1).sum()),
        int((scores.labels == 0).sum()),
        curve,
        dict(meta),
    )


# --------------------------------------------------------------------------- score files


def format_float(x: float) -> str:
    return repr(float(x))


def scores_to_csv(scores: ScoreSet) -> str:
    buf = io.StringIO()
    buf.write("id,label,score\n")
    for i, y, s in zip(scores.ids, scores.labels.tolist(), scores.scores.tolist()):
        buf.write(f"{i},{y},{format_float(s)}\n")
    return buf.getvalue()


def write_scores(scores: ScoreSet, path) -> None:
    atomic_write_text(path, scores_to_csv(scores))


def read_scores(path) -> ScoreSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label", "score"]:
            raise ValueError(f"{path}: expected header id,label,score")
        rows = list(reader)
    return ScoreSet.from_arrays([int(r[1]) for r in rows], [float(r[2]) for r in rows], [r[0] for r in rows])


def write_roc(curve: RocCurve, path) -> None:
    lines = ["fpr,tpr"] + [f"{format_float(f)},{format_float(t)}" for f, t in curve.points()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_report_json(report: EvalReport, path) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- tables

TABLE_AXES = ("variant", "protocol", "aug", "train_gen", "test_gen", "seed")
TABLE_FIELDS = TABLE_AXES + ("auc", "d_eer", "d_eer_pct", "best_auc", "best_d_eer")


class IncompleteGridError(ValueError):
    def __init__(self, missing: list[tuple]):
        self.missing = missing
        listed = "; ".join(",".join(str(v) for v in m) for m in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        super().__init__(f"{len(missing)} grid cell(s) missing: {listed}{more}")


def _cell_key(report: EvalReport) -> tuple:
    try:
        return tuple(report.meta[a] for a in TABLE_AXES)
    except KeyError as exc:
        raise ValueError(f"report lacks grid coordinate {exc}") from None


def check_grid(reports: Iterable[EvalReport], expected: Iterable[tuple] | None = None) -> None:
    """Raise ``IncompleteGridError`` listing cells absent from ``reports``.

    Without ``expected``, every variant must cover every
    (protocol, aug, train_gen, test_gen, seed) cell present for any variant.
    """
    keys = {_cell_key(r) for r in reports}
    if expected is None:
        variants = sorted({k[0] for k in keys})
        cells = sorted({k[1:] for k in keys})
        expected = [(v,) + c for v, c in itertools.product(variants, cells)]
    missing = [tuple(e) for e in expected if tuple(e) not in keys]
    if missing:
        raise IncompleteGridError(missing)


def report_table(reports: Sequence[EvalReport], expected: Iterable[tuple] | None = None) -> str:
    """Result table as CSV, one row per (variant, cell), best marked per cell and metric."""
    reports = list(reports)
    check_grid(reports, expected)
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        groups.setdefault(_cell_key(r)[1:], []).append(r)
    best_auc = {g: max(r.auc for r in rs) for g, rs in groups.items()}
    best_eer = {g: min(r.d_eer for r in rs) for g, rs in groups.items()}

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_FIELDS)
    for r in sorted(reports, key=lambda r: tuple(str(v) for v in _cell_key(r))):
        key = _cell_key(r)
        g = key[1:]
        writer.writerow(
            list(key)
            + [
                format_float(r.auc),
                format_float(r.d_eer),
                f"{100.0 * r.d_eer:.2f}",
                int(r.auc == best_auc[g]),
                int(r.d_eer == best_eer[g]),
            ]
        )
    return buf.getvalue()


def parse_table(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        row["auc"] = float(row["auc"])
        row["d_eer"] = float(row["d_eer"])
        row["best_auc"] = row["best_auc"] == "1"
        row["best_d_eer"] = row["best_d_eer"] == "1"
    return rows


def write_table(reports: Sequence[EvalReport], path, expected=None) -> None:
    atomic_write_text(Path(path), report_table(reports, expected))
