"""Per-category Error Detection F1 via onset-only note matching."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .midi_core import LabeledScore, NoteEvent, NoteTrack

CATEGORIES = ("correct", "missed", "extra")
DEFAULT_TOLERANCE = 0.05
# float slack so that a 50 ms tolerance admits a 50 ms difference
_EPS = 1e-9


def _notes(x) -> list[NoteEvent]:
    return list(x.notes) if isinstance(x, NoteTrack) else list(x)


def onset_match(ref_notes, est_notes, tolerance: float = DEFAULT_TOLERANCE) -> list[tuple[int, int]]:
    """Maximum matching of (ref index, est index) pairs with equal pitch and
    onsets within ``tolerance``."""
    ref, est = _notes(ref_notes), _notes(est_notes)
    if not ref or not est:
        return []
    ro = np.array([n.onset for n in ref])
    eo = np.array([n.onset for n in est])
    rp = np.array([n.pitch for n in ref])
    ep = np.array([n.pitch for n in est])
    ok = (np.abs(ro[:, None] - eo[None, :]) <= tolerance + _EPS) & (rp[:, None] == ep[None, :])
    if not ok.any():
        return []
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return [(i, int(j)) for i, j in enumerate(match) if j >= 0]


@dataclass
class CategoryScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def prf(tp: int, n_ref: int, n_est: int) -> CategoryScore:
    p = tp / n_est if n_est else 0.0
    r = tp / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return CategoryScore(p, r, f, tp, n_est - tp, n_ref - tp)


@dataclass
class DetectionReport:
    categories: dict[str, CategoryScore]
    instrument: str = ""
    source_id: str = ""

    @property
    def average(self) -> CategoryScore:
        cs = [self.categories[c] for c in CATEGORIES]
        return CategoryScore(
            float(np.mean([c.precision for c in cs])),
            float(np.mean([c.recall for c in cs])),
            float(np.mean([c.f1 for c in cs])),
            sum(c.tp for c in cs), sum(c.fp for c in cs), sum(c.fn for c in cs),
        )

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument,
            "source_id": self.source_id,
            "categories": {k: asdict(v) for k, v in self.categories.items()},
            "average": asdict(self.average),
        }


def report(truth: LabeledScore, predicted: LabeledScore, tolerance: float = DEFAULT_TOLERANCE,
           instrument: str = "", source_id: str = "") -> DetectionReport:
    """Both-empty categories count as perfect, matching the usual onset-F1 convention."""
    cats = {}
    for c in CATEGORIES:
        ref, est = getattr(truth, c), getattr(predicted, c)
        if len(ref) == 0 and len(est) == 0:
            cats[c] = CategoryScore(1.0, 1.0, 1.0, 0, 0, 0)
            continue
        tp = len(onset_match(ref, est, tolerance))
        cats[c] = prf(tp, len(ref), len(est))
    return DetectionReport(cats, instrument or truth.correct.instrument, source_id or truth.correct.source_id)


def false_pairs(truth: LabeledScore, predicted: LabeledScore, tolerance: float = DEFAULT_TOLERANCE) -> int:
    """Correctly played notes that the prediction splits into a Missed plus an Extra."""
    as_missed = {i for i, _ in onset_match(truth.correct, predicted.missed, tolerance)}
    as_extra = {i for i, _ in onset_match(truth.correct, predicted.extra, tolerance)}
    return len(as_missed & as_extra)


@dataclass
class AggregateTable:
    rows: dict[str, dict[str, CategoryScore]]  # instrument -> category (incl. "average") -> means
    overall: dict[str, CategoryScore]
    n_tracks: dict[str, int] = field(default_factory=dict)
    weighting: str = "track-weighted macro average"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["instrument", "n_tracks"]
        for c in CATEGORIES + ("average",):
            header += [f"{c}_P", f"{c}_R", f"{c}_F1"]
        w.writerow(header)
        for name, cats in list(self.rows.items()) + [("Average", self.overall)]:
            n = self.n_tracks.get(name, sum(self.n_tracks.values()))
            row = [name, n]
            for c in CATEGORIES + ("average",):
                s = cats[c]
                row += [f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"]
            w.writerow(row)
        return buf.getvalue()

    def pretty(self) -> str:
        lines = [f"# {self.weighting}", f"{'instrument':<14}" + "".join(f"{c:>24}" for c in CATEGORIES + ("average",))]
        lines.append(" " * 14 + "".join(f"{'P':>8}{'R':>8}{'F1':>8}" for _ in range(4)))
        for name, cats in list(self.rows.items()) + [("Average", self.overall)]:
            cells = "".join(f"{cats[c].precision:8.3f}{cats[c].recall:8.3f}{cats[c].f1:8.3f}" for c in CATEGORIES + ("average",))
            lines.append(f"{name:<14}{cells}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "weighting": self.weighting,
            "n_tracks": self.n_tracks,
            "overall": {k: asdict(v) for k, v in self.overall.items()},
            "instruments": {i: {k: asdict(v) for k, v in cats.items()} for i, cats in self.rows.items()},
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _mean_scores(reports: Sequence[DetectionReport]) -> dict[str, CategoryScore]:
    out = {}
    for c in CATEGORIES + ("average",):
        cs = [r.average if c == "average" else r.categories[c] for r in reports]
        out[c] = CategoryScore(
            float(np.mean([s.precision for s in cs])),
            float(np.mean([s.recall for s in cs])),
            float(np.mean([s.f1 for s in cs])),
            sum(s.tp for s in cs), sum(s.fp for s in cs), sum(s.fn for s in cs),
        )
    return out


def aggregate(reports: Sequence[tuple[str, DetectionReport]]) -> AggregateTable:
    """Per-instrument means plus an overall mean over all tracks."""
    if not reports:
        raise ValueError("no reports to aggregate")
    by_inst: dict[str, list[DetectionReport]] = {}
    for inst, r in reports:
        by_inst.setdefault(inst, []).append(r)
    for rs in by_inst.values():
        rs.sort(key=lambda r: (r.source_id, json.dumps(r.to_dict(), sort_keys=True)))
    rows = {inst: _mean_scores(by_inst[inst]) for inst in sorted(by_inst)}
    overall = _mean_scores([r for inst in sorted(by_inst) for r in by_inst[inst]])
    return AggregateTable(rows, overall, {k: len(v) for k, v in sorted(by_inst.items())})
