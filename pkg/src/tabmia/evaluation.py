"""ROC, AUC and TPR at a fixed FPR, plus report/figure emission.

Conventions: higher score means "more likely member". Tied scores move
together in the threshold sweep and count 1/2 in the pairwise AUC.
TPR@FPR is the conservative step value (no interpolation).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SingleClassError(ValueError):
    pass


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


@dataclass
class MetricReport:
    id: str
    auc: float
    tpr_at_fpr: dict[float, float]
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "auc": round(float(self.auc), 12),
            "tpr_at_fpr": {f"{k:.2f}": round(float(v), 12) for k, v in sorted(self.tpr_at_fpr.items())},
            "n_pos": int(self.n_pos),
            "n_neg": int(self.n_neg),
        }


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or (~y).all():
        raise SingleClassError("both members and holdout records are required")
    return s, y


def compute_roc(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores, highest first.

    Point ``i`` classifies ``score >= thresholds[i]`` as member; the first
    point uses ``+inf`` so the curve starts at ``(0, 0)`` and ends at ``(1, 1)``.
    """
    s, y = _prepare(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every block of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return RocCurve(
        np.r_[np.inf, s[ends]],
        np.r_[0, fp] / n_neg,
        np.r_[0, tp] / n_pos,
    )


def auc(scores_or_curve, labels=None) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    curve = scores_or_curve if isinstance(scores_or_curve, RocCurve) else compute_roc(scores_or_curve, labels)
    return float(np.trapezoid(curve.tpr, curve.fpr))


def mann_whitney_auc(scores, labels) -> float:
    """Rank-based P(member > holdout) + 1/2 P(tie)."""
    s, y = _prepare(scores, labels)
    from scipy.stats import rankdata

    ranks = rankdata(s)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def tpr_at_fpr(scores, labels, fpr_level: float = 0.10) -> float:
    if not 0 < fpr_level < 1:
        raise ValueError("fpr_level must lie in (0, 1)")
    s, y = _prepare(scores, labels)
    curve = compute_roc(s, y)
    n_neg = int((~y).sum())
    # compare counts, not ratios, to keep 0.1 * 10 == 1 exact
    max_fp = np.floor(fpr_level * n_neg + 1e-9)
    ok = np.rint(curve.fpr * n_neg) <= max_fp
    return float(curve.tpr[ok].max())


def metric_report(id_: str, scores, labels, fpr_levels=(0.10,)) -> MetricReport:
    s, y = _prepare(scores, labels)
    return MetricReport(
        id_,
        auc(s, y),
        {float(f): tpr_at_fpr(s, y, f) for f in fpr_levels},
        int(y.sum()),
        int((~y).sum()),
    )


def _svg_roc(curves: dict[str, RocCurve], title: str) -> str:
    size, pad = 360, 40
    inner = size - 2 * pad
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def pt(f, t):
        return f"{pad + f * inner:.3f},{pad + (1.0 - t) * inner:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<title>{title}</title>',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#000"/>',
        f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="#999" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">FPR</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">TPR</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad + v * inner}" y="{pad + inner + 14}" text-anchor="middle" font-size="10">{v:g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{pad + (1 - v) * inner + 3}" text-anchor="end" font-size="10">{v:g}</text>')
    for k, (name, c) in enumerate(curves.items()):
        colour = palette[k % len(palette)]
        pts = " ".join(pt(f, t) for f, t in zip(c.fpr, c.tpr))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 12 * k}" font-size="10" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(reports, curves: dict[str, RocCurve], out_dir, figures: dict[str, list[str]] | None = None) -> list[Path]:
    """Write ``metrics.json``, one ``roc_<id>.csv`` per curve and SVG figures.

    Args:
        reports: MetricReport list, serialised in order.
        curves: curve id -> RocCurve.
        out_dir: destination directory (created if missing).
        figures: figure name -> curve ids drawn in it. Defaults to one figure
            per curve.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    p = out / "metrics.json"
    p.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    written.append(p)
    for cid, c in curves.items():
        p = out / f"roc_{cid}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for th, f, t in zip(c.thresholds, c.fpr, c.tpr):
                w.writerow([repr(float(th)), repr(float(f)), repr(float(t))])
        written.append(p)
    if figures is None:
        figures = {cid: [cid] for cid in curves}
    for name, ids in figures.items():
        p = out / f"roc_{name}.svg"
        p.write_text(_svg_roc({i: curves[i] for i in ids}, name))
        written.append(p)
    return written


@dataclass
class ScoreTable:
    """Scores joined with ground-truth labels, grouped by model."""

    model_ids: list[str] = field(default_factory=list)
    record_ids: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    def subset(self, models) -> "ScoreTable":
        keep = set(models)
        idx = [i for i, m in enumerate(self.model_ids) if m in keep]
        return ScoreTable(
            [self.model_ids[i] for i in idx],
            [self.record_ids[i] for i in idx],
            [self.scores[i] for i in idx],
            [self.labels[i] for i in idx],
        )


def read_scores(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["model_id", "record_id", "score"]:
            raise ValueError(f"{path}: expected header model_id,record_id,score")
        return [(r["model_id"], r["record_id"], float(r["score"])) for r in reader]


def read_ground_truth(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {r["record_id"]: int(r["is_member"]) for r in reader}


def join_scores(scores, truth: dict[str, dict[str, int]]) -> ScoreTable:
    """Attach labels from ``truth[model_id][record_id]`` to score triples."""
    tab = ScoreTable()
    for mid, rid, s in scores:
        try:
            lab = truth[mid][rid]
        except KeyError:
            raise KeyError(f"no ground truth for model {mid!r} record {rid!r}") from None
        tab.model_ids.append(mid)
        tab.record_ids.append(rid)
        tab.scores.append(s)
        tab.labels.append(lab)
    return tab
