"""Similarity, element-wise, validity, property-preservation and degradation metrics.

Similarity compares predicted and true *weighted* triples with weighted
Jaccard; element-wise metrics compare predicted binary triples with the
binarized truth, pooled over all pairs and windows.  The two disagree
sharply when edges are almost always on, which is the point of reporting
both.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from mcallm.engine import RunResult, WindowRecord
from mcallm.sociogram import DIRECTED, MODALITIES, SociogramTriple, binarize, is_both_empty, network_metrics, weighted_jaccard
from mcallm.validation import ValidationError

PROPERTY_METRICS = ("density", "reciprocity", "clustering")
VALID_ACCURACY = 0.80


class EvalError(ValueError):
    """Evaluation preconditions not met (no windows, too few windows, mismatched series)."""


# --------------------------------------------------------------------------
# element-wise


@dataclass(frozen=True)
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def specificity(self) -> float:
        d = self.tn + self.fp
        return self.tn / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n if self.n else 0.0

    @property
    def balanced_accuracy(self) -> float:
        return (self.recall + self.specificity) / 2

    @property
    def mcc(self) -> float:
        """Matthews correlation; 0 when any marginal is empty."""
        tp, fp, tn, fn = (float(v) for v in (self.tp, self.fp, self.tn, self.fn))
        denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
        return (tp * tn - fp * fn) / denom if denom else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "accuracy": self.accuracy, "balanced_accuracy": self.balanced_accuracy, "mcc": self.mcc,
        }


def confusion(pred, truth) -> ConfusionMetrics:
    p = np.asarray(pred, dtype=bool).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if p.shape != t.shape:
        raise EvalError(f"prediction/truth size mismatch: {p.shape} vs {t.shape}")
    return ConfusionMetrics(int((p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum()), int((~p & t).sum()))


def _edge_mask(n: int, modality: str) -> np.ndarray:
    if DIRECTED[modality]:
        return ~np.eye(n, dtype=bool)
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def elementwise_metrics(pred: Sequence[SociogramTriple], truth: Sequence[SociogramTriple]) -> dict[str, ConfusionMetrics]:
    """Pooled confusion per modality (ordered pairs for conv, unordered otherwise) plus ``overall``."""
    if len(pred) != len(truth):
        raise EvalError(f"series length mismatch: {len(pred)} predicted vs {len(truth)} true windows")
    if not pred:
        raise EvalError("no windows to score")
    out = {}
    n = truth[0].n
    for m in MODALITIES:
        mask = _edge_mask(n, m)
        p = np.concatenate([(np.asarray(g[m]) > 0)[mask] for g in pred])
        t = np.concatenate([(np.asarray(g[m]) > 0)[mask] for g in truth])
        out[m] = confusion(p, t)
    out["overall"] = ConfusionMetrics(*(sum(getattr(out[m], f) for m in MODALITIES) for f in ("tp", "fp", "tn", "fn")))
    return out


def run_elementwise(result: RunResult) -> dict[str, ConfusionMetrics]:
    ok = _ok(result)
    return elementwise_metrics([r.predicted_binary for r in ok], [binarize(r.truth) for r in ok])


# --------------------------------------------------------------------------
# similarity


def _ok(result: RunResult) -> list[WindowRecord]:
    ok = result.ok_records
    if not ok:
        raise EvalError("run has no successfully predicted windows")
    return ok


@dataclass
class SimilarityReport:
    per_modality: dict[str, float]
    average_all: float
    average_conv_prox: float
    n_windows: int
    both_empty: dict[str, int]
    per_window: dict[str, list[float]] = field(default_factory=dict)

    def average(self, modalities: Sequence[str] = MODALITIES) -> float:
        return float(np.mean([self.per_modality[m] for m in modalities]))

    def to_dict(self) -> dict:
        return {
            "per_modality": dict(self.per_modality),
            "average_all": self.average_all,
            "average_conv_prox": self.average_conv_prox,
            "n_windows": self.n_windows,
            "both_empty": dict(self.both_empty),
        }


def window_similarity(pred: SociogramTriple, truth: SociogramTriple) -> dict[str, float]:
    return {m: weighted_jaccard(pred[m], truth[m]) for m in MODALITIES}


def similarity_report(result: RunResult) -> SimilarityReport:
    """Mean per-window weighted Jaccard of predicted vs true weighted triples."""
    ok = _ok(result)
    per_window = {m: [] for m in MODALITIES}
    empty = {m: 0 for m in MODALITIES}
    for r in ok:
        for m, v in window_similarity(r.predicted, r.truth).items():
            per_window[m].append(v)
            empty[m] += is_both_empty(r.predicted[m], r.truth[m])
    per_mod = {m: float(np.mean(v)) for m, v in per_window.items()}
    return SimilarityReport(
        per_modality=per_mod,
        average_all=float(np.mean([per_mod[m] for m in MODALITIES])),
        average_conv_prox=float(np.mean([per_mod["conv"], per_mod["prox"]])),
        n_windows=len(ok),
        both_empty=empty,
        per_window=per_window,
    )


# --------------------------------------------------------------------------
# valid windows


def cell_accuracy(pred_cells: np.ndarray, truth_cells: np.ndarray) -> dict[str, float]:
    """Per-second cell accuracy for conv (ordered pairs) and prox/attn (unordered pairs)."""
    n = truth_cells.shape[0]
    out = {}
    for k, m in enumerate(MODALITIES):
        mask = _edge_mask(n, m)
        p, t = pred_cells[..., k], truth_cells[..., k]
        if not DIRECTED[m]:
            p = np.logical_or(p, np.swapaxes(p, 0, 1))
            t = np.logical_or(t, np.swapaxes(t, 0, 1))
        out[m] = float((p[mask] == t[mask]).mean())
    return out


def valid_window_rate(result: RunResult, threshold: float = VALID_ACCURACY) -> float:
    """Fraction of windows whose mean conv/prox cell accuracy is at least ``threshold``."""
    ok = _ok(result)
    valid = 0
    for r in ok:
        if r.predicted_cells is None or r.truth_cells is None:
            raise EvalError(f"record {r.session_id}/{r.window_index} lacks per-second grids")
        acc = cell_accuracy(r.predicted_cells, r.truth_cells)
        valid += (acc["conv"] + acc["prox"]) / 2 >= threshold
    return valid / len(ok)


# --------------------------------------------------------------------------
# property preservation


def pearson_or_none(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson r, or None when either series has no variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise EvalError("series length mismatch")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx ** 2).sum()), np.sqrt((dy ** 2).sum())
    if sx <= 1e-12 * max(1.0, np.abs(x).max()) or sy <= 1e-12 * max(1.0, np.abs(y).max()):
        return None
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def property_preservation(result: RunResult) -> dict[str, dict[str, float | None]]:
    """Pearson r between predicted and true per-window metric series, per modality."""
    ok = _ok(result)
    if len(ok) < 3:
        raise EvalError(f"property preservation needs >= 3 windows, got {len(ok)}")
    out = {}
    for m in MODALITIES:
        pred = [network_metrics(r.predicted_binary[m], DIRECTED[m]) for r in ok]
        true = [network_metrics(binarize(r.truth)[m], DIRECTED[m]) for r in ok]
        metrics = PROPERTY_METRICS if DIRECTED[m] else ("density", "clustering")
        out[m] = {k: pearson_or_none([getattr(p, k) for p in pred], [getattr(t, k) for t in true]) for k in metrics}
    return out


# --------------------------------------------------------------------------
# degradation


@dataclass
class DegradationReport:
    depths: list[int]
    per_depth: dict[str, list[float]]
    half_life: dict[str, float]
    relative_degradation: dict[str, float | None]
    spearman: dict[str, float | None]
    simulation_mean: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "per_depth": {m: list(v) for m, v in self.per_depth.items()},
            "half_life": {m: (None if math.isinf(v) else v) for m, v in self.half_life.items()},
            "half_life_infinite": {m: math.isinf(v) for m, v in self.half_life.items()},
            "relative_degradation": dict(self.relative_degradation),
            "spearman": dict(self.spearman),
            "simulation_mean": dict(self.simulation_mean),
        }


def similarity_by_depth(result: RunResult) -> tuple[list[int], dict[str, list[float]]]:
    """Mean similarity per cascade depth, pooled over sessions."""
    ok = [r for r in _ok(result) if r.cascade_depth is not None]
    if not ok:
        raise EvalError("run has no cascade records")
    depths = sorted({r.cascade_depth for r in ok})
    per = {m: [] for m in MODALITIES}
    for d in depths:
        sims = [window_similarity(r.predicted, r.truth) for r in ok if r.cascade_depth == d]
        for m in MODALITIES:
            per[m].append(float(np.mean([s[m] for s in sims])))
    return depths, per


def half_life(series: Sequence[float], depths: Sequence[int]) -> float:
    """Smallest depth after the first whose value is at most half the depth-1 value."""
    if not series:
        return math.inf
    base = series[0]
    for d, v in zip(depths[1:], series[1:]):
        if v <= 0.5 * base:
            return float(d)
    return math.inf


def degradation_report(intervention: SimilarityReport | dict[str, float], simulation: RunResult) -> DegradationReport:
    depths, per = similarity_by_depth(simulation)
    if len(depths) < 2:
        raise EvalError("degradation needs a cascade of >= 2 depths")
    interv = intervention.per_modality if isinstance(intervention, SimilarityReport) else dict(intervention)
    sim_mean = similarity_report(simulation).per_modality
    rel, rho, hl = {}, {}, {}
    for m in MODALITIES:
        hl[m] = half_life(per[m], depths)
        rel[m] = (sim_mean[m] - interv[m]) / interv[m] if interv.get(m) else None
        if np.ptp(per[m]) == 0:
            rho[m] = None
        else:
            rho[m] = float(spearmanr(depths, per[m]).statistic)
    return DegradationReport(depths, per, hl, rel, rho, sim_mean)


# --------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    name: str
    mode: str
    similarity: SimilarityReport
    elementwise: dict[str, ConfusionMetrics]
    valid_window_rate: float
    property_preservation: dict[str, dict[str, float | None]] | None
    degradation: DegradationReport | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "similarity": self.similarity.to_dict(),
            "elementwise": {m: c.to_dict() for m, c in self.elementwise.items()},
            "valid_window_rate": self.valid_window_rate,
            "property_preservation": self.property_preservation,
            "degradation": self.degradation.to_dict() if self.degradation else None,
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _metadata(result: RunResult) -> dict:
    levels = {}
    for r in result.ok_records:
        top = max(r.fallback_levels.values(), default=0)
        levels[str(top)] = levels.get(str(top), 0) + 1
    return {
        "n_records": len(result.records),
        "n_failed": sum(r.failed for r in result.records),
        "gap_seconds": sum(r.gap_count for r in result.records),
        "windows_with_gaps": sum(r.gap_count > 0 for r in result.records),
        "fallback_windows_by_level": dict(sorted(levels.items())),
        "mean_coverage": float(np.mean([r.coverage for r in result.ok_records])) if result.ok_records else 0.0,
        "terminations": dict(result.terminations),
    }


def evaluate(result: RunResult, name: str | None = None, intervention: SimilarityReport | None = None) -> EvalReport:
    """All metrics for a run; degradation is added for simulation runs when a reference is given."""
    sim = similarity_report(result)
    try:
        props = property_preservation(result)
    except EvalError:
        props = None
    degr = None
    if result.mode == "simulation" and intervention is not None:
        degr = degradation_report(intervention, result)
    meta = _metadata(result)
    meta["both_empty_windows"] = dict(sim.both_empty)
    return EvalReport(
        name=name or result.predictor,
        mode=result.mode,
        similarity=sim,
        elementwise=run_elementwise(result),
        valid_window_rate=valid_window_rate(result),
        property_preservation=props,
        degradation=degr,
        metadata=meta,
    )


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.3f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def comparison_table(reports: Sequence[EvalReport]) -> str:
    """Side-by-side similarity table, one row per run."""
    header = ["Method", "Mode", "Conv", "Prox", "Attn", "Avg(C+P)", "Avg(all)", "Valid", "N"]
    rows = []
    for r in reports:
        s = r.similarity
        rows.append([r.name, r.mode, _fmt(s.per_modality["conv"]), _fmt(s.per_modality["prox"]),
                     _fmt(s.per_modality["attn"]), _fmt(s.average_conv_prox), _fmt(s.average_all),
                     _fmt(r.valid_window_rate), str(s.n_windows)])
    return _table(header, rows)


def to_text(report: EvalReport) -> str:
    parts = [f"== {report.name} ({report.mode}) ==", comparison_table([report]), ""]
    header = ["Modality", "Precision", "Recall", "F1", "BalAcc", "MCC", "TP", "FP", "TN", "FN"]
    rows = [[m, _fmt(c.precision), _fmt(c.recall), _fmt(c.f1), _fmt(c.balanced_accuracy), _fmt(c.mcc),
             str(c.tp), str(c.fp), str(c.tn), str(c.fn)] for m, c in report.elementwise.items()]
    parts += [_table(header, rows), ""]
    if report.property_preservation:
        rows = [[m, *(_fmt(v.get(k)) if k in v else "-" for k in PROPERTY_METRICS)]
                for m, v in report.property_preservation.items()]
        parts += [_table(["Modality", "r(density)", "r(reciprocity)", "r(clustering)"], rows), ""]
    if report.degradation:
        d = report.degradation
        rows = [[m, _fmt(d.simulation_mean[m]), _fmt(d.relative_degradation[m]), _fmt(d.half_life[m]),
                 _fmt(d.spearman[m])] for m in MODALITIES]
        parts += [_table(["Modality", "SimMean", "RelDegr", "HalfLife", "Spearman"], rows), ""]
    meta = report.metadata
    parts.append(f"failed windows: {meta.get('n_failed', 0)}, gap seconds: {meta.get('gap_seconds', 0)}, "
                 f"both-empty windows: {meta.get('both_empty_windows', {})}, "
                 f"fallback by level: {meta.get('fallback_windows_by_level', {})}")
    return "\n".join(parts)


def write_degradation_csv(report: DegradationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", *MODALITIES])
        for k, d in enumerate(report.depths):
            w.writerow([d, *(f"{report.per_depth[m][k]:.6f}" for m in MODALITIES)])
