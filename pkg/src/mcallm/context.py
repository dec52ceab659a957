"""Individual, group and temporal context for a prediction window.

Profiles are fitted once over full sessions and never change between windows.
Phases come either from supplied labels or from k-means over per-window
feature vectors.  ``build_context`` assembles everything the prompt needs for
one target window from the sociograms observed before it, whether those came
from sensors (oracle) or from earlier predictions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.cluster import KMeans
from sklearn.exceptions import NotFittedError
from sklearn.mixture import GaussianMixture

from mcallm.ingest import SessionData
from mcallm.sociogram import (
    MODALITIES,
    FusedMetrics,
    NetworkMetrics,
    SociogramTriple,
    fuse_metrics,
    network_metrics,
    DIRECTED,
)
from mcallm.validation import ValidationError

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
PAIR_HISTORY_LEN = 5
EVENT_TIMELINE_LEN = 10
TREND_LAG = 5

DOMAINS = ("speaking", "gaze", "locomotion")
DOMAIN_FEATURES = {
    "speaking": ("utterances",),
    "gaze": ("gaze_events", "target_entropy"),
    "locomotion": ("speed", "path_entropy"),
}
DESCRIPTORS = {
    "speaking": ("Infrequent Talker", "Moderate Talker", "Frequent Talker"),
    "gaze": ("Low Gaze Activity", "Medium Gaze Activity", "High Gaze Activity"),
    "locomotion": ("Static Mover", "Moderate Mover", "Dynamic Mover"),
}
PHASE_NAMES = ("Quiet Exploration", "Steady Coordination", "Animated Collaboration")
WINDOW_FEATURES = ("speaking_entropy", "conv_density", "prox_density", "attn_density", "joint_attention")


def _entropy(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def _onsets(active: np.ndarray) -> int:
    """Number of False->True transitions, counting an active first step."""
    a = np.asarray(active, dtype=bool)
    if a.size == 0:
        return 0
    return int(a[0]) + int(np.logical_and(a[1:], ~a[:-1]).sum())


# --------------------------------------------------------------------------
# participant feature tables


@dataclass
class FeatureTable:
    keys: list[tuple[str, str]]  # (session_id, participant_id)
    values: dict[str, np.ndarray]  # domain -> (rows, n_features)

    def __len__(self) -> int:
        return len(self.keys)


def participant_features(session: SessionData) -> dict[str, dict[str, np.ndarray]]:
    """Full-session speaking, gaze and locomotion statistics per participant."""
    n = len(session.roster)
    if session.speaking is not None and not np.all(np.isnan(session.speaking)):
        speaking = np.nan_to_num(session.speaking, nan=0.0) > 0
    else:
        speaking = session.conv.any(axis=2)
    out = {}
    for k, pid in enumerate(session.roster):
        utter = _onsets(speaking[:, k])
        if session.gaze is not None and any(g is not None for g in session.gaze[:, k]):
            seq = session.gaze[:, k]
            events, prev, counts = 0, None, {}
            for g in seq:
                if g is not None and g != prev:
                    events += 1
                if g is not None:
                    counts[g] = counts.get(g, 0) + 1
                prev = g
            gaze = (events, _entropy(list(counts.values())))
        else:
            involved = session.attn[:, k, :].any(axis=1)
            gaze = (_onsets(involved), 0.0)
        speed, path_h = 0.0, 0.0
        if session.positions is not None:
            pos = session.positions[:, k]
            step = np.diff(pos, axis=0)
            ok = np.all(np.isfinite(step), axis=1)
            if ok.any():
                dist = np.linalg.norm(step[ok], axis=1)
                speed = float(dist.mean())
                moving = step[ok][dist > 1e-9]
                if len(moving):
                    angles = np.arctan2(moving[:, 1], moving[:, 0])
                    hist, _ = np.histogram(angles, bins=8, range=(-np.pi, np.pi))
                    path_h = _entropy(hist)
        out[pid] = {
            "speaking": np.array([utter], dtype=float),
            "gaze": np.array(gaze, dtype=float),
            "locomotion": np.array([speed, path_h], dtype=float),
        }
    return out


def feature_table(sessions: Sequence[SessionData]) -> FeatureTable:
    keys, rows = [], {d: [] for d in DOMAINS}
    for s in sessions:
        feats = participant_features(s)
        for pid in s.roster:
            keys.append((s.session_id, pid))
            for d in DOMAINS:
                rows[d].append(feats[pid][d])
    values = {d: np.asarray(rows[d], dtype=float).reshape(len(keys), len(DOMAIN_FEATURES[d])) for d in DOMAINS}
    return FeatureTable(keys, values)


# --------------------------------------------------------------------------
# behavioral profiles


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_id: int
    descriptor: str
    rate: float | None = None

    def to_dict(self) -> dict:
        return {"id": self.cluster_id, "descriptor": self.descriptor, "rate": self.rate}


@dataclass(frozen=True)
class BehavioralProfile:
    participant_id: str
    speaking: ClusterAssignment
    gaze: ClusterAssignment
    locomotion: ClusterAssignment

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "speaking": self.speaking.to_dict(),
            "gaze": self.gaze.to_dict(),
            "locomotion": self.locomotion.to_dict(),
        }


def _descriptor(domain: str, rank: int, k: int) -> str:
    names = DESCRIPTORS[domain]
    if k == len(names):
        return names[rank]
    # spread the available names over k ranks
    pos = round(rank * (len(names) - 1) / (k - 1)) if k > 1 else 1
    return names[int(pos)]


def _tertile_ranks(values: np.ndarray, k: int) -> np.ndarray:
    from scipy.stats import rankdata

    ranks = rankdata(values, method="average")
    n = len(values)
    tiers = np.floor(k * (ranks - 0.5) / n).astype(int)
    return np.clip(tiers, 0, k - 1)


class BehavioralProfiler(TransformerMixin, BaseEstimator):
    """Per-domain diagonal Gaussian mixtures over full-session participant features.

    Components are named by the rank of their mean on the domain's primary
    feature.  Domains with no usable variance (or fewer rows than components)
    fall back to rank-based tertiles and are listed in ``fallback_domains_``.
    """

    def __init__(self, n_components: int = 3, tol: float = 1e-4, max_iter: int = 200, random_state: int = 0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def _table(self, X) -> FeatureTable:
        if isinstance(X, FeatureTable):
            return X
        return feature_table(list(X))

    def fit(self, X, y=None):
        table = self._table(X)
        if len(table) == 0:
            raise ValidationError("no participant rows to fit profiles on")
        k = self.n_components
        self.models_ = {}
        self.fallback_domains_ = []
        for d in DOMAINS:
            x = table.values[d]
            keep = [c for c in range(x.shape[1]) if np.ptp(x[:, c]) > 0]
            distinct = len(np.unique(x[:, keep], axis=0)) if keep else 1
            if not keep or len(x) < k or distinct < k:
                logger.info("profiles: domain %s falls back to rank tertiles", d)
                self.fallback_domains_.append(d)
                self.models_[d] = {"kind": "tertile", "column": 0}
                continue
            gmm = GaussianMixture(
                n_components=k,
                covariance_type="diag",
                tol=self.tol,
                max_iter=self.max_iter,
                init_params="kmeans",
                random_state=self.random_state,
            ).fit(x[:, keep])
            # rank on the first feature that has variance (normally the primary one)
            order = np.argsort(gmm.means_[:, 0], kind="stable")
            rank = np.empty(k, dtype=int)
            rank[order] = np.arange(k)
            self.models_[d] = {
                "kind": "gmm",
                "columns": keep,
                "weights": gmm.weights_.tolist(),
                "means": gmm.means_.tolist(),
                "variances": gmm.covariances_.tolist(),
                "rank": rank.tolist(),
            }
        self.reference_ = {d: table.values[d][:, 0].tolist() for d in DOMAINS}
        return self

    def _assign(self, d: str, x: np.ndarray) -> list[tuple[int, int]]:
        """(cluster_id, rank) per row."""
        model = self.models_[d]
        k = self.n_components
        if model["kind"] == "tertile":
            ref = np.asarray(self.reference_[d])
            vals = x[:, model["column"]]
            out = []
            for v in vals:
                tiers = _tertile_ranks(np.append(ref, v), k)
                out.append((int(tiers[-1]), int(tiers[-1])))
            return out
        xs = x[:, model["columns"]]
        means = np.asarray(model["means"])
        var = np.asarray(model["variances"])
        logw = np.log(np.asarray(model["weights"]))
        ll = -0.5 * (((xs[:, None, :] - means[None]) ** 2) / var[None] + np.log(2 * np.pi * var)[None]).sum(axis=2)
        comp = np.argmax(ll + logw[None], axis=1)
        return [(int(c), int(model["rank"][c])) for c in comp]

    def predict(self, X) -> dict[str, np.ndarray]:
        if not hasattr(self, "models_"):
            raise NotFittedError("BehavioralProfiler is not fitted")
        table = self._table(X)
        return {d: np.array([c for c, _ in self._assign(d, table.values[d])]) for d in DOMAINS}

    def transform(self, X) -> dict[tuple[str, str], BehavioralProfile]:
        if not hasattr(self, "models_"):
            raise NotFittedError("BehavioralProfiler is not fitted")
        table = self._table(X)
        k = self.n_components
        assigned = {d: self._assign(d, table.values[d]) for d in DOMAINS}
        profiles = {}
        for row, (sid, pid) in enumerate(table.keys):
            parts = {}
            for d in DOMAINS:
                cid, rank = assigned[d][row]
                rate = None if d == "locomotion" else float(table.values[d][row, 0])
                parts[d] = ClusterAssignment(cid, _descriptor(d, rank, k), rate)
            profiles[(sid, pid)] = BehavioralProfile(pid, **parts)
        return profiles

    def to_dict(self) -> dict:
        return {
            "params": self.get_params(),
            "models": self.models_,
            "fallback_domains": self.fallback_domains_,
            "reference": self.reference_,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehavioralProfiler":
        est = cls(**d["params"])
        est.models_ = d["models"]
        est.fallback_domains_ = list(d["fallback_domains"])
        est.reference_ = d["reference"]
        return est


# --------------------------------------------------------------------------
# per-window features and phases


@lru_cache(maxsize=65536)
def _metrics_cached(key: bytes, n: int, directed: bool) -> NetworkMetrics:
    return network_metrics(np.frombuffer(key, dtype=float).reshape(n, n), directed)


def triple_metrics_cached(g: SociogramTriple) -> dict[str, NetworkMetrics]:
    out = {}
    for m in MODALITIES:
        a = np.ascontiguousarray(g[m], dtype=float)
        out[m] = _metrics_cached(a.tobytes(), a.shape[0], DIRECTED[m])
    return out


@dataclass(frozen=True)
class WindowContextFeatures:
    """Structural summary of one window, from observed or predicted sociograms."""

    window_index: int
    metrics: dict[str, NetworkMetrics]
    vector: tuple[float, ...]
    is_predicted: bool

    @property
    def speaking_entropy(self) -> float:
        return self.vector[0]

    @property
    def joint_attention(self) -> int:
        return int(self.vector[4])


def window_features(g: SociogramTriple) -> WindowContextFeatures:
    """Window feature vector: speaking entropy, three densities, joint-attention count.

    Speaking shares are the participants' outgoing conversation weight, so
    the same function applies to observed and predicted triples.
    """
    metrics = triple_metrics_cached(g)
    shares = np.asarray(g.conv).sum(axis=1)
    n = g.n
    iu = np.triu_indices(n, k=1)
    joint = int((np.asarray(g.attn)[iu] > 0).sum())
    vec = (
        _entropy(shares),
        metrics["conv"].density,
        metrics["prox"].density,
        metrics["attn"].density,
        float(joint),
    )
    return WindowContextFeatures(int(g.window_index), metrics, tuple(float(v) for v in vec), bool(g.is_predicted))


def pseudo_features_from_prediction(predicted: SociogramTriple) -> WindowContextFeatures:
    """Features of a predicted window, computed exactly as for an observed one."""
    return window_features(predicted.with_flags(is_predicted=True))


def _phase_label(rank: int, k: int) -> str:
    if k == len(PHASE_NAMES):
        return PHASE_NAMES[rank]
    if k == 1:
        return PHASE_NAMES[1]
    if k == 2:
        return PHASE_NAMES[0] if rank == 0 else PHASE_NAMES[2]
    return f"Phase {rank}"


class PhaseSegmenter(ClusterMixin, BaseEstimator):
    """k-means over standardized per-window feature vectors.

    Phase ids are ordered by centroid activity (sum of standardized
    coordinates), so id 0 is always the quietest phase.  Fewer distinct
    windows than ``n_phases`` reduces the effective number of phases.
    """

    def __init__(self, n_phases: int = 3, random_state: int = 0, n_init: int = 10):
        self.n_phases = n_phases
        self.random_state = random_state
        self.n_init = n_init

    def _scale(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or len(X) == 0:
            raise ValidationError("phase fitting needs a non-empty (windows, features) array")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        Z = self._scale(X)
        distinct = len(np.unique(np.round(Z, 12), axis=0))
        k = max(1, min(self.n_phases, distinct))
        km = KMeans(n_clusters=k, n_init=self.n_init, random_state=self.random_state).fit(Z)
        activity = km.cluster_centers_.sum(axis=1)
        order = np.argsort(activity, kind="stable")
        self.cluster_centers_ = km.cluster_centers_[order]
        self.n_phases_ = k
        self.phase_labels_ = [_phase_label(r, k) for r in range(k)]
        self.labels_ = self.predict(X)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("PhaseSegmenter is not fitted")
        Z = self._scale(np.atleast_2d(X))
        d = ((Z[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    def label_of(self, phase_id: int) -> str:
        return self.phase_labels_[phase_id]

    def to_dict(self) -> dict:
        return {
            "params": self.get_params(),
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "centers": self.cluster_centers_.tolist(),
            "labels": list(self.phase_labels_),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSegmenter":
        est = cls(**d["params"])
        est.mean_ = np.asarray(d["mean"])
        est.scale_ = np.asarray(d["scale"])
        est.cluster_centers_ = np.asarray(d["centers"])
        est.n_phases_ = len(est.cluster_centers_)
        est.phase_labels_ = list(d["labels"])
        return est


@dataclass(frozen=True)
class PhaseAnnotation:
    phase_id: int
    phase_label: str
    stability: int
    speaking_entropy: float
    joint_attention: int

    def to_dict(self) -> dict:
        return {
            "phase_id": self.phase_id,
            "phase_label": self.phase_label,
            "stability": self.stability,
            "phase_metrics": {"speaking_entropy": self.speaking_entropy, "joint_attention": self.joint_attention},
        }


def annotate_phases(phase_ids: Sequence[int], labels: Sequence[str] | Mapping[int, str], features: Sequence[WindowContextFeatures]) -> list[PhaseAnnotation]:
    """Stability run lengths and run-aggregated phase metrics per window."""
    out = []
    run = 0
    for w, pid in enumerate(phase_ids):
        run = run + 1 if w > 0 and phase_ids[w - 1] == pid else 1
        members = features[w - run + 1:w + 1]
        label = labels[pid] if not isinstance(labels, Mapping) else labels.get(w, f"Phase {pid}")
        out.append(PhaseAnnotation(
            phase_id=int(pid),
            phase_label=str(label),
            stability=run,
            speaking_entropy=float(np.mean([f.speaking_entropy for f in members])),
            joint_attention=int(sum(f.joint_attention for f in members)),
        ))
    return out


def fit_phases(windows: Sequence[SociogramTriple], n_phases: int = 3, random_state: int = 0,
               external: Mapping[int, tuple[int, str]] | None = None) -> tuple[list[PhaseAnnotation], PhaseSegmenter | None]:
    """Phase annotation for every window; supplied labels bypass fitting."""
    if not windows:
        raise ValidationError("no windows to segment into phases")
    feats = [window_features(g) for g in windows]
    if external is not None:
        ids = [int(external[g.window_index][0]) for g in windows]
        names = {w: external[g.window_index][1] for w, g in enumerate(windows)}
        return annotate_phases(ids, names, feats), None
    seg = PhaseSegmenter(n_phases=n_phases, random_state=random_state).fit([f.vector for f in feats])
    return annotate_phases(list(seg.labels_), seg.phase_labels_, feats), seg


def load_phase_sidecar(path) -> dict[int, tuple[int, str]]:
    """Read ``{"window_index", "phase_id", "label"}`` JSONL into a lookup."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out[int(rec["window_index"])] = (int(rec["phase_id"]), str(rec.get("label", f"Phase {rec['phase_id']}")))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValidationError(f"phase sidecar line {line_no}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# context bundle


@dataclass(frozen=True)
class EventSummary:
    window_index: int
    phase_id: int
    densities: dict[str, float]
    joint_attention: int
    gained: dict[str, tuple[str, ...]]
    lost: dict[str, tuple[str, ...]]
    is_predicted: bool

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "phase_id": self.phase_id,
            "densities": dict(self.densities),
            "joint_attention": self.joint_attention,
            "gained": {m: list(v) for m, v in self.gained.items()},
            "lost": {m: list(v) for m, v in self.lost.items()},
            "is_predicted": self.is_predicted,
        }


@dataclass(frozen=True)
class TemporalContext:
    phase: PhaseAnnotation
    density_trend: tuple[float, float]
    reciprocity_trend: tuple[float, float]
    trend_span: int
    short: bool


@dataclass(frozen=True)
class ContextBundle:
    session_id: str
    window_index: int  # the window being predicted
    roster: tuple[str, ...]
    indiv: tuple[BehavioralProfile, ...]
    group: dict[str, NetworkMetrics]
    fused: FusedMetrics
    temporal: TemporalContext
    pair_history: tuple[SociogramTriple, ...]
    event_timeline: tuple[EventSummary, ...]
    source: str  # "oracle" | "predicted"
    phase_features: tuple[float, ...] = ()

    @property
    def last_window(self) -> SociogramTriple:
        return self.pair_history[-1]


def _edge_names(a: np.ndarray, roster, directed: bool) -> set[str]:
    n = len(roster)
    out = set()
    for i in range(n):
        for j in range(n):
            if i == j or a[i, j] <= 0:
                continue
            if directed:
                out.add(f"{roster[i]}->{roster[j]}")
            elif i < j:
                out.add(f"{roster[i]}-{roster[j]}")
    return out


def _event_summary(g: SociogramTriple, prev: SociogramTriple | None, phase_id: int, feats: WindowContextFeatures) -> EventSummary:
    gained, lost = {}, {}
    for m in MODALITIES:
        now = _edge_names(g[m], g.roster, DIRECTED[m])
        before = _edge_names(prev[m], prev.roster, DIRECTED[m]) if prev is not None else now
        gained[m] = tuple(sorted(now - before))
        lost[m] = tuple(sorted(before - now))
    return EventSummary(
        window_index=int(g.window_index),
        phase_id=int(phase_id),
        densities={m: feats.metrics[m].density for m in MODALITIES},
        joint_attention=feats.joint_attention,
        gained=gained,
        lost=lost,
        is_predicted=bool(g.is_predicted),
    )


class PhaseSource:
    """Maps a window's features to a (phase_id, label); fitted model or supplied labels."""

    def __init__(self, segmenter: PhaseSegmenter | None = None, external: Mapping[int, tuple[int, str]] | None = None):
        if segmenter is None and external is None:
            raise ValidationError("PhaseSource needs a fitted segmenter or external labels")
        self.segmenter = segmenter
        self.external = external

    def phase_of(self, feats: WindowContextFeatures) -> tuple[int, str]:
        if self.external is not None:
            return self.external[feats.window_index]
        pid = int(self.segmenter.predict([feats.vector])[0])
        return pid, self.segmenter.label_of(pid)


def build_context(window_index: int, history: Sequence[SociogramTriple], profiles: Sequence[BehavioralProfile],
                  phases: PhaseSource, session_id: str = "") -> ContextBundle:
    """Context for predicting ``window_index`` from windows ``0 .. window_index-1``.

    ``history`` is indexed by window and may mix observed and predicted
    triples; entries at or after ``window_index`` are ignored.
    """
    if window_index < 1:
        raise ValidationError("window_index must be >= 1 (at least one history window)")
    if len(history) < window_index:
        raise ValidationError(f"history has {len(history)} windows, need {window_index}")
    past = list(history[:window_index])
    feats = [window_features(g) for g in past]
    ids, labels = [], []
    for f in feats:
        pid, label = phases.phase_of(f)
        ids.append(pid)
        labels.append(label)
    annotations = annotate_phases(ids, dict(enumerate(labels)), feats)

    metric_hist = [f.metrics for f in feats]
    fused_now = fuse_metrics(metric_hist)
    current = window_index - 1
    then = max(0, current - TREND_LAG)
    fused_then = fuse_metrics(metric_hist[:then + 1])
    temporal = TemporalContext(
        phase=annotations[current],
        density_trend=(fused_then.density, fused_now.density),
        reciprocity_trend=(fused_then.reciprocity, fused_now.reciprocity),
        trend_span=current - then,
        short=(current - then) < TREND_LAG,
    )
    start_ev = max(0, window_index - EVENT_TIMELINE_LEN)
    events = tuple(
        _event_summary(past[w], past[w - 1] if w > 0 else None, ids[w], feats[w])
        for w in range(start_ev, window_index)
    )
    pair_history = tuple(past[max(0, window_index - PAIR_HISTORY_LEN):])
    source = "predicted" if any(g.is_predicted for g in past) else "oracle"
    roster = past[-1].roster
    order = {p: k for k, p in enumerate(roster)}
    indiv = tuple(sorted(profiles, key=lambda p: order.get(p.participant_id, len(order))))
    return ContextBundle(
        session_id=session_id,
        window_index=window_index,
        roster=tuple(roster),
        indiv=indiv,
        group=feats[-1].metrics,
        fused=fused_now,
        temporal=temporal,
        pair_history=pair_history,
        event_timeline=events,
        source=source,
        phase_features=feats[-1].vector,
    )


def save_models(path, profiler: BehavioralProfiler | None, segmenter: PhaseSegmenter | None) -> None:
    payload = {
        "version": ARTIFACT_VERSION,
        "profiler": profiler.to_dict() if profiler is not None else None,
        "phases": segmenter.to_dict() if segmenter is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_models(path) -> tuple[BehavioralProfiler | None, PhaseSegmenter | None]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != ARTIFACT_VERSION:
        raise ValidationError(f"model artifact version {payload.get('version')} != {ARTIFACT_VERSION}")
    prof = BehavioralProfiler.from_dict(payload["profiler"]) if payload.get("profiler") else None
    seg = PhaseSegmenter.from_dict(payload["phases"]) if payload.get("phases") else None
    return prof, seg


@dataclass
class PreparedSession:
    """A session's windows, sociograms, profiles and phase source, ready for prediction."""

    session_id: str
    roster: tuple[str, ...]
    windows: list  # WindowSeries
    triples: list[SociogramTriple]
    profiles: tuple[BehavioralProfile, ...]
    phases: PhaseSource

    @property
    def n_windows(self) -> int:
        return len(self.triples)

    def context(self, window_index: int, history: Sequence[SociogramTriple] | None = None) -> ContextBundle:
        return build_context(window_index, self.triples if history is None else history,
                             self.profiles, self.phases, self.session_id)


def prepare_session(session: SessionData, profiler: BehavioralProfiler, segmenter: PhaseSegmenter | None = None,
                    external_phases: Mapping[int, tuple[int, str]] | None = None,
                    window_len: int = 32, stride: int = 16) -> PreparedSession:
    from mcallm.ingest import segment_windows
    from mcallm.sociogram import build_sociograms

    windows = segment_windows(session, window_len, stride)
    triples = [build_sociograms(w, window_len) for w in windows]
    profiles = profiler.transform([session])
    ordered = tuple(profiles[(session.session_id, p)] for p in session.roster)
    return PreparedSession(session.session_id, tuple(session.roster), windows, triples, ordered,
                           PhaseSource(segmenter, external_phases))


def fit_context_models(sessions: Sequence[SessionData], n_clusters: int = 3, n_phases: int = 3, seed: int = 0,
                       window_len: int = 32, stride: int = 16) -> tuple[BehavioralProfiler, PhaseSegmenter]:
    """Fit profiles over participants and phases over every window of ``sessions``."""
    from mcallm.ingest import segment_windows
    from mcallm.sociogram import build_sociograms

    profiler = BehavioralProfiler(n_components=n_clusters, random_state=seed).fit(sessions)
    vectors = [window_features(build_sociograms(w, window_len)).vector
               for s in sessions for w in segment_windows(s, window_len, stride)]
    segmenter = PhaseSegmenter(n_phases=n_phases, random_state=seed).fit(vectors)
    return profiler, segmenter
