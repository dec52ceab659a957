"""Intervention and simulation runs, baseline predictors, run directories.

Every predictor maps a ``ContextBundle`` to a ``Prediction``.  Intervention
runs predict each window from observed history; simulation runs feed each
predicted (weighted) triple back into the history used for the next window.
Request indices are assigned from the run layout rather than call order, so
results do not depend on thread scheduling and transcripts can be replayed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from mcallm.context import ContextBundle, PreparedSession
from mcallm.llmio import (
    Backend,
    BackendError,
    Completion,
    ScriptedBackend,
    decode_cells,
    encode_cells,
    grid_from_indicators,
    grid_from_triple,
    grid_to_sociograms,
    parse_response,
)
from mcallm.promptgen import Example, render_prompt, select_example
from mcallm.sociogram import DEFAULT_BINARY_THRESHOLD, MODALITIES, SociogramTriple, binarize
from mcallm.validation import ValidationError, derived_rng, unordered_pairs

logger = logging.getLogger(__name__)

MODES = ("intervention", "simulation")
PARADIGMS = ("zero_shot", "few_shot", "canned")
RUN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Prediction:
    weighted: SociogramTriple
    binary: SociogramTriple
    coverage: float = 1.0
    fallback_levels: dict[str, int] = field(default_factory=dict)
    response_text: str | None = None
    prompt_text: str | None = None
    request_id: str | None = None
    latency: tuple[float, float] | None = None
    example: str | None = None
    note: str | None = None
    cells: np.ndarray | None = None  # per-second grid; constant rows when absent


class Predictor(Protocol):
    name: str

    def predict(self, bundle: ContextBundle, request_index: int) -> Prediction: ...


def _as_prediction(binary: SociogramTriple, window_index: int, note: str | None = None) -> Prediction:
    b = binary.with_flags(window_index=window_index, is_predicted=True)
    return Prediction(weighted=b, binary=b, note=note)


# --------------------------------------------------------------------------
# baselines


class PersistenceBaseline(BaseEstimator):
    """Repeats the last observed window, binarized."""

    name = "persistence"

    def __init__(self, threshold: float = DEFAULT_BINARY_THRESHOLD):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def predict_next(self, history: Sequence[SociogramTriple], window_index: int = 0, session_id: str = "") -> SociogramTriple:
        if not history:
            raise ValidationError("persistence needs at least one history window")
        return binarize(history[-1], self.threshold).with_flags(window_index=window_index, is_predicted=True)

    def predict(self, bundle: ContextBundle, request_index: int = 0) -> Prediction:
        return _as_prediction(self.predict_next(bundle.pair_history, bundle.window_index), bundle.window_index)


class SmoothingBaseline(BaseEstimator):
    """Edge present when it was active in at least half of the last ``n_windows`` windows."""

    def __init__(self, n_windows: int = 3, threshold: float = 0.5, edge_threshold: float = DEFAULT_BINARY_THRESHOLD):
        self.n_windows = n_windows
        self.threshold = threshold
        self.edge_threshold = edge_threshold

    @property
    def name(self) -> str:
        return f"smoothing_{self.n_windows}"

    def fit(self, X=None, y=None):
        return self

    def predict_next(self, history: Sequence[SociogramTriple], window_index: int = 0, session_id: str = "") -> tuple[SociogramTriple, bool]:
        """(prediction, short) where ``short`` flags fewer than ``n_windows`` history windows."""
        if not history:
            raise ValidationError("smoothing needs at least one history window")
        recent = [binarize(g, self.edge_threshold) for g in history[-self.n_windows:]]
        mean = {m: np.mean([np.asarray(g[m]) for g in recent], axis=0) for m in MODALITIES}
        out = SociogramTriple(
            window_index=window_index, is_predicted=True, roster=history[-1].roster,
            **{m: (mean[m] >= self.threshold).astype(float) for m in MODALITIES},
        )
        return out, len(recent) < self.n_windows

    def predict(self, bundle: ContextBundle, request_index: int = 0) -> Prediction:
        # pair history holds at most five windows, enough for n_windows <= 5
        g, short = self.predict_next(bundle.pair_history, bundle.window_index)
        return _as_prediction(g, bundle.window_index, "short_history" if short else None)


def empirical_edge_rates(triples: Sequence[SociogramTriple], threshold: float = DEFAULT_BINARY_THRESHOLD) -> dict[str, float]:
    """Fraction of active edges per modality (ordered pairs for conv, unordered otherwise)."""
    if not triples:
        raise ValidationError("no windows to estimate edge rates from")
    n = triples[0].n
    off = ~np.eye(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    rates = {}
    for m in MODALITIES:
        mask = off if m == "conv" else upper
        rates[m] = float(np.mean([np.asarray(binarize(g, threshold)[m])[mask].mean() for g in triples]))
    return rates


class StratifiedRandomBaseline(BaseEstimator):
    """Independent edge draws at each modality's empirical rate.

    Draws for a window come from a generator keyed by (seed, session, window),
    so predictions ignore history and are order independent.
    """

    name = "stratified_random"

    def __init__(self, rates: dict[str, float] | None = None, seed: int = 0):
        self.rates = rates
        self.seed = seed

    def fit(self, X, y=None):
        """Estimate rates from prepared sessions or a flat list of triples."""
        triples = []
        for item in X:
            triples.extend(item.triples if isinstance(item, PreparedSession) else [item])
        self.rates_ = empirical_edge_rates(triples)
        return self

    def _rates(self) -> dict[str, float]:
        if self.rates is not None:
            return self.rates
        if not hasattr(self, "rates_"):
            raise ValidationError("stratified_random needs rates or a fit() call")
        return self.rates_

    def predict_next(self, history=None, window_index: int = 0, session_id: str = "",
                     roster: tuple[str, ...] = ("A", "B", "C", "D")) -> SociogramTriple:
        rates = self._rates()
        rng = derived_rng(self.seed, session_id, window_index)
        n = len(roster)
        conv = (rng.random((n, n)) < rates["conv"]).astype(float)
        np.fill_diagonal(conv, 0.0)
        mats = {"conv": conv}
        pairs = unordered_pairs(n)
        for m in ("prox", "attn"):
            draws = rng.random(len(pairs)) < rates[m]
            a = np.zeros((n, n))
            for (i, j), d in zip(pairs, draws):
                a[i, j] = a[j, i] = float(d)
            mats[m] = a
        return SociogramTriple(window_index=window_index, is_predicted=True, roster=tuple(roster), **mats)

    def predict(self, bundle: ContextBundle, request_index: int = 0) -> Prediction:
        g = self.predict_next(None, bundle.window_index, bundle.session_id, bundle.roster)
        return _as_prediction(g, bundle.window_index)


def make_baseline(kind: str, seed: int = 0):
    if kind == "persistence":
        return PersistenceBaseline()
    if kind.startswith("smoothing"):
        n = int(kind.split("_", 1)[1]) if "_" in kind else 3
        if n not in (3, 5):
            raise ValidationError(f"smoothing window must be 3 or 5, got {n}")
        return SmoothingBaseline(n_windows=n)
    if kind in ("stratified", "stratified_random"):
        return StratifiedRandomBaseline(seed=seed)
    raise ValidationError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------------
# language-model predictor


class LLMPredictor(BaseEstimator):
    """Prompt a completion backend and parse its answer.

    ``paradigm`` is ``zero_shot``, ``few_shot`` (one demonstration chosen by
    ``strategy`` from ``pool``) or ``canned`` (the bare fine-tuning prompt,
    for an endpoint that was trained on exported SFT records).
    """

    def __init__(self, backend: Backend, paradigm: str = "zero_shot", strategy: str = "random",
                 pool: Sequence[Example] | None = None, template_set: str = "default", level: str = "full",
                 seed: int = 0, fixed_example: bool = False):
        self.backend = backend
        self.paradigm = paradigm
        self.strategy = strategy
        self.pool = pool
        self.template_set = template_set
        self.level = level
        self.seed = seed
        self.fixed_example = fixed_example

    @property
    def name(self) -> str:
        tag = f"{self.paradigm}:{self.strategy}" if self.paradigm == "few_shot" else self.paradigm
        return f"llm[{getattr(self.backend, 'name', 'backend')}|{tag}]"

    def _example(self, bundle: ContextBundle) -> Example | None:
        if self.paradigm != "few_shot":
            return None
        if not self.pool:
            raise ValidationError("few_shot paradigm needs a non-empty example pool")
        # one example per session when fixed, otherwise re-selected per window
        key = 0 if self.fixed_example else bundle.window_index
        rng = derived_rng(self.seed, bundle.session_id, key)
        if self.fixed_example:
            anchor = bundle  # selection still uses the first query's features
            cache = self.__dict__.setdefault("_fixed", {})
            if bundle.session_id not in cache:
                cache[bundle.session_id] = select_example(self.strategy, self.pool, anchor, rng)
            return cache[bundle.session_id]
        return select_example(self.strategy, self.pool, bundle, rng)

    def predict(self, bundle: ContextBundle, request_index: int = 0) -> Prediction:
        if self.paradigm not in PARADIGMS:
            raise ValidationError(f"unknown paradigm {self.paradigm!r}")
        example = self._example(bundle)
        prompt = render_prompt(bundle, example, self.template_set, self.level)
        completion: Completion = self.backend.complete(prompt, bundle, request_index)
        grid = parse_response(completion.text, bundle.roster, fallback=bundle.last_window)
        weighted, binary = grid_to_sociograms(grid, bundle.window_index)
        return Prediction(
            weighted=weighted.with_flags(is_predicted=True),
            binary=binary.with_flags(is_predicted=True),
            coverage=grid.coverage,
            fallback_levels=dict(grid.fallback_level),
            response_text=completion.text,
            prompt_text=prompt.text,
            request_id=completion.request_id,
            latency=(completion.latency.ttfb_s, completion.latency.total_s),
            example=f"{example.session_id}:{example.window_index}" if example is not None else None,
            cells=grid.cells,
        )


# --------------------------------------------------------------------------
# runs


@dataclass
class WindowRecord:
    session_id: str
    window_index: int
    request_index: int
    predicted: SociogramTriple | None  # weighted; binary for baselines
    predicted_binary: SociogramTriple | None
    truth: SociogramTriple  # weighted ground truth
    source: str
    cascade_depth: int | None = None
    coverage: float = 0.0
    fallback_levels: dict[str, int] = field(default_factory=dict)
    failed: bool = False
    error: str | None = None
    request_id: str | None = None
    example: str | None = None
    gap_count: int = 0
    note: str | None = None
    predicted_cells: np.ndarray | None = None  # (n, n, horizon, 3) per-second grid
    truth_cells: np.ndarray | None = None

    @property
    def truth_binary(self) -> SociogramTriple:
        return binarize(self.truth)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "window_index": self.window_index,
            "request_index": self.request_index,
            "predicted": self.predicted.to_dict() if self.predicted is not None else None,
            "predicted_binary": self.predicted_binary.to_dict() if self.predicted_binary is not None else None,
            "truth": self.truth.to_dict(),
            "source": self.source,
            "cascade_depth": self.cascade_depth,
            "coverage": self.coverage,
            "fallback_levels": dict(sorted(self.fallback_levels.items())),
            "failed": self.failed,
            "error": self.error,
            "request_id": self.request_id,
            "example": self.example,
            "gap_count": self.gap_count,
            "note": self.note,
            "predicted_cells": encode_cells(self.predicted_cells) if self.predicted_cells is not None else None,
            "truth_cells": encode_cells(self.truth_cells) if self.truth_cells is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowRecord":
        tri = lambda x: SociogramTriple.from_dict(x) if x is not None else None  # noqa: E731
        n = len(d["truth"]["roster"])
        cells = lambda x: decode_cells(x, n) if x is not None else None  # noqa: E731
        return cls(
            session_id=d["session_id"], window_index=d["window_index"], request_index=d["request_index"],
            predicted=tri(d["predicted"]), predicted_binary=tri(d["predicted_binary"]), truth=tri(d["truth"]),
            source=d["source"], cascade_depth=d["cascade_depth"], coverage=d["coverage"],
            fallback_levels=d["fallback_levels"], failed=d["failed"], error=d["error"],
            request_id=d["request_id"], example=d["example"], gap_count=d["gap_count"], note=d["note"],
            predicted_cells=cells(d.get("predicted_cells")), truth_cells=cells(d.get("truth_cells")),
        )


@dataclass
class Transcript:
    request_index: int
    request_id: str | None
    session_id: str
    window_index: int
    prompt: str | None
    response_text: str | None
    latency: tuple[float, float] | None = None

    def to_dict(self, include_latency: bool = False) -> dict:
        d = {
            "request_index": self.request_index,
            "request_id": self.request_id,
            "session_id": self.session_id,
            "window_index": self.window_index,
            "prompt_sha256": hashlib.sha256(self.prompt.encode("utf-8")).hexdigest() if self.prompt else None,
            "prompt": self.prompt,
            "response_text": self.response_text,
        }
        if include_latency:
            d["latency"] = {"ttfb_s": self.latency[0], "total_s": self.latency[1]} if self.latency else None
        return d


@dataclass
class RunResult:
    mode: str
    predictor: str
    records: list[WindowRecord] = field(default_factory=list)
    transcripts: list[Transcript] = field(default_factory=list)
    handoff: int | None = None
    horizon: int | None = None
    terminations: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def ok_records(self) -> list[WindowRecord]:
        return [r for r in self.records if not r.failed]

    def sessions(self) -> list[str]:
        return list(dict.fromkeys(r.session_id for r in self.records))

    def extend(self, other: "RunResult") -> None:
        self.records.extend(other.records)
        self.transcripts.extend(other.transcripts)
        self.terminations.update(other.terminations)

    def records_equal(self, other: "RunResult") -> bool:
        return [r.to_dict() for r in self.records] == [r.to_dict() for r in other.records]

    _PREDICTION_FIELDS = ("session_id", "window_index", "predicted", "predicted_binary", "truth",
                          "source", "cascade_depth", "failed")

    def predictions_equal(self, other: "RunResult") -> bool:
        """Same predicted and true triples per window, ignoring request provenance."""
        def key(result):
            return [{k: r.to_dict()[k] for k in self._PREDICTION_FIELDS} for r in result.records]
        return key(self) == key(other)


def _window_gap_count(session: PreparedSession, t: int) -> int:
    w = session.windows[t]
    return int(getattr(w, "gap_count", 0))


def _truth_cells(session: PreparedSession, t: int) -> np.ndarray:
    w = session.windows[t]
    return grid_from_indicators(w.conv, w.prox, w.attn, session.roster).cells


def _record(session, t, request_index, pred, source, depth) -> tuple[WindowRecord, Transcript | None]:
    rec = WindowRecord(
        session_id=session.session_id, window_index=t, request_index=request_index,
        predicted=pred.weighted.with_flags(window_index=t, is_predicted=True),
        predicted_binary=pred.binary.with_flags(window_index=t, is_predicted=True),
        truth=session.triples[t], source=source, cascade_depth=depth, coverage=pred.coverage,
        fallback_levels=pred.fallback_levels, request_id=pred.request_id, example=pred.example,
        gap_count=_window_gap_count(session, t), note=pred.note,
        predicted_cells=pred.cells if pred.cells is not None else grid_from_triple(pred.binary).cells,
        truth_cells=_truth_cells(session, t),
    )
    tr = None
    if pred.response_text is not None:
        tr = Transcript(request_index, pred.request_id, session.session_id, t, pred.prompt_text,
                        pred.response_text, pred.latency)
    return rec, tr


def _failed_record(session, t, request_index, exc, source, depth) -> WindowRecord:
    return WindowRecord(
        session_id=session.session_id, window_index=t, request_index=request_index, predicted=None,
        predicted_binary=None, truth=session.triples[t], source=source, cascade_depth=depth, failed=True,
        error=str(exc), request_id=getattr(exc, "request_id", None), gap_count=_window_gap_count(session, t),
        truth_cells=_truth_cells(session, t),
    )


def run_intervention(session: PreparedSession, predictor: Predictor, max_workers: int = 1,
                     request_offset: int = 0) -> RunResult:
    """Predict every window ``t >= 1`` from observed windows ``0 .. t-1``.

    A backend failure marks only that window as failed.
    """
    if session.n_windows < 2:
        raise ValidationError(f"session {session.session_id} needs >= 2 windows, has {session.n_windows}")
    targets = list(range(1, session.n_windows))

    def one(t: int):
        idx = request_offset + t - 1
        bundle = session.context(t)
        try:
            pred = predictor.predict(bundle, idx)
        except BackendError as exc:
            logger.error("window %s/%d failed: %s", session.session_id, t, exc)
            return _failed_record(session, t, idx, exc, bundle.source, None), None
        return _record(session, t, idx, pred, bundle.source, None)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outputs = list(pool.map(one, targets))
    else:
        outputs = [one(t) for t in targets]
    result = RunResult("intervention", predictor.name)
    for rec, tr in outputs:
        result.records.append(rec)
        if tr is not None:
            result.transcripts.append(tr)
    return result


def run_simulation(session: PreparedSession, predictor: Predictor, handoff: int = 1, horizon: int | None = None,
                   request_offset: int = 0) -> RunResult:
    """Autoregressive run: windows before ``handoff`` are observed, later ones predicted.

    Each predicted weighted triple re-enters the history, flagged as
    predicted, and its structure drives the next window's context.  A backend
    failure ends the cascade; the partial result keeps the reason.
    """
    if handoff < 1:
        raise ValidationError("handoff must be >= 1")
    available = session.n_windows - handoff
    if available < 1:
        raise ValidationError(f"session {session.session_id} has no windows after handoff {handoff}")
    if horizon is None:
        horizon = available
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if horizon > available:
        logger.warning("horizon %d truncated to %d windows available in %s", horizon, available, session.session_id)
        horizon = available
    history = list(session.triples[:handoff])
    result = RunResult("simulation", predictor.name, handoff=handoff, horizon=horizon)
    for depth in range(1, horizon + 1):
        t = handoff + depth - 1
        idx = request_offset + depth - 1
        bundle = session.context(t, history)
        try:
            pred = predictor.predict(bundle, idx)
        except BackendError as exc:
            logger.error("cascade %s stopped at depth %d: %s", session.session_id, depth, exc)
            result.records.append(_failed_record(session, t, idx, exc, bundle.source, depth))
            result.terminations[session.session_id] = f"backend_error at depth {depth}: {exc}"
            return result
        rec, tr = _record(session, t, idx, pred, bundle.source, depth)
        result.records.append(rec)
        if tr is not None:
            result.transcripts.append(tr)
        history.append(pred.weighted.with_flags(window_index=t, is_predicted=True))
    result.terminations[session.session_id] = "completed"
    return result


def request_offsets(sessions: Sequence[PreparedSession], mode: str, handoff: int = 1,
                    horizon: int | None = None) -> list[int]:
    """First request index of each session, from window counts alone."""
    offsets, total = [], 0
    for s in sessions:
        offsets.append(total)
        if mode == "intervention":
            total += s.n_windows - 1
        else:
            avail = max(0, s.n_windows - handoff)
            total += min(avail, horizon) if horizon is not None else avail
    return offsets


def run(sessions: Sequence[PreparedSession], predictor: Predictor, mode: str = "intervention", handoff: int = 1,
        horizon: int | None = None, max_workers: int = 1, config: dict | None = None) -> RunResult:
    """Run every session in order; simulation cascades stay sequential within a session."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    offsets = request_offsets(sessions, mode, handoff, horizon)
    result = RunResult(mode, predictor.name, handoff=handoff if mode == "simulation" else None,
                       horizon=horizon if mode == "simulation" else None, config=dict(config or {}))

    def one(pair):
        s, off = pair
        if mode == "intervention":
            return run_intervention(s, predictor, max_workers, off)
        return run_simulation(s, predictor, handoff, horizon, off)

    jobs = list(zip(sessions, offsets))
    if mode == "simulation" and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    for part in parts:
        result.extend(part)
    return result


# --------------------------------------------------------------------------
# run directories


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_run(result: RunResult, out_dir, seeds: dict | None = None) -> Path:
    """Write config, manifest, per-window records, transcripts and latencies.

    ``records.jsonl`` and ``transcripts.jsonl`` hold no timing data, so they
    are byte-identical across reruns with the same seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(result.config, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    manifest = {
        "format_version": RUN_FORMAT_VERSION,
        "mode": result.mode,
        "predictor": result.predictor,
        "handoff": result.handoff,
        "horizon": result.horizon,
        "seeds": dict(seeds or {}),
        "sessions": result.sessions(),
        "terminations": dict(sorted(result.terminations.items())),
        "n_records": len(result.records),
        "n_failed": sum(r.failed for r in result.records),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_jsonl(out / "records.jsonl", (r.to_dict() for r in result.records))
    _write_jsonl(out / "transcripts.jsonl", (t.to_dict() for t in result.transcripts))
    _write_jsonl(out / "latency.jsonl", (
        {"request_index": t.request_index, "request_id": t.request_id,
         "ttfb_s": t.latency[0] if t.latency else None, "total_s": t.latency[1] if t.latency else None}
        for t in result.transcripts
    ))
    return out


class RunDirError(FileNotFoundError):
    """A run directory or one of its artifacts is missing or unreadable."""


def load_run(run_dir) -> RunResult:
    d = Path(run_dir)
    for name in ("manifest.json", "records.jsonl", "config.json"):
        if not (d / name).is_file():
            raise RunDirError(f"run directory {d} is missing {name}")
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(d / "config.json", encoding="utf-8") as fh:
        config = json.load(fh)
    records = [WindowRecord.from_dict(r) for r in _read_jsonl(d / "records.jsonl")]
    transcripts = []
    if (d / "transcripts.jsonl").is_file():
        for t in _read_jsonl(d / "transcripts.jsonl"):
            transcripts.append(Transcript(t["request_index"], t["request_id"], t["session_id"], t["window_index"],
                                          t.get("prompt"), t["response_text"]))
    return RunResult(manifest["mode"], manifest["predictor"], records, transcripts, manifest.get("handoff"),
                     manifest.get("horizon"), dict(manifest.get("terminations", {})), config)


def replay_backend(run_dir_or_result) -> ScriptedBackend:
    """Scripted backend serving a run's logged responses by request index."""
    result = run_dir_or_result if isinstance(run_dir_or_result, RunResult) else load_run(run_dir_or_result)
    return ScriptedBackend({t.request_index: t.response_text for t in result.transcripts})


def dir_digest(run_dir, names: Sequence[str] = ("records.jsonl", "transcripts.jsonl")) -> str:
    h = hashlib.sha256()
    for name in names:
        p = os.path.join(run_dir, name)
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
