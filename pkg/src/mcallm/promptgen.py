"""Prompt rendering, few-shot demonstration selection and SFT export.

Prompts are assembled from per-part Jinja2 templates in a fixed order:
instructions, temporal context, individual profiles, group structure,
pairwise history, event timeline, an optional demonstration, and the output
format.  Numbers are formatted to two decimals so identical bundles always
render to identical bytes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, StrictUndefined
from sklearn.cluster import kmeans_plusplus

from mcallm.context import ContextBundle, PreparedSession
from mcallm.llmio import HORIZON, grid_from_indicators, serialize_grid, serialize_triple
from mcallm.sociogram import MODALITIES, SociogramTriple
from mcallm.validation import ValidationError, ordered_pairs

logger = logging.getLogger(__name__)

TEMPLATE_ROOT = Path(__file__).parent / "templates"
PART_ORDER = ("I", "C_temp", "C_indiv", "C_group", "H_pair", "E_event", "EXAMPLE", "FMT")
_PART_TEMPLATES = {
    "I": "instructions.j2",
    "C_temp": "temporal.j2",
    "C_indiv": "individual.j2",
    "C_group": "group.j2",
    "H_pair": "pair_history.j2",
    "E_event": "events.j2",
    "EXAMPLE": "example.j2",
    "FMT": "format.j2",
}
CONTEXT_LEVELS = {
    "minimal": ("I", "H_pair", "FMT"),
    "individual": ("I", "C_indiv", "H_pair", "FMT"),
    "group": ("I", "C_indiv", "C_group", "H_pair", "FMT"),
    "full": ("I", "C_temp", "C_indiv", "C_group", "H_pair", "E_event", "FMT"),
}
STRATEGIES = ("random", "phase_similar", "diverse")
DEFAULT_TOKEN_BUDGET = 8192


@dataclass(frozen=True)
class PromptText:
    text: str
    part_offsets: dict[str, tuple[int, int]]
    approx_token_count: int
    examples_included: int = 0

    def part(self, name: str) -> str:
        start, end = self.part_offsets[name]
        return self.text.encode("utf-8")[start:end].decode("utf-8")


def approx_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def _f2(x) -> str:
    return f"{float(x):.2f}"


_ENVS: dict[str, Environment] = {}


def _env(template_set: str) -> Environment:
    if template_set not in _ENVS:
        root = Path(template_set) if Path(template_set).is_dir() else TEMPLATE_ROOT / template_set
        if not root.is_dir():
            raise ValidationError(f"unknown template set {template_set!r}")
        missing = [t for t in _PART_TEMPLATES.values() if not (root / t).is_file()]
        if missing:
            raise ValidationError(f"template set {template_set!r} lacks {missing}")
        env = Environment(loader=FileSystemLoader(str(root)), trim_blocks=True, lstrip_blocks=True,
                          keep_trailing_newline=True, undefined=StrictUndefined, autoescape=False)
        env.filters["f2"] = _f2
        _ENVS[template_set] = env
    return _ENVS[template_set]


# --------------------------------------------------------------------------
# template variables


def _edges(a: np.ndarray, roster, directed: bool) -> str:
    n = len(roster)
    items = []
    for i in range(n):
        for j in range(n):
            if i == j or a[i, j] <= 0 or (not directed and j < i):
                continue
            sep = "->" if directed else "-"
            items.append(f"{roster[i]}{sep}{roster[j]} {a[i, j]:.2f}")
    return ", ".join(items) if items else "none"


def _centrality(vec, roster) -> str:
    return " ".join(f"{p} {v:.2f}" for p, v in zip(roster, vec))


def _trend(then: float, now: float) -> dict:
    a, b = round(then, 2), round(now, 2)
    word = "increasing" if b > a else "decreasing" if b < a else "stable"
    return {"then": then, "now": now, "word": word}


def _history_rows(windows: Sequence[SociogramTriple]) -> list[dict]:
    return [
        {
            "index": g.window_index,
            "predicted": g.is_predicted,
            "conv": _edges(np.asarray(g.conv), g.roster, True),
            "prox": _edges(np.asarray(g.prox), g.roster, False),
            "attn": _edges(np.asarray(g.attn), g.roster, False),
        }
        for g in windows
    ]


def _event_rows(bundle: ContextBundle) -> list[dict]:
    names = {"conv": "conversation", "prox": "proximity", "attn": "attention"}
    rows = []
    for e in bundle.event_timeline:
        changes = []
        for m in MODALITIES:
            if e.gained[m]:
                changes.append(f"{names[m]} gained {' '.join(e.gained[m])}")
            if e.lost[m]:
                changes.append(f"{names[m]} lost {' '.join(e.lost[m])}")
        rows.append({
            "index": e.window_index,
            "predicted": e.is_predicted,
            "phase": e.phase_id,
            "conv": e.densities["conv"],
            "prox": e.densities["prox"],
            "attn": e.densities["attn"],
            "joint": e.joint_attention,
            "changes": "; ".join(changes),
        })
    return rows


def _variables(bundle: ContextBundle, history_len: int | None = None) -> dict:
    roster = bundle.roster
    ph = bundle.temporal.phase
    history = bundle.pair_history if history_len is None else bundle.pair_history[-history_len:]
    group = {}
    for m in MODALITIES:
        met = bundle.group[m]
        group[m] = {
            "density": met.density,
            "reciprocity": met.reciprocity,
            "clustering": met.clustering,
            "centrality": _centrality(met.eigenvector_centrality, roster),
        }
    profiles = []
    for p in bundle.indiv:
        profiles.append({
            "id": p.participant_id,
            "speaking": p.speaking.descriptor,
            "speaking_rate": int(round(p.speaking.rate or 0)),
            "gaze": p.gaze.descriptor,
            "gaze_rate": int(round(p.gaze.rate or 0)),
            "locomotion": p.locomotion.descriptor,
        })
    return {
        "roster": roster,
        "last_window": bundle.window_index - 1,
        "target_window": bundle.window_index,
        "horizon": HORIZON,
        "phase": {"label": ph.phase_label, "id": ph.phase_id, "stability": ph.stability,
                  "entropy": ph.speaking_entropy, "joint": ph.joint_attention},
        "density": _trend(*bundle.temporal.density_trend),
        "reciprocity": _trend(*bundle.temporal.reciprocity_trend),
        "short": bundle.temporal.short,
        "span": bundle.temporal.trend_span,
        "profiles": profiles,
        "conv": group["conv"],
        "prox": group["prox"],
        "attn": group["attn"],
        "weights": bundle.fused.pca_weights,
        "fallback": bundle.fused.fallback,
        "fused": {"density": bundle.fused.density, "reciprocity": bundle.fused.reciprocity,
                  "clustering": bundle.fused.clustering},
        "windows": _history_rows(history),
        "events": _event_rows(bundle),
        "pairs": [f"{roster[i]}->{roster[j]}" for i, j in ordered_pairs(len(roster))],
    }


# --------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Example:
    """A demonstration: a context from another group plus its true next window."""

    session_id: str
    window_index: int
    bundle: ContextBundle
    target: str

    @property
    def features(self) -> np.ndarray:
        return np.asarray(self.bundle.phase_features, dtype=float)


def _render_example(example: Example, template_set: str) -> str:
    env = _env(template_set)
    var = _variables(example.bundle, history_len=1)
    context = "".join(env.get_template(_PART_TEMPLATES[p]).render(**var) for p in ("C_temp", "C_group", "H_pair"))
    return env.get_template(_PART_TEMPLATES["EXAMPLE"]).render(
        window=example.window_index, context=context.rstrip("\n"), target=example.target)


def render_prompt(bundle: ContextBundle, example: Example | None = None, template_set: str = "default",
                  level: str = "full") -> PromptText:
    """Render the prompt for ``bundle``; parts are separated by a blank line."""
    if level not in CONTEXT_LEVELS:
        raise ValidationError(f"unknown context level {level!r}; expected one of {sorted(CONTEXT_LEVELS)}")
    if example is not None and example.session_id == bundle.session_id:
        raise ValidationError("demonstration comes from the query's own session")
    env = _env(template_set)
    parts = list(CONTEXT_LEVELS[level])
    if example is not None:
        parts.insert(parts.index("FMT"), "EXAMPLE")
    var = _variables(bundle, history_len=1 if level == "minimal" else None)

    chunks, offsets, pos = [], {}, 0
    for name in PART_ORDER:
        if name not in parts:
            continue
        if name == "EXAMPLE":
            body = _render_example(example, template_set)
        else:
            body = env.get_template(_PART_TEMPLATES[name]).render(**var)
        body = body.rstrip("\n") + "\n"
        if chunks:
            chunks.append("\n")
            pos += 1
        size = len(body.encode("utf-8"))
        offsets[name] = (pos, pos + size)
        chunks.append(body)
        pos += size
    text = "".join(chunks)
    return PromptText(text, offsets, approx_tokens(text), int(example is not None))


def render_target(window) -> str:
    """Canonical answer text: per-second grid of a window, or constant rows of a triple."""
    if isinstance(window, SociogramTriple):
        return serialize_triple(window)
    return serialize_grid(grid_from_indicators(window.conv, window.prox, window.attn, window.roster))


# --------------------------------------------------------------------------
# few-shot selection


def build_example_pool(sessions: Sequence[PreparedSession]) -> list[Example]:
    pool = []
    for s in sessions:
        for t in range(1, s.n_windows):
            pool.append(Example(s.session_id, t, s.context(t), render_target(s.windows[t])))
    return pool


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def select_example(strategy: str, pool: Sequence[Example], query: ContextBundle, rng: np.random.Generator,
                   k: int = 1, n_seeds: int = 5) -> Example:
    """Pick one demonstration from ``pool`` for ``query``.

    Candidates from the query's own session are dropped (with a warning).
    ``rng`` is the caller's seeded generator; only ``random`` and ``diverse``
    consume it.
    """
    if k != 1:
        raise ValidationError(f"only k=1 demonstrations are supported, got k={k}")
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")
    candidates = [e for e in pool if e.session_id != query.session_id]
    if len(candidates) < len(pool):
        logger.warning("dropped %d pool candidates from the query's own session %s",
                       len(pool) - len(candidates), query.session_id)
    if not candidates:
        raise ValidationError("example pool is empty after excluding the query's session")
    if len(candidates) == 1:
        return candidates[0]

    q = np.asarray(query.phase_features, dtype=float)
    if strategy == "random":
        return candidates[int(rng.integers(len(candidates)))]
    if strategy == "phase_similar":
        scored = sorted(candidates, key=lambda e: (-_cosine(q, e.features), e.window_index, e.session_id))
        return scored[0]

    x = np.stack([e.features for e in candidates])
    mean, std = x.mean(axis=0), x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    n_clusters = min(n_seeds, len(np.unique(z, axis=0)))
    if n_clusters < 2:
        return candidates[int(rng.integers(len(candidates)))]
    _, seeds = kmeans_plusplus(z, n_clusters=n_clusters, random_state=int(rng.integers(2**31 - 1)))
    zq = (q - mean) / std
    nearest = int(np.argmin(((z[seeds] - zq) ** 2).sum(axis=1)))
    for rank, idx in enumerate(seeds):
        if rank != nearest:
            return candidates[int(idx)]
    return candidates[int(seeds[0])]


# --------------------------------------------------------------------------
# SFT export


@dataclass(frozen=True)
class SftRecord:
    prompt: PromptText
    target: str
    loss_mask_boundary: int
    session: str
    window_index: int
    over_budget: bool = False

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt.text,
            "target": self.target,
            "loss_mask_boundary": self.loss_mask_boundary,
            "session": self.session,
            "window_index": self.window_index,
            "approx_token_count": self.prompt.approx_token_count + approx_tokens(self.target),
            "over_budget": self.over_budget,
        }


def sft_records(sessions: Sequence[PreparedSession], budget: int = DEFAULT_TOKEN_BUDGET,
                template_set: str = "default", level: str = "full") -> list[SftRecord]:
    records = []
    for s in sessions:
        if s.n_windows < 2:
            raise ValidationError(f"session {s.session_id} has {s.n_windows} window(s); SFT export needs >= 2")
        for t in range(1, s.n_windows):
            prompt = render_prompt(s.context(t), template_set=template_set, level=level)
            target = render_target(s.windows[t])
            tokens = prompt.approx_token_count + approx_tokens(target)
            over = tokens > budget
            if over:
                logger.warning("SFT record %s/%d is ~%d tokens, over the %d budget", s.session_id, t, tokens, budget)
            records.append(SftRecord(prompt, target, len(prompt.text.encode("utf-8")), s.session_id, t, over))
    return records


def export_sft_dataset(sessions: Sequence[PreparedSession], out, budget: int = DEFAULT_TOKEN_BUDGET,
                       template_set: str = "default", level: str = "full") -> list[SftRecord]:
    """Write one JSONL record per predictable window and return the records."""
    records = sft_records(sessions, budget, template_set, level)
    with open(out, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return records
