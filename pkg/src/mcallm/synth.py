"""Seeded synthetic group sessions.

Each edge indicator follows a two-state "redraw" chain: every step it keeps
its value with probability ``1 - flip`` and otherwise redraws from its base
rate.  The stationary activity fraction is the base rate and the lag-1
autocorrelation is ``1 - flip``, so both are set directly.  Regimes scale
base rates over stretches of time to give sessions phase structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcallm.ingest import DEFAULT_STRIDE, DEFAULT_WINDOW_LEN, SessionData
from mcallm.validation import ValidationError, check_probability, derived_rng

DEFAULT_ROSTER = ("A", "B", "C", "D")


@dataclass
class SynthConfig:
    n_windows: int = 34
    base_rates: dict[str, float] = field(default_factory=lambda: {"conv": 0.3, "prox": 0.3, "attn": 0.1})
    flip_probs: dict[str, float] = field(default_factory=lambda: {"conv": 0.1, "prox": 0.05, "attn": 0.2})
    regimes: list[dict[str, float]] = field(default_factory=list)
    regime_mean_windows: float = 6.0
    talk_spread: float = 0.0
    block_len: int = 1
    window_len: int = DEFAULT_WINDOW_LEN
    stride: int = DEFAULT_STRIDE
    roster: tuple[str, ...] = DEFAULT_ROSTER
    with_features: bool = True

    def __post_init__(self):
        for m in ("conv", "prox", "attn"):
            check_probability(self.base_rates[m], f"base_rates[{m}]")
            check_probability(self.flip_probs[m], f"flip_probs[{m}]")
        if self.block_len < 1:
            raise ValidationError("block_len must be >= 1")

    @property
    def n_seconds(self) -> int:
        return self.window_len + (self.n_windows - 1) * self.stride

    @classmethod
    def for_autocorrelation(cls, autocorr: dict[str, float], **kw) -> "SynthConfig":
        """Config whose per-modality lag-1 autocorrelation equals ``autocorr``."""
        return cls(flip_probs={m: 1.0 - float(a) for m, a in autocorr.items()}, **kw)


def redraw_chain(rates: np.ndarray, flip: float, rng: np.random.Generator, init: np.ndarray | None = None) -> np.ndarray:
    """Simulate independent redraw chains; ``rates`` has shape (steps, k)."""
    steps, k = rates.shape
    out = np.empty((steps, k), dtype=bool)
    state = rng.random(k) < rates[0] if init is None else init.astype(bool)
    redraw = rng.random((steps, k)) < flip
    fresh = rng.random((steps, k)) < rates
    out[0] = state
    for t in range(1, steps):
        state = np.where(redraw[t], fresh[t], state)
        out[t] = state
    return out


def _regime_schedule(cfg: SynthConfig, n_steps: int, steps_per_window: float, rng) -> np.ndarray:
    if not cfg.regimes:
        return np.zeros(n_steps, dtype=int)
    sched = np.empty(n_steps, dtype=int)
    t, current = 0, int(rng.integers(len(cfg.regimes)))
    while t < n_steps:
        length = max(1, int(round(rng.geometric(1.0 / cfg.regime_mean_windows) * steps_per_window)))
        sched[t:t + length] = current
        t += length
        if len(cfg.regimes) > 1:
            current = (current + 1 + int(rng.integers(len(cfg.regimes) - 1))) % len(cfg.regimes)
    return sched


def generate_session(session_id: str, cfg: SynthConfig | None = None, seed: int = 0) -> SessionData:
    cfg = cfg or SynthConfig()
    rng = derived_rng(seed, session_id)
    roster = tuple(cfg.roster)
    n = len(roster)
    total = cfg.n_seconds
    n_steps = -(-total // cfg.block_len)
    regimes = _regime_schedule(cfg, n_steps, cfg.stride / cfg.block_len, rng)
    mult = {m: np.array([r.get(m, 1.0) for r in cfg.regimes] or [1.0]) for m in ("conv", "prox", "attn")}

    talk = np.ones(n)
    if cfg.talk_spread > 0:
        talk = np.exp(rng.normal(0.0, cfg.talk_spread, n))

    def expand(steps: np.ndarray) -> np.ndarray:
        return np.repeat(steps, cfg.block_len, axis=0)[:total]

    conv = np.zeros((total, n, n), dtype=bool)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    rates = np.stack([np.clip(cfg.base_rates["conv"] * talk[i] * mult["conv"][regimes], 0, 1) for i, _ in pairs], axis=1)
    chain = expand(redraw_chain(rates, cfg.flip_probs["conv"], rng))
    for k, (i, j) in enumerate(pairs):
        conv[:, i, j] = chain[:, k]

    sym = {}
    upairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for m in ("prox", "attn"):
        arr = np.zeros((total, n, n), dtype=bool)
        rates = np.tile(np.clip(cfg.base_rates[m] * mult[m][regimes], 0, 1)[:, None], (1, len(upairs)))
        chain = expand(redraw_chain(rates, cfg.flip_probs[m], rng))
        for k, (i, j) in enumerate(upairs):
            arr[:, i, j] = arr[:, j, i] = chain[:, k]
        sym[m] = arr

    speaking = positions = gaze = None
    if cfg.with_features:
        speaking = conv.any(axis=2).astype(float)
        mobility = rng.uniform(0.02, 0.3, n)
        steps = rng.normal(0.0, 1.0, (total, n, 2)) * mobility[None, :, None]
        positions = np.cumsum(steps, axis=0) + rng.uniform(-1.0, 1.0, (1, n, 2))
        gaze = np.full((total, n), None, dtype=object)
        gaze_rate = rng.uniform(0.2, 0.9, n)
        target = rng.integers(0, 28, n)
        looking = redraw_chain(np.tile(gaze_rate, (total, 1)), 0.3, rng)
        switch = rng.random((total, n)) < 0.1
        for t in range(total):
            target = np.where(switch[t], rng.integers(0, 28, n), target)
            for k in range(n):
                if looking[t, k]:
                    gaze[t, k] = f"img_{int(target[k]):02d}"

    return SessionData(
        session_id=session_id,
        roster=roster,
        conv=conv,
        prox=sym["prox"],
        attn=sym["attn"],
        gaps=np.zeros(total, dtype=bool),
        speaking=speaking,
        positions=positions,
        gaze=gaze,
    )


def generate_dataset(n_sessions: int = 12, cfg: SynthConfig | None = None, seed: int = 0, prefix: str = "g") -> list[SessionData]:
    width = max(2, len(str(n_sessions)))
    return [generate_session(f"{prefix}{k + 1:0{width}d}", cfg, seed) for k in range(n_sessions)]


def lag1_autocorrelation(x) -> float:
    x = np.asarray(x, dtype=float)
    a, b = x[:-1] - x.mean(), x[1:] - x.mean()
    denom = np.sqrt((a ** 2).sum() * (b ** 2).sum())
    return float((a * b).sum() / denom) if denom else float("nan")
