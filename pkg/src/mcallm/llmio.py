"""Completion backends and the response parser.

The canonical output text has one block per ordered pair::

    Pair A->B:
    t=1: C=Y, P=N, S=N
    ...
    t=32: C=Y, P=N, S=N

``parse_response`` is total: it reads strict lines first, then a tolerant
grammar, then per-pair summaries, and fills anything left from the last
observed window.  Only cells read from explicit per-second lines count
toward coverage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from mcallm.sociogram import DEFAULT_BINARY_THRESHOLD, SociogramTriple, binarize
from mcallm.validation import ValidationError, check_probability, derived_rng, ordered_pairs

logger = logging.getLogger(__name__)

HORIZON = 32
CELL_CODES = ("C", "P", "S")  # conversation, proximity, shared attention
BACKEND_KINDS = ("http", "mock_echo_persistence", "mock_scripted", "mock_noisy")
BACKEND_ALIASES = {
    "mock:echo": "mock_echo_persistence",
    "echo": "mock_echo_persistence",
    "mock:noisy": "mock_noisy",
    "noisy": "mock_noisy",
    "mock:scripted": "mock_scripted",
    "scripted": "mock_scripted",
}

LEVEL_STRICT, LEVEL_TOLERANT, LEVEL_SUMMARY, LEVEL_PERSIST = 0, 1, 2, 3


class BackendError(RuntimeError):
    """A completion request failed; ``request_id`` identifies it in transcripts."""

    def __init__(self, message: str, request_id: str, reason: str = "error"):
        super().__init__(f"[{request_id}] {message}")
        self.request_id = request_id
        self.reason = reason


# --------------------------------------------------------------------------
# grids and canonical serialization


@dataclass
class PredictionGrid:
    """Per ordered pair, per second, (C, P, S) booleans.

    ``cells`` has shape (n, n, horizon, 3); the diagonal is unused.
    ``parsed`` marks (i, j, s) cells read from explicit per-second lines.
    """

    roster: tuple[str, ...]
    cells: np.ndarray
    parsed: np.ndarray
    fallback_level: dict[str, int] = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.cells.shape[2]

    @property
    def coverage(self) -> float:
        n = len(self.roster)
        total = n * (n - 1) * self.horizon
        return float(self.parsed.sum() / total) if total else 0.0

    @property
    def flagged(self) -> bool:
        return self.coverage == 0.0

    @property
    def max_level(self) -> int:
        return max(self.fallback_level.values(), default=LEVEL_STRICT)


def pair_key(roster: Sequence[str], i: int, j: int) -> str:
    return f"{roster[i]}->{roster[j]}"


def grid_from_indicators(conv: np.ndarray, prox: np.ndarray, attn: np.ndarray, roster: Sequence[str]) -> PredictionGrid:
    """Grid from per-second indicator stacks of shape (horizon, n, n)."""
    conv = np.asarray(conv, dtype=bool)
    horizon, n, _ = conv.shape
    cells = np.zeros((n, n, horizon, 3), dtype=bool)
    cells[..., 0] = np.transpose(conv, (1, 2, 0))
    for k, m in ((1, prox), (2, attn)):
        m = np.asarray(m, dtype=bool)
        m = np.logical_or(m, np.swapaxes(m, 1, 2))
        cells[..., k] = np.transpose(m, (1, 2, 0))
    idx = np.arange(n)
    cells[idx, idx] = False
    parsed = np.ones((n, n, horizon), dtype=bool)
    parsed[idx, idx] = False
    return PredictionGrid(tuple(roster), cells, parsed, {pair_key(roster, i, j): LEVEL_STRICT for i, j in ordered_pairs(n)})


def grid_from_triple(g: SociogramTriple, horizon: int = HORIZON, threshold: float = DEFAULT_BINARY_THRESHOLD) -> PredictionGrid:
    """Constant-row grid from the binarized triple."""
    b = binarize(g, threshold)
    stack = {m: np.repeat((np.asarray(b[m]) > 0)[None], horizon, axis=0) for m in ("conv", "prox", "attn")}
    return grid_from_indicators(stack["conv"], stack["prox"], stack["attn"], g.roster)


def serialize_grid(grid: PredictionGrid) -> str:
    yn = np.where(grid.cells, "Y", "N")
    blocks = []
    for i, j in ordered_pairs(len(grid.roster)):
        lines = [f"Pair {pair_key(grid.roster, i, j)}:"]
        for s in range(grid.horizon):
            c, p, a = yn[i, j, s]
            lines.append(f"t={s + 1}: C={c}, P={p}, S={a}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def serialize_triple(g: SociogramTriple, horizon: int = HORIZON) -> str:
    """Canonical text for a binary triple (every second identical)."""
    return serialize_grid(grid_from_triple(g, horizon))


def grid_to_sociograms(grid: PredictionGrid, window_index: int = 0,
                       threshold: float = DEFAULT_BINARY_THRESHOLD) -> tuple[SociogramTriple, SociogramTriple]:
    """(weighted, binary) triples: fraction of predicted-true seconds per edge."""
    cells = grid.cells
    n = len(grid.roster)
    conv = cells[..., 0].sum(axis=2) / grid.horizon
    out = {"conv": conv}
    for k, m in ((1, "prox"), (2, "attn")):
        sym = np.logical_or(cells[..., k], np.swapaxes(cells[..., k], 0, 1))
        out[m] = sym.sum(axis=2) / grid.horizon
    off = ~np.eye(n, dtype=bool)
    for m in out:
        out[m] = np.where(off, out[m], 0.0)
    weighted = SociogramTriple(window_index=window_index, roster=grid.roster, **out)
    return weighted, binarize(weighted, threshold)


# --------------------------------------------------------------------------
# parsing

_STRICT_HEADER = re.compile(r"^Pair (\S+)->(\S+):$")
_STRICT_LINE = re.compile(r"^t=(\d+): C=([YN]), P=([YN]), S=([YN])$")
_VAL = r"(y|n|yes|no|1|0|true|false)"
_TOLERANT_LINE = re.compile(
    r"t\s*=?\s*(\d+)\s*[:.)\-]?\s*c\s*[=:]\s*" + _VAL + r"\s*[,;]?\s*p\s*[=:]\s*" + _VAL + r"\s*[,;]?\s*s\s*[=:]\s*" + _VAL + r"\b",
    re.IGNORECASE,
)
_SUMMARY_TRIPLE = re.compile(
    r"(?<![a-z])c\s*[=:]\s*" + _VAL + r"\s*[,;]?\s*p\s*[=:]\s*" + _VAL + r"\s*[,;]?\s*s\s*[=:]\s*" + _VAL + r"\b",
    re.IGNORECASE,
)
_TOLERANT_HEADER = re.compile(
    r"^[\W_]*(?:pair\s*)?[\(\[]?\s*(\w+)\s*(?:->|→|=>|-|,|\bto\b)\s*(\w+)\s*[\)\]]?\s*:?[\W_]*$",
    re.IGNORECASE,
)
_TRUE = {"y", "yes", "1", "true"}

# per-modality summary phrases; negatives are checked first
_SUMMARY_WORDS = {
    0: (r"\b(silent|quiet|not (?:talking|speaking)|no (?:conversation|talking))\b", r"\b(talking|speaking|conversation|conversing|chatting)\b"),
    1: (r"\b(far|apart|distant|not (?:close|near))\b", r"\b(close|near|nearby|proximity|together)\b"),
    2: (r"\b(no (?:shared|joint) attention|not attending|different (?:targets|objects))\b", r"\b(shared attention|joint attention|attending|same (?:target|object))\b"),
}


def _truth(token: str) -> bool:
    return token.lower() in _TRUE


def _header_pair(line: str, index: dict[str, int]) -> tuple[int, int, int] | None:
    """(i, j, level) for a pair header line, or None."""
    m = _STRICT_HEADER.match(line)
    level = LEVEL_STRICT
    if not m:
        m = _TOLERANT_HEADER.match(line.strip())
        level = LEVEL_TOLERANT
    if not m:
        return None
    a, b = m.group(1).lower(), m.group(2).lower()
    if a not in index or b not in index or a == b:
        return None
    return index[a], index[b], level


def _summary_row(line: str) -> dict[int, bool]:
    m = _SUMMARY_TRIPLE.search(line)
    if m:
        return {k: _truth(m.group(k + 1)) for k in range(3)}
    low = line.lower()
    row = {}
    for k, (neg, pos) in _SUMMARY_WORDS.items():
        if re.search(neg, low):
            row[k] = False
        elif re.search(pos, low):
            row[k] = True
    return row


def parse_response(text: str, roster: Sequence[str], horizon: int = HORIZON,
                   fallback: SociogramTriple | None = None) -> PredictionGrid:
    """Parse raw completion text into a grid; never raises on content."""
    roster = tuple(roster)
    n = len(roster)
    index = {p.lower(): k for k, p in enumerate(roster)}
    cells = np.zeros((n, n, horizon, 3), dtype=bool)
    parsed = np.zeros((n, n, horizon), dtype=bool)
    level = np.full((n, n), -1, dtype=int)
    summary: dict[tuple[int, int], dict[int, bool]] = {}

    current = None
    for raw in (text or "").splitlines():
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        head = _header_pair(line, index)
        if head is not None:
            i, j, lvl = head
            current = (i, j)
            level[i, j] = max(level[i, j], lvl)
            continue
        if current is None:
            continue
        i, j = current
        m = _STRICT_LINE.match(line)
        lvl = LEVEL_STRICT
        if not m:
            m = _TOLERANT_LINE.search(line)
            lvl = LEVEL_TOLERANT
        if m:
            s = int(m.group(1)) - 1
            if 0 <= s < horizon and not parsed[i, j, s]:
                cells[i, j, s] = [_truth(m.group(k)) for k in (2, 3, 4)]
                parsed[i, j, s] = True
                level[i, j] = max(level[i, j], lvl)
            continue
        row = _summary_row(line)
        if row:
            summary.setdefault((i, j), {}).update(row)

    fill = None
    if fallback is not None:
        b = binarize(fallback)
        fill = np.stack([np.asarray(b[m]) > 0 for m in ("conv", "prox", "attn")], axis=-1)

    levels = {}
    for i, j in ordered_pairs(n):
        missing = ~parsed[i, j]
        deepest = max(level[i, j], LEVEL_STRICT)
        if missing.any():
            row = summary.get((i, j), {})
            for k in range(3):
                if k in row:
                    cells[i, j, missing, k] = row[k]
                    deepest = max(deepest, LEVEL_SUMMARY)
                else:
                    cells[i, j, missing, k] = bool(fill[i, j, k]) if fill is not None else False
                    deepest = LEVEL_PERSIST
        levels[pair_key(roster, i, j)] = int(deepest)
    return PredictionGrid(roster, cells, parsed, levels)


# --------------------------------------------------------------------------
# backends


@dataclass
class BackendConfig:
    kind: str = "mock_echo_persistence"
    endpoint: str = "http://127.0.0.1:8000"
    path: str = "/v1/completions"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 4096
    timeout: float = 30.0
    retries: int = 3
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    script_path: str | None = None
    flip_prob: float = 0.0
    seed: int = 0
    redact_bodies: bool = True

    def __post_init__(self):
        self.kind = BACKEND_ALIASES.get(self.kind, self.kind)
        if self.kind not in BACKEND_KINDS:
            raise ValidationError(f"unknown backend kind {self.kind!r}; expected one of {BACKEND_KINDS}")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.timeout <= 0:
            raise ValidationError("timeout must be > 0")
        if self.retries < 0:
            raise ValidationError("retries must be >= 0")
        check_probability(self.flip_prob, "flip_prob")
        if self.kind == "mock_scripted" and not self.script_path:
            raise ValidationError("mock_scripted backend needs script_path")

    @property
    def url(self) -> str:
        return self.endpoint.rstrip("/") + "/" + self.path.lstrip("/") if self.path else self.endpoint


@dataclass(frozen=True)
class Latency:
    ttfb_s: float
    total_s: float


@dataclass(frozen=True)
class Completion:
    text: str
    request_id: str
    latency: Latency
    attempts: int = 1


class Backend(Protocol):
    name: str

    def complete(self, prompt, context, request_index: int) -> Completion: ...


def _prompt_text(prompt) -> str:
    return prompt if isinstance(prompt, str) else prompt.text


def request_id_for(context, request_index: int) -> str:
    sid = getattr(context, "session_id", "") or "session"
    return f"{sid}-w{getattr(context, 'window_index', 0)}-r{request_index}"


class EchoBackend:
    """Repeats the last history window, binarized, as constant rows."""

    name = "mock_echo_persistence"

    def complete(self, prompt, context, request_index: int) -> Completion:
        start = time.perf_counter()
        text = serialize_triple(context.last_window)
        elapsed = time.perf_counter() - start
        return Completion(text, request_id_for(context, request_index), Latency(elapsed, elapsed))


_YN_TOKEN = re.compile(r"(?<=[CPS]=)[YN]")


class NoisyBackend(EchoBackend):
    """Echo output with every Y/N token flipped independently with probability ``p``.

    Draws come from a generator keyed by (seed, session, window), so output
    does not depend on request order.
    """

    name = "mock_noisy"

    def __init__(self, p: float, seed: int = 0):
        self.p = check_probability(p, "p")
        self.seed = seed

    def complete(self, prompt, context, request_index: int) -> Completion:
        base = super().complete(prompt, context, request_index)
        if self.p == 0:
            return base
        rng = derived_rng(self.seed, getattr(context, "session_id", ""), int(getattr(context, "window_index", 0)))
        tokens = list(_YN_TOKEN.finditer(base.text))
        flips = rng.random(len(tokens)) < self.p
        chars = list(base.text)
        for tok, flip in zip(tokens, flips):
            if flip:
                chars[tok.start()] = "N" if tok.group() == "Y" else "Y"
        return Completion("".join(chars), base.request_id, base.latency)


class ScriptedBackend:
    """Serves responses by request index from a JSONL script or a mapping."""

    name = "mock_scripted"

    def __init__(self, script: str | Path | dict[int, str]):
        if isinstance(script, dict):
            self.responses = {int(k): v for k, v in script.items()}
        else:
            self.responses = load_script(script)

    def complete(self, prompt, context, request_index: int) -> Completion:
        rid = request_id_for(context, request_index)
        if request_index not in self.responses:
            raise BackendError(f"script has no response for request {request_index}", rid, "script_exhausted")
        return Completion(self.responses[request_index], rid, Latency(0.0, 0.0))


def load_script(path) -> dict[int, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out[int(rec["request_index"])] = rec["response_text"]
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise ValidationError(f"script line {line_no}: {exc}") from None
    return out


def _extract_text(body: dict) -> str:
    if "choices" in body and body["choices"]:
        choice = body["choices"][0]
        if "text" in choice:
            return choice["text"]
        if "message" in choice:
            return choice["message"].get("content", "")
    for key in ("text", "completion", "response", "output"):
        if key in body:
            return body[key]
    raise ValueError(f"no completion text in response keys {sorted(body)}")


class HttpBackend:
    """POSTs ``{model, prompt, temperature, max_tokens}`` to a completion endpoint.

    Retries 5xx responses, timeouts and connection errors with exponential
    backoff; 4xx responses fail immediately.
    """

    name = "http"

    def __init__(self, config: BackendConfig, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._sleep = sleep
        self._lock = threading.Lock()

    def _post(self, payload: bytes, rid: str) -> tuple[str, Latency]:
        req = urllib.request.Request(
            self.config.url,
            data=payload,
            headers={"Content-Type": "application/json", "X-Request-Id": rid},
            method="POST",
        )
        start = time.perf_counter()
        with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
            first = resp.read(1)
            ttfb = time.perf_counter() - start
            raw = first + resp.read()
        total = time.perf_counter() - start
        body = json.loads(raw.decode("utf-8"))
        return _extract_text(body), Latency(ttfb, total)

    def complete(self, prompt, context, request_index: int) -> Completion:
        cfg = self.config
        rid = request_id_for(context, request_index)
        text = _prompt_text(prompt)
        payload = json.dumps({
            "model": cfg.model,
            "prompt": text,
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }).encode("utf-8")
        if cfg.redact_bodies:
            logger.debug("POST %s id=%s prompt sha256=%s", cfg.url, rid, hashlib.sha256(payload).hexdigest()[:12])
        else:
            logger.debug("POST %s id=%s body=%s", cfg.url, rid, payload.decode("utf-8"))
        last_error = "no attempt made"
        for attempt in range(cfg.retries + 1):
            try:
                out, latency = self._post(payload, rid)
                return Completion(out, rid, latency, attempts=attempt + 1)
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise BackendError(f"HTTP {exc.code} from {cfg.url}", rid, "client_error") from None
                last_error = f"HTTP {exc.code}"
            except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError) as exc:
                last_error = f"{type(exc).__name__}: {getattr(exc, 'reason', exc)}"
            except (ValueError, UnicodeDecodeError) as exc:
                raise BackendError(f"malformed response body: {exc}", rid, "bad_response") from None
            if attempt < cfg.retries:
                delay = min(cfg.backoff_max, cfg.backoff_base * 2 ** attempt)
                logger.warning("request %s failed (%s); retry %d/%d in %.2fs", rid, last_error, attempt + 1, cfg.retries, delay)
                self._sleep(delay)
        raise BackendError(f"retries exhausted after {cfg.retries + 1} attempts: {last_error}", rid, "retries_exhausted")


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "mock_echo_persistence":
        return EchoBackend()
    if config.kind == "mock_noisy":
        return NoisyBackend(config.flip_prob, config.seed)
    if config.kind == "mock_scripted":
        return ScriptedBackend(config.script_path)
    return HttpBackend(config)


def encode_cells(cells: np.ndarray) -> str:
    """Bit-pack a boolean (n, n, horizon, 3) grid into a hex string."""
    return np.packbits(np.asarray(cells, dtype=bool).ravel()).tobytes().hex()


def decode_cells(text: str, n: int = 4, horizon: int = HORIZON) -> np.ndarray:
    size = n * n * horizon * 3
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(text), dtype=np.uint8))[:size]
    return bits.astype(bool).reshape(n, n, horizon, 3)
