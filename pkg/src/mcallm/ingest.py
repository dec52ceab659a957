"""Session loading, validation, proximity derivation and window segmentation."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from mcallm.validation import ROSTER_SIZE, ValidationError, check_roster

logger = logging.getLogger(__name__)

FEET_TO_METERS = 0.3048
DEFAULT_PROXIMITY_M = 1.5 * FEET_TO_METERS  # 0.4572 m
DEFAULT_WINDOW_LEN = 32
DEFAULT_STRIDE = 16
SCHEMAS = ("jsonl", "csv")


class DataError(ValidationError):
    """Malformed or inconsistent session data; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SessionData:
    session_id: str
    roster: tuple[str, ...]
    conv: np.ndarray  # (T, n, n) bool, directed
    prox: np.ndarray  # (T, n, n) bool, symmetric
    attn: np.ndarray  # (T, n, n) bool, symmetric
    gaps: np.ndarray  # (T,) bool, True where no pair record arrived
    speaking: np.ndarray | None = None  # (T, n) float, NaN when unknown
    positions: np.ndarray | None = None  # (T, n, 2) float, NaN when unknown
    gaze: np.ndarray | None = None  # (T, n) object, None when unknown
    task_state: dict[int, str] = field(default_factory=dict)
    proximity_skipped: int = 0

    @property
    def n_seconds(self) -> int:
        return int(self.conv.shape[0])

    @property
    def gap_seconds(self) -> list[int]:
        return [int(t) for t in np.flatnonzero(self.gaps)]


@dataclass
class WindowSeries:
    window_index: int
    start_t: int
    end_t: int
    session_id: str
    roster: tuple[str, ...]
    conv: np.ndarray
    prox: np.ndarray
    attn: np.ndarray
    gaps: np.ndarray
    speaking: np.ndarray | None = None
    positions: np.ndarray | None = None
    gaze: np.ndarray | None = None

    @property
    def gap_count(self) -> int:
        return int(self.gaps.sum())

    def __len__(self) -> int:
        return self.end_t - self.start_t


@dataclass
class IngestConfig:
    window_len: int = DEFAULT_WINDOW_LEN
    stride: int = DEFAULT_STRIDE
    proximity_threshold_m: float = DEFAULT_PROXIMITY_M
    roster: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.window_len <= 0 or self.stride <= 0:
            raise ValidationError("window_len and stride must be positive")
        if self.proximity_threshold_m <= 0:
            raise ValidationError("proximity_threshold_m must be positive")
        if self.roster is not None:
            self.roster = check_roster(self.roster)

    @classmethod
    def from_mapping(cls, data: dict) -> "IngestConfig":
        data = dict(data)
        if "proximity_threshold_ft" in data:
            ft = float(data.pop("proximity_threshold_ft"))
            data.setdefault("proximity_threshold_m", ft * FEET_TO_METERS)
        known = {"window_len", "stride", "proximity_threshold_m", "roster"}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown ingest config keys: {sorted(unknown)}")
        if data.get("roster") is not None:
            data["roster"] = tuple(data["roster"])
        return cls(**data)


def _as_bool(value, line: int, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in ("0", "1", "true", "false", "y", "n"):
        return value.strip().lower() in ("1", "true", "y")
    raise DataError(f"field {key!r} must be 0/1, got {value!r}", line)


def derive_proximity(positions, threshold: float = DEFAULT_PROXIMITY_M) -> tuple[np.ndarray, int]:
    """Pairwise proximity from (T, n, 2) positions; inclusive distance threshold.

    Seconds with any non-finite coordinate are skipped (all pairs false) and
    counted; the count is the second return value.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 3 or pos.shape[2] != 2:
        raise ValidationError(f"positions must have shape (T, n, 2), got {pos.shape}")
    if threshold <= 0:
        raise ValidationError("proximity threshold must be positive")
    bad = ~np.all(np.isfinite(pos), axis=(1, 2))
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    with np.errstate(invalid="ignore"):
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        prox = dist <= threshold
    n = pos.shape[1]
    prox[:, np.arange(n), np.arange(n)] = False
    prox[bad] = False
    skipped = int(bad.sum())
    if skipped:
        logger.warning("derive_proximity: skipped %d seconds with non-finite positions", skipped)
    return prox, skipped


class _SessionBuilder:
    def __init__(self, session_id: str):
        self.session_id = session_id
        self.pair_rows: list[tuple[int, int, str, str, bool, bool | None, bool]] = []
        self.part_rows: list[tuple[int, int, str, dict]] = []
        self.task_state: dict[int, str] = {}
        self.last_t: dict[tuple[str, str], tuple[int, int]] = {}

    def add_pair(self, line: int, t: int, i: str, j: str, conv: bool, prox: bool | None, attn: bool):
        if i == j:
            raise DataError(f"self pair ({i}, {j})", line)
        prev = self.last_t.get((i, j))
        if prev is not None and t <= prev[0]:
            raise DataError(f"non-monotonic timestamp t={t} after t={prev[0]} for pair ({i}, {j})", line)
        self.last_t[(i, j)] = (t, line)
        self.pair_rows.append((line, t, i, j, conv, prox, attn))

    def build(self, config: IngestConfig) -> SessionData:
        if not self.pair_rows:
            raise DataError(f"session {self.session_id!r} has no pair records")
        ids = {r[2] for r in self.pair_rows} | {r[3] for r in self.pair_rows} | {r[2] for r in self.part_rows}
        if config.roster is not None:
            extra = ids - set(config.roster)
            if extra:
                raise DataError(f"participants {sorted(extra)} not in configured roster {config.roster}")
            roster = config.roster
        else:
            if len(ids) != ROSTER_SIZE:
                raise DataError(f"session {self.session_id!r}: roster must have {ROSTER_SIZE} participants, found {len(ids)}: {sorted(ids)}")
            roster = tuple(sorted(ids))
        index = {p: k for k, p in enumerate(roster)}
        n = len(roster)
        horizon = max(r[1] for r in self.pair_rows) + 1
        conv = np.zeros((horizon, n, n), dtype=bool)
        prox = np.zeros((horizon, n, n), dtype=bool)
        attn = np.zeros((horizon, n, n), dtype=bool)
        seen = np.zeros(horizon, dtype=bool)
        prox_given = np.zeros((horizon, n, n), dtype=bool)
        sym_seen: dict[tuple[int, int, int], tuple[bool | None, bool]] = {}
        needs_derived = False
        for line, t, i, j, c, p, a in self.pair_rows:
            ii, jj = index[i], index[j]
            key = (t, min(ii, jj), max(ii, jj))
            other = sym_seen.get(key)
            if other is not None:
                if p is not None and other[0] is not None and other[0] != p:
                    raise DataError(f"asymmetric prox for ({i}, {j}) at t={t}", line)
                if other[1] != a:
                    raise DataError(f"asymmetric attn for ({i}, {j}) at t={t}", line)
            sym_seen[key] = (p, a)
            seen[t] = True
            conv[t, ii, jj] = c
            attn[t, ii, jj] = attn[t, jj, ii] = a
            if p is None:
                needs_derived = True
            else:
                prox[t, ii, jj] = prox[t, jj, ii] = p
                prox_given[t, ii, jj] = prox_given[t, jj, ii] = True

        speaking = positions = gaze = None
        if self.part_rows:
            speaking = np.full((horizon, n), np.nan)
            positions = np.full((horizon, n, 2), np.nan)
            gaze = np.full((horizon, n), None, dtype=object)
            for line, t, p, fields in self.part_rows:
                if t >= horizon:
                    continue
                k = index[p]
                if "speaking" in fields:
                    speaking[t, k] = float(_as_bool(fields["speaking"], line, "speaking"))
                if "x" in fields and "y" in fields:
                    positions[t, k] = (float(fields["x"]), float(fields["y"]))
                if fields.get("gaze") is not None:
                    gaze[t, k] = str(fields["gaze"])

        skipped = 0
        if needs_derived:
            if positions is None:
                raise DataError(f"session {self.session_id!r}: prox missing and no positions to derive it from")
            derived, skipped = derive_proximity(positions, config.proximity_threshold_m)
            prox = np.where(prox_given, prox, derived & seen[:, None, None])

        gaps = ~seen
        if gaps.any():
            logger.info("session %s: %d gap seconds flagged", self.session_id, int(gaps.sum()))
        return SessionData(
            session_id=self.session_id,
            roster=roster,
            conv=conv,
            prox=prox,
            attn=attn,
            gaps=gaps,
            speaking=speaking,
            positions=positions,
            gaze=gaze,
            task_state=dict(self.task_state),
            proximity_skipped=skipped,
        )


def _read_jsonl(path: Path) -> dict[str, _SessionBuilder]:
    builders: dict[str, _SessionBuilder] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", line_no) from None
            if not isinstance(obj, dict):
                raise DataError("record must be a JSON object", line_no)
            sid = str(obj.get("session", "default"))
            b = builders.setdefault(sid, _SessionBuilder(sid))
            try:
                t = int(obj["t"])
            except (KeyError, TypeError, ValueError):
                raise DataError("missing or non-integer 't'", line_no) from None
            if t < 0:
                raise DataError(f"negative timestamp t={t}", line_no)
            if "i" in obj or "j" in obj:
                try:
                    i, j = str(obj["i"]), str(obj["j"])
                    conv = _as_bool(obj["conv"], line_no, "conv")
                    attn = _as_bool(obj["attn"], line_no, "attn")
                except KeyError as exc:
                    raise DataError(f"pair record missing field {exc.args[0]!r}", line_no) from None
                prox = _as_bool(obj["prox"], line_no, "prox") if "prox" in obj else None
                b.add_pair(line_no, t, i, j, conv, prox, attn)
            elif "p" in obj:
                b.part_rows.append((line_no, t, str(obj["p"]), obj))
                if "task" in obj:
                    b.task_state[t] = str(obj["task"])
            elif "task" in obj:
                b.task_state[t] = str(obj["task"])
            else:
                raise DataError("record is neither a pair ('i','j') nor participant ('p') row", line_no)
    return builders


_CSV_COL = re.compile(r"^(conv|prox|attn)_([^_]+)_([^_]+)$")


def _read_csv(path: Path) -> dict[str, _SessionBuilder]:
    builders: dict[str, _SessionBuilder] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "t" not in reader.fieldnames:
            raise DataError("CSV header must include a 't' column", 1)
        cols = []
        for name in reader.fieldnames:
            m = _CSV_COL.match(name)
            if m:
                cols.append((name, m.group(1), m.group(2), m.group(3)))
        n_conv = sum(1 for c in cols if c[1] == "conv")
        n_prox = sum(1 for c in cols if c[1] == "prox")
        n_attn = sum(1 for c in cols if c[1] == "attn")
        if (n_conv, n_prox, n_attn) != (12, 6, 6):
            raise DataError(f"wide CSV needs 12 conv + 6 prox + 6 attn columns, got {n_conv}+{n_prox}+{n_attn}", 1)
        unordered = {}
        for name, mod, i, j in cols:
            if mod != "conv":
                unordered[(mod, frozenset((i, j)))] = name
        default_sid = path.stem
        for line_no, row in enumerate(reader, start=2):
            sid = row.get("session") or default_sid
            b = builders.setdefault(sid, _SessionBuilder(sid))
            try:
                t = int(row["t"])
            except (TypeError, ValueError):
                raise DataError(f"non-integer t {row.get('t')!r}", line_no) from None
            for name, mod, i, j in cols:
                if mod != "conv":
                    continue
                conv = _as_bool(row[name], line_no, name)
                key = frozenset((i, j))
                prox = _as_bool(row[unordered[("prox", key)]], line_no, "prox")
                attn = _as_bool(row[unordered[("attn", key)]], line_no, "attn")
                b.add_pair(line_no, t, i, j, conv, prox, attn)
    return builders


def load_sessions(path, schema: str = "jsonl", config: IngestConfig | None = None) -> list[SessionData]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if schema not in SCHEMAS:
        raise ValidationError(f"unsupported schema {schema!r}; expected one of {SCHEMAS}")
    config = config or IngestConfig()
    builders = _read_jsonl(path) if schema == "jsonl" else _read_csv(path)
    return [b.build(config) for b in builders.values()]


def load_session(path, schema: str = "jsonl", config: IngestConfig | None = None, session_id: str | None = None) -> SessionData:
    sessions = load_sessions(path, schema, config)
    if session_id is not None:
        for s in sessions:
            if s.session_id == session_id:
                return s
        raise DataError(f"session {session_id!r} not found in {path}")
    if len(sessions) != 1:
        raise DataError(f"{path} holds {len(sessions)} sessions; pass session_id")
    return sessions[0]


def segment_windows(session: SessionData, window_len: int = DEFAULT_WINDOW_LEN, stride: int = DEFAULT_STRIDE) -> list[WindowSeries]:
    """Fixed-length overlapping windows; a trailing partial window is dropped."""
    if window_len <= 0 or stride <= 0:
        raise ValidationError("window_len and stride must be positive")
    total = session.n_seconds
    if total < window_len:
        raise ValidationError(f"session {session.session_id!r} has {total} s, shorter than one {window_len} s window")
    n_windows = (total - window_len) // stride + 1
    windows = []
    for w in range(n_windows):
        s, e = w * stride, w * stride + window_len
        windows.append(WindowSeries(
            window_index=w,
            start_t=s,
            end_t=e,
            session_id=session.session_id,
            roster=session.roster,
            conv=session.conv[s:e],
            prox=session.prox[s:e],
            attn=session.attn[s:e],
            gaps=session.gaps[s:e],
            speaking=None if session.speaking is None else session.speaking[s:e],
            positions=None if session.positions is None else session.positions[s:e],
            gaze=None if session.gaze is None else session.gaze[s:e],
        ))
    return windows


def flatten_windows(windows: Iterable[WindowSeries]) -> SessionData:
    """Stitch windows back into a session covering their union of seconds."""
    windows = list(windows)
    if not windows:
        raise ValidationError("no windows to flatten")
    first = windows[0]
    total = max(w.end_t for w in windows)
    n = len(first.roster)
    conv = np.zeros((total, n, n), dtype=bool)
    prox = np.zeros_like(conv)
    attn = np.zeros_like(conv)
    gaps = np.ones(total, dtype=bool)
    for w in windows:
        conv[w.start_t:w.end_t] = w.conv
        prox[w.start_t:w.end_t] = w.prox
        attn[w.start_t:w.end_t] = w.attn
        gaps[w.start_t:w.end_t] = w.gaps
    return SessionData(first.session_id, first.roster, conv, prox, attn, gaps)


def write_jsonl_session(session: SessionData, path, append: bool = False) -> None:
    """Write a session back to the canonical JSONL pair format (all 12 ordered pairs)."""
    mode = "a" if append else "w"
    r = session.roster
    with open(path, mode, encoding="utf-8") as fh:
        for t in range(session.n_seconds):
            if session.gaps[t]:
                continue
            for i in range(len(r)):
                for j in range(len(r)):
                    if i == j:
                        continue
                    fh.write(json.dumps({
                        "session": session.session_id, "t": t, "i": r[i], "j": r[j],
                        "conv": int(session.conv[t, i, j]), "prox": int(session.prox[t, i, j]),
                        "attn": int(session.attn[t, i, j]),
                    }, separators=(",", ":")) + "\n")
            if session.speaking is not None or session.positions is not None:
                for k, p in enumerate(r):
                    rec = {"session": session.session_id, "t": t, "p": p}
                    if session.speaking is not None and np.isfinite(session.speaking[t, k]):
                        rec["speaking"] = int(session.speaking[t, k])
                    if session.positions is not None and np.all(np.isfinite(session.positions[t, k])):
                        rec["x"] = round(float(session.positions[t, k, 0]), 4)
                        rec["y"] = round(float(session.positions[t, k, 1]), 4)
                    if session.gaze is not None and session.gaze[t, k] is not None:
                        rec["gaze"] = session.gaze[t, k]
                    if t in session.task_state and k == 0:
                        rec["task"] = session.task_state[t]
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
