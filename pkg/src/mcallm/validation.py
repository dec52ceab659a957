"""Input validation helpers shared by the estimators and pure functions."""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

ROSTER_SIZE = 4


class ValidationError(ValueError):
    """Raised when input data violates a documented precondition."""


def check_square_matrix(a, name: str = "matrix", allow_negative: bool = False) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    if not allow_negative and np.any(a < 0):
        raise ValidationError(f"{name} contains negative weights")
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


def check_roster(roster: Sequence[str], size: int = ROSTER_SIZE) -> tuple[str, ...]:
    roster = tuple(str(r) for r in roster)
    if len(set(roster)) != len(roster):
        raise ValidationError(f"roster has duplicate ids: {roster}")
    if len(roster) != size:
        raise ValidationError(f"roster must have exactly {size} participants, got {len(roster)}: {roster}")
    return roster


def check_probability(p: float, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"{name} must be in [0, 1], got {p}")
    return p


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def unordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def derived_rng(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``seed`` plus stable keys (strings hashed with crc32).

    Used wherever a draw must not depend on call order, e.g. concurrent windows.
    """
    entropy = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        else:
            entropy.append(int(k))
    return np.random.default_rng(entropy)
