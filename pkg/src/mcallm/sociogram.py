"""Per-window sociograms, structural network metrics and weighted Jaccard similarity.

A window produces three 4x4 weighted adjacency matrices: conversation
(directed, row speaks toward column), proximity and shared attention (both
undirected).  Weights are the fraction of window seconds the indicator was on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mcallm.validation import ValidationError, check_same_shape, check_square_matrix

MODALITIES = ("conv", "prox", "attn")
DIRECTED = {"conv": True, "prox": False, "attn": False}
DEFAULT_BINARY_THRESHOLD = 1.0 / 32.0


@dataclass(frozen=True, eq=False)
class SociogramTriple:
    conv: np.ndarray
    prox: np.ndarray
    attn: np.ndarray
    window_index: int = 0
    is_predicted: bool = False
    roster: tuple[str, ...] = ("A", "B", "C", "D")

    def __getitem__(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise KeyError(modality)
        return getattr(self, modality)

    @property
    def n(self) -> int:
        return self.conv.shape[0]

    def matrices(self) -> dict[str, np.ndarray]:
        return {m: self[m] for m in MODALITIES}

    def equals(self, other: "SociogramTriple") -> bool:
        """Matrix equality, ignoring window index and provenance flags."""
        return all(np.array_equal(self[m], other[m]) for m in MODALITIES)

    def with_flags(self, window_index: int | None = None, is_predicted: bool | None = None) -> "SociogramTriple":
        kw = {}
        if window_index is not None:
            kw["window_index"] = window_index
        if is_predicted is not None:
            kw["is_predicted"] = is_predicted
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = {
            "window_index": int(self.window_index),
            "is_predicted": bool(self.is_predicted),
            "roster": list(self.roster),
        }
        for m in MODALITIES:
            out[m] = [[float(v) for v in row] for row in self[m]]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SociogramTriple":
        return cls(
            conv=np.asarray(d["conv"], dtype=float),
            prox=np.asarray(d["prox"], dtype=float),
            attn=np.asarray(d["attn"], dtype=float),
            window_index=int(d.get("window_index", 0)),
            is_predicted=bool(d.get("is_predicted", False)),
            roster=tuple(d.get("roster", ("A", "B", "C", "D"))),
        )

    @classmethod
    def zeros(cls, n: int = 4, **kw) -> "SociogramTriple":
        return cls(conv=np.zeros((n, n)), prox=np.zeros((n, n)), attn=np.zeros((n, n)), **kw)


@dataclass(frozen=True)
class NetworkMetrics:
    density: float
    reciprocity: float
    eigenvector_centrality: tuple[float, ...]
    clustering: float
    directed: bool = False
    centrality_converged: bool = True

    def to_dict(self) -> dict:
        return {
            "density": self.density,
            "reciprocity": self.reciprocity,
            "eigenvector_centrality": list(self.eigenvector_centrality),
            "clustering": self.clustering,
            "directed": self.directed,
            "centrality_converged": self.centrality_converged,
        }


@dataclass(frozen=True)
class FusedMetrics:
    density: float
    reciprocity: float
    clustering: float
    pca_weights: dict[str, float] = field(default_factory=dict)
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "density": self.density,
            "reciprocity": self.reciprocity,
            "clustering": self.clustering,
            "pca_weights": dict(self.pca_weights),
            "fallback": self.fallback,
        }


def _symmetric_or(indicator: np.ndarray) -> np.ndarray:
    """OR an indicator stack (..., n, n) with its transpose."""
    return np.logical_or(indicator, np.swapaxes(indicator, -1, -2))


def build_sociograms(window, window_len: int | None = None) -> SociogramTriple:
    """Count per-second indicators of one window into a weighted triple.

    ``window`` needs boolean ``conv``, ``prox`` and ``attn`` arrays of shape
    (seconds, n, n) plus ``window_index`` and ``roster`` attributes.  Gap
    seconds are already all-false in those arrays.
    """
    conv = np.asarray(window.conv, dtype=bool)
    length = window_len or conv.shape[0]
    n = conv.shape[1]
    off = ~np.eye(n, dtype=bool)
    weights = {"conv": conv.sum(axis=0) / length}
    for m in ("prox", "attn"):
        ind = _symmetric_or(np.asarray(getattr(window, m), dtype=bool))
        weights[m] = ind.sum(axis=0) / length
    for m in MODALITIES:
        weights[m] = np.where(off, weights[m], 0.0)
    return SociogramTriple(
        window_index=int(window.window_index),
        roster=tuple(window.roster),
        **weights,
    )


def binarize(g: SociogramTriple, threshold: float = DEFAULT_BINARY_THRESHOLD) -> SociogramTriple:
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    return replace(
        g,
        conv=(g.conv >= threshold).astype(float),
        prox=(g.prox >= threshold).astype(float),
        attn=(g.attn >= threshold).astype(float),
    )


def eigenvector_centrality(adjacency: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> tuple[np.ndarray, bool]:
    """Power iteration on the binarized adjacency, in-edge convention.

    Iterates ``x <- x + A^T x`` (the shift keeps bipartite graphs from
    oscillating) and normalizes to unit L2 norm.  Returns the vector and
    whether the L1 change dropped below ``n * tol``.  An edgeless graph has
    no dominant eigenvector; the uniform unit vector is returned instead.
    """
    a = (np.asarray(adjacency) != 0).astype(float)
    np.fill_diagonal(a, 0.0)
    n = a.shape[0]
    uniform = np.full(n, 1.0 / np.sqrt(n))
    if not a.any():
        return uniform, True
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        x_new = x + a.T @ x
        x_new /= np.linalg.norm(x_new)
        if np.abs(x_new - x).sum() < n * tol:
            return x_new, True
        x = x_new
    return x, False


def clustering_coefficient(adjacency: np.ndarray) -> float:
    """Mean local clustering of the OR-symmetrized binary graph."""
    a = (np.asarray(adjacency) != 0)
    a = np.logical_or(a, a.T).astype(float)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    triangles = np.diag(a @ a @ a) / 2.0
    possible = deg * (deg - 1) / 2.0
    local = np.divide(triangles, possible, out=np.zeros_like(triangles), where=deg >= 2)
    return float(local.mean())


def network_metrics(g, directed: bool, density_mode: str = "binary") -> NetworkMetrics:
    a = check_square_matrix(g, "sociogram")
    n = a.shape[0]
    a = a.copy()
    np.fill_diagonal(a, 0.0)
    edges = a != 0
    if directed:
        mask = ~np.eye(n, dtype=bool)
    else:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        edges = np.logical_or(edges, edges.T)
    n_slots = mask.sum()
    if density_mode == "binary":
        density = edges[mask].sum() / n_slots if n_slots else 0.0
    elif density_mode == "weighted":
        vals = np.maximum(a, a.T) if not directed else a
        density = vals[mask].mean() if n_slots else 0.0
    else:
        raise ValidationError(f"unknown density_mode {density_mode!r}")

    if directed:
        n_edges = edges.sum()
        reciprocated = np.logical_and(edges, edges.T).sum()
        reciprocity = reciprocated / n_edges if n_edges else 0.0
    else:
        reciprocity = 1.0

    centrality, converged = eigenvector_centrality(edges)
    return NetworkMetrics(
        density=float(density),
        reciprocity=float(reciprocity),
        eigenvector_centrality=tuple(float(v) for v in centrality),
        clustering=clustering_coefficient(edges),
        directed=directed,
        centrality_converged=converged,
    )


def triple_metrics(g: SociogramTriple, density_mode: str = "binary") -> dict[str, NetworkMetrics]:
    return {m: network_metrics(g[m], DIRECTED[m], density_mode) for m in MODALITIES}


# features that enter the fusion PCA, per modality; reciprocity is degenerate
# (constant 1.0) for the undirected modalities and left out
_FUSION_FEATURES = {
    "conv": ("density", "reciprocity", "clustering"),
    "prox": ("density", "clustering"),
    "attn": ("density", "clustering"),
}


def fusion_weights(history: Sequence[dict[str, NetworkMetrics]]) -> tuple[dict[str, float], bool]:
    """Per-modality share of explained variance of the stacked metric history.

    Each principal component's explained-variance ratio is split across
    modalities by the squared loadings of that modality's features.  Returns
    ``(weights, fallback)``; fallback is uniform weights when there are fewer
    than two windows or no variance at all.
    """
    uniform = {m: 1.0 / len(MODALITIES) for m in MODALITIES}
    if len(history) < 2:
        return uniform, True
    columns, owners = [], []
    for m in MODALITIES:
        for feat in _FUSION_FEATURES[m]:
            columns.append([getattr(h[m], feat) for h in history])
            owners.append(m)
    x = np.asarray(columns, dtype=float).T
    cov = np.cov(x, rowvar=False, ddof=1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    total = eigvals.sum()
    if total <= 1e-15:
        return uniform, True
    evr = eigvals / total
    share = (eigvecs ** 2) @ evr
    weights = {m: 0.0 for m in MODALITIES}
    for owner, s in zip(owners, share):
        weights[owner] += float(s)
    norm = sum(weights.values())
    return {m: w / norm for m, w in weights.items()}, False


def fuse_metrics(history: Sequence[dict[str, NetworkMetrics]]) -> FusedMetrics:
    """Fuse the latest window's per-modality metrics with PCA-derived weights."""
    if not history:
        raise ValidationError("metric history is empty")
    weights, fallback = fusion_weights(history)
    current = history[-1]
    density = sum(weights[m] * current[m].density for m in MODALITIES)
    clustering = sum(weights[m] * current[m].clustering for m in MODALITIES)
    directed = [m for m in MODALITIES if DIRECTED[m]]
    wd = sum(weights[m] for m in directed)
    if wd > 0:
        reciprocity = sum(weights[m] * current[m].reciprocity for m in directed) / wd
    else:
        reciprocity = float(np.mean([current[m].reciprocity for m in directed]))
    return FusedMetrics(
        density=float(density),
        reciprocity=float(reciprocity),
        clustering=float(clustering),
        pca_weights=weights,
        fallback=fallback,
    )


def weighted_jaccard(a, b) -> float:
    """Sum of element-wise minima over sum of maxima, off-diagonal entries only.

    Two all-zero matrices are in perfect agreement and score 1.0.
    """
    a = check_square_matrix(a, "a")
    b = check_square_matrix(b, "b")
    check_same_shape(a, b)
    off = ~np.eye(a.shape[0], dtype=bool)
    lo = np.minimum(a, b)[off].sum()
    hi = np.maximum(a, b)[off].sum()
    if hi == 0:
        return 1.0
    return float(lo / hi)


def is_both_empty(a, b) -> bool:
    off = ~np.eye(np.asarray(a).shape[0], dtype=bool)
    return not np.asarray(a)[off].any() and not np.asarray(b)[off].any()
