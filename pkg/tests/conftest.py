import numpy as np
import pytest

from mcallm.context import fit_context_models, prepare_session
from mcallm.sociogram import SociogramTriple
from mcallm.synth import SynthConfig, generate_dataset

ROSTER = ("A", "B", "C", "D")


def random_binary_triple(rng: np.random.Generator, n: int = 4, p: float = 0.5, window_index: int = 0) -> SociogramTriple:
    conv = (rng.random((n, n)) < p).astype(float)
    np.fill_diagonal(conv, 0.0)
    mats = {"conv": conv}
    for m in ("prox", "attn"):
        a = np.triu((rng.random((n, n)) < p).astype(float), k=1)
        mats[m] = a + a.T
    return SociogramTriple(window_index=window_index, **mats)


@pytest.fixture(scope="session")
def small_dataset():
    """Four short synthetic groups with regimes, plus fitted context models."""
    cfg = SynthConfig(n_windows=12, regimes=[{"conv": 0.4}, {"conv": 1.8, "attn": 2.0}])
    sessions = generate_dataset(4, cfg, seed=3)
    profiler, segmenter = fit_context_models(sessions, seed=0)
    prepared = [prepare_session(s, profiler, segmenter) for s in sessions]
    return sessions, profiler, segmenter, prepared
