import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import pearsonr
from sklearn.metrics import balanced_accuracy_score, f1_score, matthews_corrcoef, precision_score, recall_score

from mcallm.engine import LLMPredictor, PersistenceBaseline, RunResult, WindowRecord, run
from mcallm.evaluation import (
    ConfusionMetrics,
    EvalError,
    cell_accuracy,
    comparison_table,
    confusion,
    degradation_report,
    elementwise_metrics,
    evaluate,
    half_life,
    pearson_or_none,
    property_preservation,
    similarity_report,
    to_text,
    valid_window_rate,
    write_degradation_csv,
)
from mcallm.llmio import NoisyBackend, ScriptedBackend, serialize_grid, grid_from_indicators
from mcallm.sociogram import SociogramTriple

from conftest import random_binary_triple

bool_lists = st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=200)


@pytest.mark.filterwarnings("ignore::UserWarning")
@settings(max_examples=200, deadline=None)
@given(bool_lists)
def test_confusion_metrics_match_sklearn(pairs):
    p = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    c = confusion(p, t)
    assert c.n == len(pairs)
    kw = dict(zero_division=0)
    assert c.precision == pytest.approx(precision_score(t, p, **kw))
    assert c.recall == pytest.approx(recall_score(t, p, **kw))
    assert c.f1 == pytest.approx(f1_score(t, p, **kw))
    assert c.mcc == pytest.approx(matthews_corrcoef(t, p), abs=1e-12)
    if t.any() and (~t).any():
        assert c.balanced_accuracy == pytest.approx(balanced_accuracy_score(t, p))
    assert -1.0 <= c.mcc <= 1.0


def test_degenerate_confusion_is_zero_not_nan():
    c = ConfusionMetrics(tp=5, fp=3, tn=0, fn=0)
    assert c.mcc == 0.0 and c.specificity == 0.0
    assert ConfusionMetrics(0, 0, 0, 0).f1 == 0.0
    with pytest.raises(EvalError):
        confusion([1, 0], [1])


def test_elementwise_pools_edges_per_modality():
    rng = np.random.default_rng(0)
    pred = [random_binary_triple(rng) for _ in range(5)]
    truth = [random_binary_triple(rng) for _ in range(5)]
    out = elementwise_metrics(pred, truth)
    assert out["conv"].n == 5 * 12
    assert out["prox"].n == out["attn"].n == 5 * 6
    assert out["overall"].n == 5 * 24
    assert out["overall"].tp == sum(out[m].tp for m in ("conv", "prox", "attn"))
    with pytest.raises(EvalError):
        elementwise_metrics(pred, truth[:3])
    with pytest.raises(EvalError):
        elementwise_metrics([], [])


def test_perfect_prediction_scores_one():
    rng = np.random.default_rng(1)
    truth = [random_binary_triple(rng, p=0.4) for _ in range(6)]
    out = elementwise_metrics(truth, truth)
    assert out["overall"].f1 == 1.0 and out["overall"].mcc == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=30), st.integers(0, 1000))
def test_pearson_matches_scipy_or_is_none(x, seed):
    y = list(np.random.default_rng(seed).normal(size=len(x)))
    r = pearson_or_none(x, y)
    if np.ptp(x) == 0:
        assert r is None
    elif r is not None:
        assert r == pytest.approx(pearsonr(x, y).statistic, abs=1e-9)


def test_half_life_cases():
    assert half_life([0.8, 0.6, 0.4, 0.1], [1, 2, 3, 4]) == 3.0
    assert half_life([0.8, 0.8, 0.8], [1, 2, 3]) == math.inf
    assert half_life([0.0, 0.0], [1, 2]) == 2.0  # zero base: first later depth qualifies
    assert half_life([], []) == math.inf


def test_cell_accuracy_hand_case():
    z = np.zeros((4, 4, 32, 3), dtype=bool)
    pred = z.copy()
    pred[0, 1, :16, 0] = True  # half of one conv pair wrong
    acc = cell_accuracy(pred, z)
    assert acc["conv"] == pytest.approx(1 - 16 / (12 * 32))
    assert acc["prox"] == 1.0


def _record(pred, truth, t=1, depth=None, cells=None, truth_cells=None):
    z = np.zeros((4, 4, 32, 3), dtype=bool)
    return WindowRecord(session_id="s", window_index=t, request_index=t - 1, predicted=pred,
                        predicted_binary=pred, truth=truth, source="oracle", cascade_depth=depth,
                        predicted_cells=z if cells is None else cells,
                        truth_cells=z if truth_cells is None else truth_cells)


def test_valid_window_rate_threshold_and_failed_excluded():
    z = np.zeros((4, 4, 32, 3), dtype=bool)
    bad = ~z
    g = SociogramTriple.zeros()
    res = RunResult("intervention", "x", [_record(g, g), _record(g, g, 2, cells=bad)])
    assert valid_window_rate(res) == 0.5
    res.records.append(WindowRecord(session_id="s", window_index=3, request_index=2, predicted=None,
                                    predicted_binary=None, truth=g, source="oracle", cascade_depth=None,
                                    failed=True))
    assert valid_window_rate(res) == 0.5


def test_similarity_report_both_empty_counts():
    g = SociogramTriple.zeros()
    res = RunResult("intervention", "x", [_record(g, g), _record(g, g, 2)])
    rep = similarity_report(res)
    assert rep.per_modality == {"conv": 1.0, "prox": 1.0, "attn": 1.0}
    assert rep.both_empty == {"conv": 2, "prox": 2, "attn": 2}
    with pytest.raises(EvalError):
        similarity_report(RunResult("intervention", "x", []))


def test_property_preservation_needs_three_windows():
    g = SociogramTriple.zeros()
    with pytest.raises(EvalError):
        property_preservation(RunResult("intervention", "x", [_record(g, g)] * 2))


def test_perfect_oracle_cascade_has_no_degradation(small_dataset):
    prepared = small_dataset[3]
    script, idx = {}, 0
    for p in prepared:
        for t in range(1, p.n_windows):
            w = p.windows[t]
            script[idx] = serialize_grid(grid_from_indicators(w.conv, w.prox, w.attn, p.roster))
            idx += 1
    oracle = LLMPredictor(ScriptedBackend(script))
    inter = run(prepared, oracle, "intervention")
    sim = run(prepared, LLMPredictor(ScriptedBackend(script)), "simulation", handoff=1)
    ref = similarity_report(inter)
    deg = degradation_report(ref, sim)
    for m in ("conv", "prox", "attn"):
        assert ref.per_modality[m] == 1.0
        assert deg.relative_degradation[m] == 0.0
        assert deg.half_life[m] == math.inf
        assert deg.spearman[m] is None
    assert valid_window_rate(sim) == 1.0


def test_evaluate_report_renders(small_dataset, tmp_path):
    prepared = small_dataset[3]
    inter = run(prepared, PersistenceBaseline(), "intervention")
    sim = run(prepared, LLMPredictor(NoisyBackend(0.2, seed=0)), "simulation")
    ref = evaluate(inter)
    rep = evaluate(sim, intervention=ref.similarity)
    assert rep.degradation is not None
    text = to_text(rep)
    assert "HalfLife" in text and "MCC" in text
    table = comparison_table([ref, rep])
    assert "persistence" in table and len(table.splitlines()) == 4
    d = rep.to_dict()
    assert d["metadata"]["n_failed"] == 0
    write_degradation_csv(rep.degradation, tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "depth,conv,prox,attn"
    assert len(rows) == 1 + len(rep.degradation.depths)
