import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcallm.llmio import (
    LEVEL_PERSIST,
    LEVEL_STRICT,
    LEVEL_SUMMARY,
    LEVEL_TOLERANT,
    BackendConfig,
    BackendError,
    EchoBackend,
    HttpBackend,
    NoisyBackend,
    ScriptedBackend,
    decode_cells,
    encode_cells,
    grid_from_indicators,
    grid_from_triple,
    grid_to_sociograms,
    make_backend,
    parse_response,
    serialize_grid,
    serialize_triple,
)
from mcallm.sociogram import SociogramTriple, binarize
from mcallm.validation import ValidationError

from conftest import ROSTER, random_binary_triple


def ctx(triple=None, session="g01", window=3):
    triple = triple if triple is not None else random_binary_triple(np.random.default_rng(0))
    return SimpleNamespace(session_id=session, window_index=window, last_window=triple)


def random_grid(rng, p=0.5):
    conv = rng.random((32, 4, 4)) < p
    prox = rng.random((32, 4, 4)) < p
    attn = rng.random((32, 4, 4)) < p
    return grid_from_indicators(conv, prox, attn, ROSTER)


# -- serialization and parsing ---------------------------------------------------


def test_serialization_shape():
    text = serialize_grid(random_grid(np.random.default_rng(0)))
    lines = text.splitlines()
    assert lines[0] == "Pair A->B:"
    assert lines[1].startswith("t=1: C=")
    assert text.count("Pair ") == 12
    assert sum(1 for l in lines if l.startswith("t=")) == 12 * 32
    assert text.endswith("\n")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_is_exact_at_strict_level(seed):
    grid = random_grid(np.random.default_rng(seed))
    back = parse_response(serialize_grid(grid), ROSTER)
    assert np.array_equal(back.cells, grid.cells)
    assert back.coverage == 1.0
    assert back.max_level == LEVEL_STRICT


def test_symmetric_channels_are_or_symmetrized():
    z = np.zeros((32, 4, 4), dtype=bool)
    prox = z.copy()
    prox[0, 0, 1] = True
    g = grid_from_indicators(z, prox, z, ROSTER)
    assert g.cells[0, 1, 0, 1] and g.cells[1, 0, 0, 1]


def test_tolerant_formatting_is_level_one():
    text = "**pair (a, b)**\n T = 1 : c: yes ; p: no ; s: 1\n"
    g = parse_response(text, ROSTER)
    assert g.cells[0, 1, 0].tolist() == [True, False, True]
    assert g.parsed[0, 1, 0]
    assert g.fallback_level["A->B"] == LEVEL_PERSIST  # the remaining 31 seconds
    full = "\n".join(["Pair a to b"] + [f"t{s}) C=y, P=n, S=n" for s in range(1, 33)])
    g2 = parse_response(full, ROSTER)
    assert g2.fallback_level["A->B"] == LEVEL_TOLERANT
    assert g2.cells[0, 1, :, 0].all()


def test_summary_row_fills_missing_seconds():
    text = "Pair A->B:\nthey keep talking and stay close, shared attention\n"
    g = parse_response(text, ROSTER)
    assert g.fallback_level["A->B"] == LEVEL_SUMMARY
    assert g.cells[0, 1].all()
    assert not g.parsed[0, 1].any()
    text = "Pair A->B:\nC=N, P=Y, S=N throughout\n"
    g = parse_response(text, ROSTER)
    assert g.cells[0, 1, :, 1].all() and not g.cells[0, 1, :, 0].any()


def test_empty_response_falls_back_to_persistence():
    last = random_binary_triple(np.random.default_rng(4))
    g = parse_response("", ROSTER, fallback=last)
    assert g.coverage == 0.0 and g.flagged
    assert set(g.fallback_level.values()) == {LEVEL_PERSIST}
    weighted, binary = grid_to_sociograms(g)
    assert binary.equals(binarize(last))


def test_first_occurrence_wins_and_out_of_range_ignored():
    text = "Pair A->B:\nt=1: C=Y, P=N, S=N\nt=1: C=N, P=N, S=N\nt=40: C=Y, P=Y, S=Y\n"
    g = parse_response(text, ROSTER)
    assert g.cells[0, 1, 0, 0]
    assert g.parsed[0, 1].sum() == 1


def test_unknown_participants_are_ignored():
    g = parse_response("Pair A->Z:\nt=1: C=Y, P=Y, S=Y\n", ROSTER)
    assert not g.parsed.any()


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=400))
def test_parser_never_raises(text):
    g = parse_response(text, ROSTER)
    assert 0.0 <= g.coverage <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_coverage_counts_parsed_lines(seed, drop):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng)
    kept = [l for l in serialize_grid(grid).splitlines() if not l.startswith("t=") or rng.random() >= drop]
    g = parse_response("\n".join(kept), ROSTER)
    n_lines = sum(1 for l in kept if l.startswith("t="))
    assert g.coverage == pytest.approx(n_lines / (12 * 32))


def test_grid_to_sociograms_counts_seconds():
    z = np.zeros((32, 4, 4), dtype=bool)
    conv = z.copy()
    conv[:8, 0, 1] = True
    g = grid_from_indicators(conv, z, z, ROSTER)
    weighted, binary = grid_to_sociograms(g, window_index=7)
    assert weighted.conv[0, 1] == 0.25 and binary.conv[0, 1] == 1.0
    assert weighted.window_index == 7


def test_triple_serialization_is_constant_rows():
    t = random_binary_triple(np.random.default_rng(1))
    g = grid_from_triple(t)
    assert (g.cells == g.cells[:, :, :1, :]).all()
    assert serialize_triple(t) == serialize_grid(g)


def test_cell_hex_round_trip():
    cells = random_grid(np.random.default_rng(3)).cells
    assert np.array_equal(decode_cells(encode_cells(cells)), cells)


# -- mock backends ---------------------------------------------------------------


def test_echo_repeats_last_window():
    c = ctx()
    out = EchoBackend().complete("prompt", c, 5)
    assert out.request_id == "g01-w3-r5"
    g = parse_response(out.text, ROSTER)
    assert grid_to_sociograms(g)[1].equals(binarize(c.last_window))


def test_noisy_zero_equals_echo_and_is_seeded():
    c = ctx()
    assert NoisyBackend(0.0).complete("p", c, 0).text == EchoBackend().complete("p", c, 0).text
    a = NoisyBackend(0.3, seed=2).complete("p", c, 0).text
    b = NoisyBackend(0.3, seed=2).complete("p", c, 9).text
    assert a == b
    assert a != NoisyBackend(0.3, seed=3).complete("p", c, 0).text


def test_noisy_flip_rate_matches_p():
    c = ctx()
    echo = EchoBackend().complete("p", c, 0).text
    diffs = total = 0
    for w in range(40):
        noisy = NoisyBackend(0.3, seed=0).complete("p", ctx(c.last_window, window=w), 0).text
        for x, y in zip(echo, noisy):
            if x != y:
                diffs += 1
        total += echo.count("=Y") + echo.count("=N")
    assert diffs / total == pytest.approx(0.3, abs=0.01)


def test_scripted_backend_and_exhaustion(tmp_path):
    script = tmp_path / "s.jsonl"
    script.write_text('{"request_index": 0, "response_text": "hello"}\n')
    b = ScriptedBackend(script)
    assert b.complete("p", ctx(), 0).text == "hello"
    with pytest.raises(BackendError) as exc:
        b.complete("p", ctx(), 1)
    assert exc.value.reason == "script_exhausted"
    assert exc.value.request_id == "g01-w3-r1"


def test_backend_config_validation():
    with pytest.raises(ValidationError):
        BackendConfig(kind="telepathy")
    with pytest.raises(ValidationError):
        BackendConfig(kind="mock_scripted")
    with pytest.raises(ValidationError):
        BackendConfig(flip_prob=2.0)
    assert BackendConfig(kind="mock:noisy").kind == "mock_noisy"
    assert isinstance(make_backend(BackendConfig()), EchoBackend)


# -- http backend ------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    plan: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.headers["X-Request-Id"], body))
        status, payload = type(self).plan.pop(0) if type(self).plan else (200, {"choices": [{"text": "ok"}]})
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.plan, _Handler.seen = [], []
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def test_http_success_sends_payload_and_request_id(server):
    _, url = server
    b = HttpBackend(BackendConfig(kind="http", endpoint=url, model="m1"))
    out = b.complete("the prompt", ctx(), 2)
    assert out.text == "ok" and out.attempts == 1
    rid, body = _Handler.seen[0]
    assert rid == "g01-w3-r2"
    assert body == {"model": "m1", "prompt": "the prompt", "temperature": 0.0, "max_tokens": 4096}
    assert 0 <= out.latency.ttfb_s <= out.latency.total_s


def test_http_retries_server_errors_with_backoff(server):
    _, url = server
    _Handler.plan = [(500, {}), (503, {}), (200, {"choices": [{"message": {"content": "fine"}}]})]
    delays = []
    b = HttpBackend(BackendConfig(kind="http", endpoint=url, backoff_base=0.5), sleep=delays.append)
    out = b.complete("p", ctx(), 0)
    assert out.text == "fine" and out.attempts == 3
    assert delays == [0.5, 1.0]


def test_http_retries_exhausted(server):
    _, url = server
    _Handler.plan = [(500, {})] * 10
    delays = []
    b = HttpBackend(BackendConfig(kind="http", endpoint=url, retries=4, backoff_base=1.0, backoff_max=3.0),
                    sleep=delays.append)
    with pytest.raises(BackendError) as exc:
        b.complete("p", ctx(), 0)
    assert exc.value.reason == "retries_exhausted"
    assert delays == [1.0, 2.0, 3.0, 3.0]
    assert len(_Handler.seen) == 5


def test_http_client_error_is_not_retried(server):
    _, url = server
    _Handler.plan = [(404, {})]
    delays = []
    b = HttpBackend(BackendConfig(kind="http", endpoint=url), sleep=delays.append)
    with pytest.raises(BackendError) as exc:
        b.complete("p", ctx(), 0)
    assert exc.value.reason == "client_error"
    assert delays == [] and len(_Handler.seen) == 1


def test_http_malformed_body(server):
    _, url = server
    _Handler.plan = [(200, b"not json")]
    b = HttpBackend(BackendConfig(kind="http", endpoint=url), sleep=lambda s: None)
    with pytest.raises(BackendError) as exc:
        b.complete("p", ctx(), 0)
    assert exc.value.reason == "bad_response"


def test_http_connection_refused_is_retried():
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    delays = []
    b = HttpBackend(BackendConfig(kind="http", endpoint=f"http://127.0.0.1:{port}", retries=2), sleep=delays.append)
    with pytest.raises(BackendError) as exc:
        b.complete("p", ctx(), 0)
    assert exc.value.reason == "retries_exhausted"
    assert len(delays) == 2
