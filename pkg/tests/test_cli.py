import json
import subprocess
import sys

import pytest

from mcallm.cli import ENDPOINT_ENV, EXIT_BACKEND, EXIT_CONFIG, EXIT_DATA, EXIT_EVAL, EXIT_OK, ExperimentConfig, main
from mcallm.engine import dir_digest


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    test = root / "test.jsonl"
    train = root / "train.jsonl"
    assert main(["synth", "--out", str(test), "--sessions", "2", "--windows", "8", "--seed", "1", "--prefix", "t"]) == 0
    assert main(["synth", "--out", str(train), "--sessions", "3", "--windows", "8", "--seed", "2", "--regimes"]) == 0
    models = root / "models.json"
    assert main(["fit", "--data", str(train), "--out", str(models)]) == 0
    return root, test, train, models


def test_resolve_precedence(monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    cfg = ExperimentConfig.resolve({"seed": 3, "mode": "simulation"}, {"seed": 5, "mode": None})
    assert cfg.seed == 5 and cfg.mode == "simulation"
    monkeypatch.setenv(ENDPOINT_ENV, "http://example.invalid:1")
    assert ExperimentConfig.resolve({"endpoint": "http://a"}, {}).endpoint == "http://example.invalid:1"


def test_run_and_eval_round_trip(data, tmp_path, capsys):
    root, test, train, models = data
    inter = tmp_path / "inter"
    sim = tmp_path / "sim"
    assert main(["run", "--data", str(test), "--models", str(models), "--out", str(inter),
                 "--predictor", "persistence"]) == EXIT_OK
    assert main(["run", "--data", str(test), "--train-data", str(train), "--models", str(models),
                 "--out", str(sim), "--mode", "simulation", "--backend", "mock:noisy", "--flip-prob", "0.2",
                 "--paradigm", "few_shot", "--strategy", "diverse"]) == EXIT_OK
    out_json = tmp_path / "report.json"
    out_csv = tmp_path / "deg.csv"
    capsys.readouterr()
    assert main(["eval", str(inter), str(sim), "--reference", str(inter), "--json", str(out_json),
                 "--csv", str(out_csv)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "HalfLife" in printed and "Method" in printed
    reports = json.loads(out_json.read_text())
    assert [r["mode"] for r in reports] == ["intervention", "simulation"]
    assert out_csv.read_text().startswith("depth,conv,prox,attn")


def test_stratified_needs_training_rates(data, tmp_path):
    root, test, train, models = data
    assert main(["run", "--data", str(test), "--models", str(models), "--out", str(tmp_path / "r"),
                 "--predictor", "stratified_random"]) == EXIT_CONFIG
    assert main(["run", "--data", str(test), "--models", str(models), "--out", str(tmp_path / "r"),
                 "--predictor", "stratified_random", "--train-data", str(train)]) == EXIT_OK


def test_records_are_byte_identical_across_reruns(data, tmp_path):
    root, test, train, models = data
    args = ["run", "--data", str(test), "--models", str(models), "--mode", "simulation",
            "--backend", "mock:noisy", "--flip-prob", "0.3", "--seed", "11"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == EXIT_OK
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["seed"] == 11 and cfg["flip_prob"] == 0.3


def test_config_file_and_unknown_keys(data, tmp_path):
    root, test, train, models = data
    good = tmp_path / "c.yaml"
    good.write_text(f"data: {test}\nmodels: {models}\npredictor: smoothing_3\nproximity_threshold_ft: 1.5\n")
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "r")]) == EXIT_OK
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    assert cfg["predictor"] == "smoothing_3"
    assert cfg["proximity_threshold_m"] == pytest.approx(0.4572)
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: blue\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


@pytest.mark.parametrize("extra,code", [
    (["--backend", "bogus"], EXIT_CONFIG),
    (["--predictor", "oracle"], EXIT_CONFIG),
    (["--temperature", "-1"], EXIT_CONFIG),
])
def test_configuration_errors(data, tmp_path, extra, code):
    root, test, train, models = data
    assert main(["run", "--data", str(test), "--models", str(models), "--out", str(tmp_path / "r")] + extra) == code


def test_data_errors(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"t": 0, "i": "A"\n')
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "m.json")]) == EXIT_DATA
    assert main(["fit", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "m.json")]) == EXIT_DATA


def test_backend_failure_exit_code(data, tmp_path, monkeypatch):
    import socket

    root, test, train, models = data
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    monkeypatch.setenv(ENDPOINT_ENV, f"http://127.0.0.1:{port}")
    out = tmp_path / "r"
    code = main(["run", "--data", str(test), "--models", str(models), "--out", str(out), "--backend", "http",
                 "--retries", "0", "--timeout", "2"])
    assert code == EXIT_BACKEND
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_failed"] == manifest["n_records"]
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["endpoint"] == f"http://127.0.0.1:{port}"


def test_scripted_exhaustion_ends_cascade(data, tmp_path):
    root, test, train, models = data
    script = tmp_path / "s.jsonl"
    script.write_text('{"request_index": 0, "response_text": ""}\n')
    out = tmp_path / "r"
    code = main(["run", "--data", str(test), "--models", str(models), "--out", str(out), "--mode", "simulation",
                 "--backend", "mock:scripted", "--script", str(script)])
    assert code == EXIT_BACKEND
    manifest = json.loads((out / "manifest.json").read_text())
    assert any(v.startswith("backend_error") for v in manifest["terminations"].values())


def test_eval_errors(tmp_path):
    assert main(["eval", str(tmp_path / "nope")]) == EXIT_EVAL


def test_eval_csv_without_reference(data, tmp_path):
    root, test, train, models = data
    assert main(["run", "--data", str(test), "--models", str(models), "--out", str(tmp_path / "r")]) == EXIT_OK
    assert main(["eval", str(tmp_path / "r"), "--csv", str(tmp_path / "d.csv")]) == EXIT_EVAL


def test_export_sft(data, tmp_path):
    root, test, train, models = data
    out = tmp_path / "sft.jsonl"
    assert main(["export-sft", "--data", str(test), "--models", str(models), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 2 * 7


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mcallm.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "mcallm" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "mcallm.cli", "run", "--out", str(tmp_path / "r"),
                           "--backend", "bogus", "--data", "x"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "resolved config" in proc.stderr
