"""Command-line entry point: synth, fit, run, eval, export-sft.

Settings resolve as command-line flags over a YAML/JSON config file over
built-in defaults; the resolved settings are printed to stderr at startup
and frozen into every run directory.

Exit codes: 0 ok, 2 configuration, 3 data, 4 backend, 5 evaluation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from mcallm import __version__
from mcallm.context import fit_context_models, load_models, load_phase_sidecar, prepare_session, save_models
from mcallm.engine import (
    LLMPredictor,
    RunDirError,
    load_run,
    make_baseline,
    run,
    save_run,
)
from mcallm.evaluation import EvalError, comparison_table, evaluate, similarity_report, to_text, write_degradation_csv
from mcallm.ingest import DataError, IngestConfig, load_sessions, write_jsonl_session
from mcallm.llmio import BackendConfig, BackendError, make_backend
from mcallm.promptgen import DEFAULT_TOKEN_BUDGET, build_example_pool, export_sft_dataset
from mcallm.synth import SynthConfig, generate_dataset
from mcallm.validation import ValidationError

logger = logging.getLogger("mcallm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_EVAL = 0, 2, 3, 4, 5
ENDPOINT_ENV = "MCALLM_ENDPOINT"


class ConfigError(ValidationError):
    pass


@dataclass
class ExperimentConfig:
    data: str | None = None
    schema: str = "jsonl"
    train_data: str | None = None
    models: str | None = None
    phase_labels: str | None = None
    window_len: int = 32
    stride: int = 16
    proximity_threshold_m: float = 0.4572
    mode: str = "intervention"
    predictor: str = "llm"
    backend: str = "mock:echo"
    endpoint: str = "http://127.0.0.1:8000"
    endpoint_path: str = "/v1/completions"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 4096
    timeout: float = 30.0
    retries: int = 3
    script: str | None = None
    flip_prob: float = 0.0
    paradigm: str = "zero_shot"
    strategy: str = "random"
    fixed_example: bool = False
    level: str = "full"
    template_set: str = "default"
    handoff: int = 1
    horizon: int | None = None
    workers: int = 1
    clusters: int = 3
    phases: int = 3
    seed: int = 0
    out: str | None = None
    budget: int = DEFAULT_TOKEN_BUDGET

    @classmethod
    def resolve(cls, file_values: dict, cli_values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = {**file_values, **{k: v for k, v in cli_values.items() if k in known and v is not None}}
        cfg = cls(**merged)
        if os.environ.get(ENDPOINT_ENV):
            cfg.endpoint = os.environ[ENDPOINT_ENV]
        return cfg

    def backend_config(self) -> BackendConfig:
        return BackendConfig(
            kind=self.backend, endpoint=self.endpoint, path=self.endpoint_path, model=self.model,
            temperature=self.temperature, max_tokens=self.max_tokens, timeout=self.timeout,
            retries=self.retries, script_path=self.script, flip_prob=self.flip_prob, seed=self.seed,
        )

    def ingest_config(self) -> IngestConfig:
        return IngestConfig(window_len=self.window_len, stride=self.stride,
                            proximity_threshold_m=self.proximity_threshold_m)


def _read_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        values = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    if "proximity_threshold_ft" in values:
        values["proximity_threshold_m"] = float(values.pop("proximity_threshold_ft")) * 0.3048
    return values


def _print_config(cfg: ExperimentConfig) -> None:
    print("resolved config: " + json.dumps(asdict(cfg), sort_keys=True), file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands


def _sessions(path: str | None, cfg: ExperimentConfig, what: str = "data"):
    if not path:
        raise ConfigError(f"--{what.replace('_', '-')} is required")
    return load_sessions(path, cfg.schema, cfg.ingest_config())


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    if not cfg.out:
        raise ConfigError("--out is required")
    base = SynthConfig()
    rates = dict(base.base_rates)
    flips = dict(base.flip_probs)
    for m in ("conv", "prox", "attn"):
        if getattr(args, f"{m}_rate") is not None:
            rates[m] = getattr(args, f"{m}_rate")
        if getattr(args, f"{m}_autocorr") is not None:
            flips[m] = 1.0 - getattr(args, f"{m}_autocorr")
        elif getattr(args, f"{m}_flip") is not None:
            flips[m] = getattr(args, f"{m}_flip")
    regimes = [{"conv": 0.5, "prox": 0.5, "attn": 0.5}, {"conv": 1.0}, {"conv": 1.6, "prox": 1.4, "attn": 2.0}] if args.regimes else []
    scfg = SynthConfig(n_windows=args.windows, base_rates=rates, flip_probs=flips, regimes=regimes,
                       window_len=cfg.window_len, stride=cfg.stride)
    sessions = generate_dataset(args.sessions, scfg, cfg.seed, prefix=args.prefix)
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(sessions):
        write_jsonl_session(s, cfg.out, append=k > 0)
    print(f"wrote {len(sessions)} sessions x {scfg.n_seconds} s to {cfg.out}")
    return EXIT_OK


def cmd_fit(args, cfg: ExperimentConfig) -> int:
    if not cfg.out:
        raise ConfigError("--out is required")
    sessions = _sessions(cfg.data, cfg)
    profiler, segmenter = fit_context_models(sessions, cfg.clusters, cfg.phases, cfg.seed, cfg.window_len, cfg.stride)
    save_models(cfg.out, profiler, segmenter)
    fallback = ", ".join(profiler.fallback_domains_) or "none"
    print(f"fitted profiles on {len(sessions)} sessions (fallback domains: {fallback}); "
          f"{segmenter.n_phases_} phases; wrote {cfg.out}")
    return EXIT_OK


def _prepare(sessions, cfg: ExperimentConfig, profiler, segmenter):
    external = load_phase_sidecar(cfg.phase_labels) if cfg.phase_labels else None
    return [prepare_session(s, profiler, None if external else segmenter, external, cfg.window_len, cfg.stride)
            for s in sessions]


def _models(cfg: ExperimentConfig, fallback_sessions):
    if cfg.models:
        if not Path(cfg.models).is_file():
            raise ConfigError(f"model artifact {cfg.models} not found")
        profiler, segmenter = load_models(cfg.models)
        if profiler is None or segmenter is None:
            raise ConfigError(f"model artifact {cfg.models} lacks profile or phase models")
        return profiler, segmenter
    logger.warning("no --models given; fitting context models on the evaluation data")
    return fit_context_models(fallback_sessions, cfg.clusters, cfg.phases, cfg.seed, cfg.window_len, cfg.stride)


def _predictor(cfg: ExperimentConfig, train_prepared):
    if cfg.predictor != "llm":
        base = make_baseline(cfg.predictor, cfg.seed)
        if cfg.predictor in ("stratified", "stratified_random"):
            if not train_prepared:
                raise ConfigError("stratified_random needs --train-data to estimate edge rates")
            base.fit(train_prepared)
        return base
    pool = build_example_pool(train_prepared) if cfg.paradigm == "few_shot" else None
    if cfg.paradigm == "few_shot" and not pool:
        raise ConfigError("few_shot paradigm needs --train-data for the example pool")
    backend = make_backend(cfg.backend_config())
    return LLMPredictor(backend, cfg.paradigm, cfg.strategy, pool, cfg.template_set, cfg.level, cfg.seed,
                        cfg.fixed_example)


def cmd_run(args, cfg: ExperimentConfig) -> int:
    if not cfg.out:
        raise ConfigError("--out is required")
    cfg.backend_config()  # validate early
    sessions = _sessions(cfg.data, cfg)
    train = load_sessions(cfg.train_data, cfg.schema, cfg.ingest_config()) if cfg.train_data else []
    profiler, segmenter = _models(cfg, train or sessions)
    prepared = _prepare(sessions, cfg, profiler, segmenter)
    train_prepared = [prepare_session(s, profiler, segmenter, None, cfg.window_len, cfg.stride) for s in train]
    predictor = _predictor(cfg, train_prepared)
    result = run(prepared, predictor, cfg.mode, cfg.handoff, cfg.horizon, cfg.workers, asdict(cfg))
    save_run(result, cfg.out, seeds={"seed": cfg.seed, "backend_seed": cfg.seed})
    failed = sum(r.failed for r in result.records)
    print(f"{result.mode} run: {len(result.records)} windows, {failed} failed -> {cfg.out}")
    incomplete = [s for s, why in result.terminations.items() if why != "completed"]
    if failed or incomplete:
        logger.error("backend failures: %d windows; incomplete cascades: %s", failed, incomplete)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if not args.run_dirs:
        raise ConfigError("eval needs at least one run directory")
    results = [load_run(d) for d in args.run_dirs]
    reference = None
    if args.reference:
        reference = similarity_report(load_run(args.reference))
    reports = []
    for d, res in zip(args.run_dirs, results):
        name = Path(d).name
        reports.append(evaluate(res, name=name, intervention=reference if res.mode == "simulation" else None))
    for r in reports:
        print(to_text(r))
        print()
    if len(reports) > 1:
        print(comparison_table(reports))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.csv:
        degr = [r for r in reports if r.degradation is not None]
        if not degr:
            raise EvalError("--csv needs a simulation run and --reference")
        write_degradation_csv(degr[0].degradation, args.csv)
    return EXIT_OK


def cmd_export_sft(args, cfg: ExperimentConfig) -> int:
    if not cfg.out:
        raise ConfigError("--out is required")
    sessions = _sessions(cfg.data, cfg)
    profiler, segmenter = _models(cfg, sessions)
    prepared = _prepare(sessions, cfg, profiler, segmenter)
    records = export_sft_dataset(prepared, cfg.out, cfg.budget, cfg.template_set, cfg.level)
    over = sum(r.over_budget for r in records)
    print(f"wrote {len(records)} SFT records ({over} over the {cfg.budget}-token budget) to {cfg.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--window-len", dest="window_len", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--proximity-threshold-m", dest="proximity_threshold_m", type=float)
    p.add_argument("--log-level", default="WARNING")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data")
    p.add_argument("--schema", choices=("jsonl", "csv"))
    p.add_argument("--models", help="fitted context model artifact (JSON)")
    p.add_argument("--phase-labels", dest="phase_labels", help="JSONL phase-label sidecar")
    p.add_argument("--clusters", type=int)
    p.add_argument("--phases", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcallm", description="Sociogram prediction experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--sessions", type=int, default=12)
    p.add_argument("--windows", type=int, default=34)
    p.add_argument("--prefix", default="g")
    p.add_argument("--regimes", action="store_true", help="add low/medium/high activity regimes")
    for m in ("conv", "prox", "attn"):
        p.add_argument(f"--{m}-rate", dest=f"{m}_rate", type=float)
        p.add_argument(f"--{m}-flip", dest=f"{m}_flip", type=float)
        p.add_argument(f"--{m}-autocorr", dest=f"{m}_autocorr", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit behavioral profiles and phases")
    _add_common(p)
    _add_data(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("run", help="intervention or simulation run")
    _add_common(p)
    _add_data(p)
    p.add_argument("--train-data", dest="train_data", help="other groups: example pool and baseline rates")
    p.add_argument("--mode", choices=("intervention", "simulation"))
    p.add_argument("--predictor", help="llm | persistence | smoothing_3 | smoothing_5 | stratified_random")
    p.add_argument("--backend", help="mock:echo | mock:noisy | mock:scripted | http")
    p.add_argument("--endpoint", help=f"HTTP endpoint base URL (env {ENDPOINT_ENV} overrides)")
    p.add_argument("--endpoint-path", dest="endpoint_path")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--script", help="scripted-backend JSONL")
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--paradigm", choices=("zero_shot", "few_shot", "canned"))
    p.add_argument("--strategy", choices=("random", "phase_similar", "diverse"))
    p.add_argument("--fixed-example", dest="fixed_example", action="store_true", default=None)
    p.add_argument("--level", choices=("minimal", "individual", "group", "full"))
    p.add_argument("--template-set", dest="template_set")
    p.add_argument("--handoff", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--reference", help="intervention run dir for degradation analysis")
    p.add_argument("--json")
    p.add_argument("--csv", help="per-depth degradation CSV")
    p.add_argument("--config")
    p.add_argument("--log-level", default="WARNING")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-sft", help="export supervised fine-tuning records")
    _add_common(p)
    _add_data(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--level", choices=("minimal", "individual", "group", "full"))
    p.add_argument("--template-set", dest="template_set")
    p.set_defaults(func=cmd_export_sft)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.resolve(_read_config_file(args.config), vars(args))
        if args.command != "eval":
            _print_config(cfg)
        return args.func(args, cfg)
    except (ConfigError, TypeError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        if isinstance(exc, RunDirError):
            logger.error("evaluation error: %s", exc)
            return EXIT_EVAL
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except BackendError as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND
    except EvalError as exc:
        logger.error("evaluation error: %s", exc)
        return EXIT_EVAL
    except ValidationError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
