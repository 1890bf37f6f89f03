"""
Command-line entry point.

Subcommands: train, eval, corrupt, ablate, sweep, analyze, inspect.
Config-driven commands take a flat JSON/YAML file plus ``--key value``
overrides. Errors map to exit codes: 2 configuration, 3 training fault,
4 checkpoint incompatibility.
"""

import argparse
import json
import logging
import re
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import ValidationError

from . import __version__
from .commanalysis import analyze
from .csvio import write_csv
from .errors import ConfigurationError, MemshareError
from .evaluation import (GRID_AXES, compare_corruption, evaluate, evaluate_corrupted, parse_axis,
                         run_experiment_grid, write_episode_csv, write_report_csv)
from .logs import setup_logging
from .nn import load_checkpoint
from .schemas import EnvConfig, RunManifest, TrainConfig
from .settings import Settings, get_settings
from .training import CHECKPOINT_DIR, CURVE_FILE, train

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
REQUIRED_KEYS = ("task", "algorithm")
ABLATION_VARIANTS = ["full", "no-context", "no-read", "no-write"]


# ---------------------------------------------------------------------------
# Configuration loading
# ---------------------------------------------------------------------------

def _key_line(text: str, key: str) -> Optional[int]:
    pattern = re.compile(rf'^\s*[{{,]?\s*["\']?{re.escape(key)}["\']?\s*:', re.MULTILINE)
    match = pattern.search(text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _anchored(path: Path, text: str, key: Optional[str], message: str) -> ConfigurationError:
    line = _key_line(text, key) if key else None
    where = f"{path}:{line}" if line else f"{path}"
    return ConfigurationError(f"{where}: {message}", key=key)


def parse_overrides(tokens: Sequence[str]) -> Dict[str, object]:
    """
    Turn ``--key value`` / ``--key=value`` tokens into config overrides.

    Dashes in keys become underscores; values are JSON scalars when they
    parse as such, strings otherwise.

    Raises:
        ConfigurationError: On a token that is not part of a --key value pair
    """
    overrides: Dict[str, object] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigurationError(f"Unexpected argument '{token}'")
        if "=" in token:
            key, raw = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigurationError(f"Override '{token}' has no value", key=token[2:])
            key, raw = token[2:], tokens[i + 1]
            i += 2
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.replace("-", "_")] = value
    return overrides


def load_config(path, overrides: Optional[Dict[str, object]] = None,
                train_required: bool = True) -> Tuple[EnvConfig, Optional[TrainConfig], Dict]:
    """
    Read a flat run config and split it into EnvConfig and TrainConfig.

    With train_required False only the task keys are validated and the
    TrainConfig slot is None (evaluating a checkpoint on another task).

    Returns:
        Tuple of (EnvConfig, TrainConfig, resolved flat dict)

    Raises:
        ConfigurationError: Missing file, bad syntax, unknown or missing keys,
            or invalid values; messages carry the file line of the key
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: cannot parse config: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a flat key-value document")
    data.update(overrides or {})

    env_fields, train_fields = set(EnvConfig.model_fields), set(TrainConfig.model_fields)
    for key in data:
        if key not in env_fields | train_fields:
            raise _anchored(path, text, key, f"unknown config key '{key}'")
    for key in (REQUIRED_KEYS if train_required else ("task",)):
        if key not in data:
            raise ConfigurationError(f"{path}: missing required key '{key}'", key=key)

    env_data = {k: v for k, v in data.items() if k in env_fields}
    train_data = {k: v for k, v in data.items() if k in train_fields}
    try:
        env_config = EnvConfig(**env_data)
        train_config = TrainConfig(**train_data) if train_required else None
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first.get("loc") else None
        raise _anchored(path, text, key, f"{key}: {first['msg']}" if key else first["msg"]) from e
    resolved = env_config.model_dump()
    if train_config is not None:
        resolved.update(train_config.model_dump())
    return env_config, train_config, resolved


# ---------------------------------------------------------------------------
# Manifests and run directories
# ---------------------------------------------------------------------------

def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


def run_dir_name(env_config: EnvConfig, train_config: TrainConfig) -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return f"{env_config.task}-{train_config.algorithm}-{train_config.seed}-{stamp}"


def start_manifest(directory: Path, command: str, config: Dict, seed: int) -> RunManifest:
    manifest = RunManifest(command=command, config=config, seed=seed, code_version=__version__, started_at=_now())
    write_manifest(directory, manifest)
    return manifest


def write_manifest(directory: Path, manifest: RunManifest) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_FILE
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def finish_manifest(directory: Path, manifest: RunManifest, artifacts: Dict[str, Path],
                    error: Optional[BaseException] = None) -> None:
    manifest.finished_at = _now()
    manifest.status = "failed" if error else "completed"
    manifest.error = (str(error) or type(error).__name__) if error else None
    manifest.artifacts = {name: str(p) for name, p in artifacts.items()}
    write_manifest(directory, manifest)


def resolve_checkpoint(path) -> Tuple[Path, Path]:
    """
    Accept a run directory or a checkpoint directory.

    Returns:
        Tuple of (checkpoint directory, run directory for outputs)
    """
    path = Path(path)
    if (path / "agent_0.ckpt").exists():
        return path, path.parent
    if (path / CHECKPOINT_DIR / "agent_0.ckpt").exists():
        return path / CHECKPOINT_DIR, path
    raise ConfigurationError(f"{path} holds no checkpoint (expected agent_0.ckpt or {CHECKPOINT_DIR}/)")


def _env_override(config_path: Optional[str], overrides: Dict) -> Optional[EnvConfig]:
    if config_path is None:
        if overrides:
            raise ConfigurationError(f"Overrides {sorted(overrides)} need a --config file for this command")
        return None
    env_config, _, _ = load_config(config_path, overrides, train_required=False)
    return env_config


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args, overrides: Dict, settings: Settings) -> Path:
    env_config, train_config, resolved = load_config(args.config, overrides)
    run_dir = Path(args.output) if args.output else settings.runs_dir / run_dir_name(env_config, train_config)
    log_file = setup_logging("train", run_dir, settings.log_level)
    manifest = start_manifest(run_dir, "train", resolved, train_config.seed)
    try:
        train(train_config, env_config, output_dir=run_dir)
    except Exception as e:
        finish_manifest(run_dir, manifest, {"log": log_file}, error=e)
        raise
    finish_manifest(run_dir, manifest, {"checkpoint": run_dir / CHECKPOINT_DIR,
                                        "learning_curve": run_dir / CURVE_FILE, "log": log_file})
    print(f"Run directory: {run_dir}")
    return run_dir


def cmd_eval(args, overrides: Dict, settings: Settings) -> Path:
    checkpoint, run_dir = resolve_checkpoint(args.run)
    out = Path(args.output) if args.output else run_dir / "eval"
    log_file = setup_logging("eval", out, settings.log_level)
    env_config = _env_override(args.config, overrides)
    manifest = start_manifest(out, "eval", {"checkpoint": str(checkpoint), "episodes": args.episodes,
                                            "seed": args.seed}, args.seed)
    try:
        result = evaluate(checkpoint, env_config, args.episodes, args.seed, args.jobs,
                          trace_dir=out / "traces" if args.traces else None)
    except Exception as e:
        finish_manifest(out, manifest, {"log": log_file}, error=e)
        raise
    artifacts = {"episodes": write_episode_csv(out / "eval_episodes.csv", result),
                 "report": write_report_csv(out / "eval_report.csv", result.report), "log": log_file}
    finish_manifest(out, manifest, artifacts)
    _print_report(result.report)
    return out


def cmd_corrupt(args, overrides: Dict, settings: Settings) -> Path:
    checkpoint, run_dir = resolve_checkpoint(args.run)
    out = Path(args.output) if args.output else run_dir / f"corrupt-{args.noise_std:g}"
    log_file = setup_logging("corrupt", out, settings.log_level)
    env_config = _env_override(args.config, overrides)
    manifest = start_manifest(out, "corrupt", {"checkpoint": str(checkpoint), "episodes": args.episodes,
                                               "seed": args.seed, "noise_std": args.noise_std}, args.seed)
    artifacts: Dict[str, Path] = {"log": log_file}
    try:
        if args.compare:
            clean, corrupted, diff = compare_corruption(checkpoint, env_config, args.noise_std, args.episodes,
                                                        args.seed, args.jobs)
            artifacts["clean_episodes"] = write_episode_csv(out / "clean_episodes.csv", clean)
            artifacts["paired"] = write_csv(out / "paired_reward_diff.csv", ["episode", "reward_diff"],
                                            [[i, float(d)] for i, d in enumerate(diff)])
            print(f"Paired reward difference (corrupted - clean): mean {np.mean(diff):.4f}")
        elif args.random_memory is not None:
            corrupted = evaluate(checkpoint, env_config, args.episodes, args.seed, args.jobs,
                                 random_memory_std=args.random_memory)
        else:
            corrupted = evaluate_corrupted(checkpoint, env_config, args.noise_std, args.episodes, args.seed,
                                           args.jobs)
    except Exception as e:
        finish_manifest(out, manifest, artifacts, error=e)
        raise
    artifacts["episodes"] = write_episode_csv(out / "eval_episodes.csv", corrupted)
    artifacts["report"] = write_report_csv(out / "eval_report.csv", corrupted.report)
    finish_manifest(out, manifest, artifacts)
    _print_report(corrupted.report)
    return out


def _grid(args, overrides: Dict, settings: Settings, command: str, axis: str, values: List) -> Path:
    env_config, train_config, resolved = load_config(args.config, overrides)
    base = Path(args.output) if args.output else settings.runs_dir / run_dir_name(env_config, train_config)
    out = base / f"{command}-{axis}"
    log_file = setup_logging(command, out, settings.log_level)
    manifest = start_manifest(out, command, dict(resolved, axis=axis, values=values), train_config.seed)
    artifacts = {"grid": out / "grid.csv", "log": log_file}
    try:
        rows = run_experiment_grid(axis, values, env_config, train_config, args.episodes, args.seed, out, args.jobs)
    except Exception as e:
        finish_manifest(out, manifest, artifacts, error=e)
        raise
    failed = [r for r in rows if r.status == "failed"]
    finish_manifest(out, manifest, artifacts)
    print(f"Grid {axis}: {len(rows) - len(failed)} ok, {len(failed)} failed -> {out / 'grid.csv'}")
    return out


def cmd_ablate(args, overrides: Dict, settings: Settings) -> Path:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    return _grid(args, overrides, settings, "ablate", "ablation", variants)


def cmd_sweep(args, overrides: Dict, settings: Settings) -> Path:
    axis, values = parse_axis(args.axis)
    return _grid(args, overrides, settings, "sweep", axis, values)


def cmd_analyze(args, overrides: Dict, settings: Settings) -> Path:
    checkpoint, run_dir = resolve_checkpoint(args.run)
    out = Path(args.output) if args.output else run_dir / f"analyze-{args.seed}"
    log_file = setup_logging("analyze", out, settings.log_level)
    env_config = _env_override(args.config, overrides)
    manifest = start_manifest(out, "analyze", {"checkpoint": str(checkpoint), "seed": args.seed,
                                               "components": args.components}, args.seed)
    try:
        summary = analyze(checkpoint, out, env_config, args.seed, args.components)
    except Exception as e:
        finish_manifest(out, manifest, {"log": log_file}, error=e)
        raise
    finish_manifest(out, manifest, {"summary": out / "pca_summary.csv", "trace": out / "episode_trace.csv",
                                    "log": log_file})
    for row in summary:
        print(f"agent {row['agent']} {row['kind']}: {row['status']} {row.get('ratio_1', '')}")
    return out


def cmd_inspect(args, overrides: Dict, settings: Settings) -> Path:
    checkpoint, run_dir = resolve_checkpoint(args.run)
    setup_logging("inspect", None, settings.log_level)
    manifest = run_dir / MANIFEST_FILE
    if manifest.exists():
        print(manifest.read_text(encoding="utf-8"))
    for path in sorted(checkpoint.glob("agent_*.ckpt")):
        blocks, descriptor = load_checkpoint(path)
        print(f"{path.name}: {descriptor['algorithm']} on {descriptor['task']} "
              f"(variant {descriptor['variant']}, memory {descriptor['memory_size']})")
        for name, arr in blocks.items():
            print(f"  {name}: {list(arr.shape)}")
    return checkpoint


def _print_report(report) -> None:
    print(f"{report.task}: {report.episodes} episodes (seed {report.seed})")
    for name, summary in report.metrics.items():
        print(f"  {name}: {summary.mean:.4f} +/- {summary.std:.4f}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "corrupt": cmd_corrupt,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memshare", description="Memory-driven multi-agent DDPG")
    parser.add_argument("--version", action="version", version=f"memshare {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_run: bool):
        if with_run:
            p.add_argument("run", help="Run directory or checkpoint directory")
            p.add_argument("--config", default=None, help="Optional task config to evaluate on")
        p.add_argument("--output", default=None, help="Output directory (default under the run directory)")
        p.add_argument("--jobs", type=int, default=1, help="Worker processes for evaluation episodes")

    p = sub.add_parser("train", help="Train a team from a config file")
    p.add_argument("config", help="Flat JSON/YAML run config")
    common(p, with_run=False)

    p = sub.add_parser("eval", help="Greedy evaluation of a checkpoint")
    common(p, with_run=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--traces", action="store_true", help="Write one trace CSV per episode")

    p = sub.add_parser("corrupt", help="Evaluation with Gaussian noise on the shared memory")
    common(p, with_run=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--compare", action="store_true", help="Also run the clean evaluation on paired seeds")
    p.add_argument("--random-memory", type=float, default=None,
                   help="Replace every read with N(0, s^2) noise instead of corrupting commits")

    p = sub.add_parser("ablate", help="Train and evaluate memory ablation variants")
    p.add_argument("config")
    common(p, with_run=False)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--episodes", type=int, default=1000, help="Evaluation episodes per cell")
    p.add_argument("--seed", type=int, default=0, help="Evaluation seed")

    p = sub.add_parser("sweep", help="Train and evaluate over one grid axis")
    p.add_argument("config")
    common(p, with_run=False)
    p.add_argument("--axis", required=True, help=f"name=v1,v2,... with name in {', '.join(sorted(GRID_AXES))}")
    p.add_argument("--episodes", type=int, default=1000, help="Evaluation episodes per cell")
    p.add_argument("--seed", type=int, default=0, help="Evaluation seed")

    p = sub.add_parser("analyze", help="Record memory traces and render PCA heatmaps")
    common(p, with_run=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--components", type=int, default=3)

    p = sub.add_parser("inspect", help="Print a run manifest and checkpoint block shapes")
    p.add_argument("run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    settings = get_settings()
    try:
        overrides = parse_overrides(extra)
        COMMANDS[args.command](args, overrides, settings)
    except MemshareError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0
