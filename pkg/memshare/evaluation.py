"""
Greedy evaluation, memory corruption and experiment grids.

Every episode gets its own child of ``SeedSequence(seed)``, so a given
(team, seed) always replays the same episodes, clean and corrupted runs
share their environment seeds, and parallel workers merge by episode index.
"""

import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from . import envs
from .csvio import write_csv
from .errors import ConfigurationError, MemshareError
from .rollout import episode_steps
from .schemas import EnvConfig, GridRow, MetricsReport, MetricSummary, TrainConfig
from .training import Team, load_team, train

logger = logging.getLogger(__name__)

LANDMARK_METRICS = ["reward", "avg_distance", "collisions", "sync", "not_sync"]

TASK_METRICS = {
    "CN": LANDMARK_METRICS,
    "PO-CN": LANDMARK_METRICS,
    "SyncCN": LANDMARK_METRICS,
    "SequentialCN": LANDMARK_METRICS,
    "SwappingCN": LANDMARK_METRICS,
    "Waterworld": ["reward", "collisions", "food", "poison"],
}

# Tasks whose average distance is the total path length travelled
PATH_LENGTH_TASKS = {"SequentialCN", "SwappingCN"}

# Grid axis -> (config it lives in, field, parser)
GRID_AXES = {
    "n-agents": ("env", "n_agents", int),
    "memory-size": ("train", "memory_size", int),
    "seed": ("train", "seed", int),
    "ablation": ("train", "variant", str),
}


@dataclass
class EvaluationResult:
    report: MetricsReport
    episodes: List[Dict] = field(default_factory=list)


def episode_seeds(seed: int, n_episodes: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_episodes)


def run_episode(team: Team, env_config: EnvConfig, seq: np.random.SeedSequence, corruption_std: float = 0.0,
                random_memory_std: Optional[float] = None, trace_path: Optional[Path] = None) -> Dict:
    """
    One greedy episode reduced to its metrics.

    Reward is the sum over time of the mean agent reward. Average distance
    is the per-step mean landmark distance, or the total path length for
    SequentialCN and SwappingCN.
    """
    env_seed = int(seq.generate_state(1)[0])
    memory_rng = np.random.default_rng(seq)
    totals = {"reward": 0.0, "collisions": 0, "sync": 0, "not_sync": 0, "food": 0, "poison": 0}
    distances, path, trace = [], 0.0, []

    for record in episode_steps(team, env_config, env_seed, corruption_std=corruption_std,
                                random_memory_std=random_memory_std, memory_rng=memory_rng):
        step = record.result
        totals["reward"] += float(np.mean(step.rewards))
        totals["collisions"] += step.collisions
        totals["sync"] += int(step.sync)
        totals["not_sync"] += int(step.not_sync)
        totals["food"] += step.food_captured
        totals["poison"] += step.poison_hits
        distances.append(step.landmark_distance)
        path += step.path_length
        if trace_path is not None:
            trace.append(envs.TraceRecord.from_step(record.t, step, record.actions))

    if env_config.task in PATH_LENGTH_TASKS:
        totals["avg_distance"] = path
    else:
        totals["avg_distance"] = float(np.mean(distances)) if distances else 0.0

    if trace_path is not None:
        for record, phase in zip(trace, envs.phase_of(trace, env_config.task)):
            record.phase = phase
        envs.write_trace_csv(trace_path, trace)

    row = {"seed": env_seed}
    row.update({name: totals[name] for name in TASK_METRICS[env_config.task]})
    return row


def _run_episode_job(args) -> Dict:
    return run_episode(*args)


def summarise(rows: List[Dict], metrics: Sequence[str]) -> Dict[str, MetricSummary]:
    """Sample mean and standard deviation (ddof=1; 0 for a single episode)."""
    summary = {}
    for name in metrics:
        values = np.array([float(r[name]) for r in rows])
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        summary[name] = MetricSummary(mean=float(np.mean(values)), std=std)
    return summary


def evaluate(team: Union[Team, str, Path], env_config: Optional[EnvConfig] = None, n_episodes: int = 1000,
             seed: int = 0, jobs: int = 1, corruption_std: float = 0.0, random_memory_std: Optional[float] = None,
             trace_dir: Optional[Union[str, Path]] = None, progress: Optional[bool] = None) -> EvaluationResult:
    """
    Greedy evaluation: no exploration noise, hard argmax, memory reset per episode.

    Args:
        team: A Team or a checkpoint directory
        env_config: Task to evaluate on (defaults to the training task)
        n_episodes: Number of episodes
        seed: Master evaluation seed
        jobs: Worker processes; results are ordered by episode index
        corruption_std: N(0, std^2) noise added to the message after each commit
        random_memory_std: Replace every read with N(0, s^2) noise
        trace_dir: If set, one trace CSV per episode is written here

    Raises:
        IncompatibilityError: If the checkpoint does not fit the task
        ConfigurationError: For memory noise on a memoryless team
    """
    if n_episodes < 1:
        raise ConfigurationError(f"n_episodes must be at least 1, got {n_episodes}")
    if not isinstance(team, Team):
        team = load_team(team, env_config)
    env_config = env_config or team.env_config
    if env_config.n_agents != team.n_agents:
        raise ConfigurationError(f"Team has {team.n_agents} agents, task wants {env_config.n_agents}")

    trace_dir = Path(trace_dir) if trace_dir is not None else None
    jobs_args = [
        (team, env_config, seq, corruption_std, random_memory_std,
         trace_dir / f"episode_{index:04d}.csv" if trace_dir is not None else None)
        for index, seq in enumerate(episode_seeds(seed, n_episodes))
    ]
    show = sys.stderr.isatty() if progress is None else progress
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(tqdm(pool.map(_run_episode_job, jobs_args), total=n_episodes, desc="Evaluating",
                             disable=not show))
    else:
        rows = [_run_episode_job(a) for a in tqdm(jobs_args, desc="Evaluating", disable=not show)]

    for index, row in enumerate(rows):
        row["episode"] = index
    metrics = TASK_METRICS[env_config.task]
    report = MetricsReport(
        task=env_config.task, episodes=n_episodes, seed=seed,
        corruption_std=corruption_std if corruption_std > 0 or random_memory_std is not None else None,
        metrics=summarise(rows, metrics),
    )
    logger.info(f"Evaluated {n_episodes} episodes on {env_config.task}: "
                f"reward {report.metrics['reward'].mean:.4f} +/- {report.metrics['reward'].std:.4f}")
    return EvaluationResult(report=report, episodes=rows)


def _require_memory(team: Team) -> None:
    if not team.uses_memory:
        raise ConfigurationError(f"{team.algorithm} checkpoints have no memory device to corrupt")


def evaluate_corrupted(team: Union[Team, str, Path], env_config: Optional[EnvConfig] = None,
                       noise_std: float = 1.0, n_episodes: int = 1000, seed: int = 0, jobs: int = 1,
                       trace_dir: Optional[Union[str, Path]] = None) -> EvaluationResult:
    """
    evaluate with Gaussian noise injected into the message after every commit.

    Raises:
        ConfigurationError: If the team has no memory device or noise_std < 0
    """
    if noise_std < 0:
        raise ConfigurationError(f"noise std must be >= 0, got {noise_std}")
    if not isinstance(team, Team):
        team = load_team(team, env_config)
    _require_memory(team)
    result = evaluate(team, env_config, n_episodes, seed, jobs, corruption_std=noise_std, trace_dir=trace_dir)
    result.report.corruption_std = noise_std
    return result


def compare_corruption(team: Union[Team, str, Path], env_config: Optional[EnvConfig] = None,
                       noise_std: float = 1.0, n_episodes: int = 200, seed: int = 0,
                       jobs: int = 1) -> Tuple[EvaluationResult, EvaluationResult, np.ndarray]:
    """
    Clean and corrupted evaluation on the same episode seeds.

    Returns:
        Tuple of (clean result, corrupted result, per-episode reward
        difference corrupted - clean)
    """
    if not isinstance(team, Team):
        team = load_team(team, env_config)
    _require_memory(team)
    clean = evaluate(team, env_config, n_episodes, seed, jobs)
    corrupted = evaluate_corrupted(team, env_config, noise_std, n_episodes, seed, jobs)
    diff = np.array([c["reward"] - k["reward"] for c, k in zip(corrupted.episodes, clean.episodes)])
    return clean, corrupted, diff


def episode_columns(task: str) -> List[str]:
    return ["episode", "seed"] + TASK_METRICS[task]


def write_episode_csv(path: Union[str, Path], result: EvaluationResult) -> Path:
    columns = episode_columns(result.report.task)
    return write_csv(path, columns, [[row[c] for c in columns] for row in result.episodes])


def write_report_csv(path: Union[str, Path], report: MetricsReport) -> Path:
    rows = [[name, s.mean, s.std, report.episodes] for name, s in report.metrics.items()]
    return write_csv(path, ["metric", "mean", "std", "episodes"], rows)


# ---------------------------------------------------------------------------
# Experiment grids
# ---------------------------------------------------------------------------

def parse_axis(spec: str) -> Tuple[str, List]:
    """
    Parse ``axis=v1,v2,...`` (for example ``memory-size=32,64,128``).

    Raises:
        ConfigurationError: On an unknown axis or an empty value list
    """
    if "=" not in spec:
        raise ConfigurationError(f"Axis '{spec}' must look like name=v1,v2,...", key="axis")
    name, _, raw = spec.partition("=")
    name = name.strip().replace("_", "-")
    if name not in GRID_AXES:
        raise ConfigurationError(f"Axis '{name}' is not valid. Must be one of: {', '.join(sorted(GRID_AXES))}",
                                 key="axis")
    parser = GRID_AXES[name][2]
    try:
        values = [parser(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"Axis '{name}' has an invalid value: {e}", key="axis") from e
    if not values:
        raise ConfigurationError(f"Axis '{name}' has no values", key="axis")
    return name, values


def grid_cell_configs(axis: str, value, env_config: EnvConfig,
                      train_config: TrainConfig) -> Tuple[EnvConfig, TrainConfig]:
    """Base configs with one axis value applied (re-validated)."""
    target, key, _ = GRID_AXES[axis]
    env_data, train_data = env_config.model_dump(), train_config.model_dump()
    if target == "env":
        env_data[key] = value
    else:
        train_data[key] = value
    if axis == "seed":
        env_data["seed"] = value
    if axis == "n-agents":
        env_data["horizon"] = env_config.horizon
    return EnvConfig(**env_data), TrainConfig(**train_data)


def run_experiment_grid(axis: str, values: Sequence, env_config: EnvConfig, train_config: TrainConfig,
                        n_episodes: int = 1000, seed: int = 0, output_dir: Optional[Union[str, Path]] = None,
                        jobs: int = 1) -> List[GridRow]:
    """
    One independent train + evaluate per axis value on a shared base config.

    A failing cell is recorded with status "failed" and the grid continues.
    Any other error marks its cell failed, writes grid.csv with the rows so
    far and propagates.
    """
    if axis not in GRID_AXES:
        raise ConfigurationError(f"Axis '{axis}' is not valid. Must be one of: {', '.join(sorted(GRID_AXES))}")
    output_dir = Path(output_dir) if output_dir is not None else None
    rows: List[GridRow] = []
    try:
        for value in values:
            cell_dir = output_dir / f"{axis}-{value}" if output_dir is not None else None
            try:
                cell_env, cell_train = grid_cell_configs(axis, value, env_config, train_config)
                trained = train(cell_train, cell_env, output_dir=cell_dir)
                result = evaluate(trained.team, cell_env, n_episodes, seed, jobs)
                if cell_dir is not None:
                    write_episode_csv(cell_dir / "eval_episodes.csv", result)
                rows.append(GridRow(axis=axis, value=str(value), report=result.report))
            except (MemshareError, ValidationError) as e:
                logger.error(f"Grid cell {axis}={value} failed: {e}")
                rows.append(GridRow(axis=axis, value=str(value), status="failed", error=_first_line(e)))
            except Exception as e:
                logger.error(f"Grid {axis} aborted at {axis}={value}: {e!r}")
                rows.append(GridRow(axis=axis, value=str(value), status="failed", error=_first_line(e)))
                raise
    finally:
        if output_dir is not None:
            write_grid_csv(output_dir / "grid.csv", rows, env_config.task)
    return rows


def _first_line(error: BaseException) -> str:
    return (str(error).splitlines() or [type(error).__name__])[0]


def grid_columns(task: str) -> List[str]:
    columns = ["axis", "value", "status", "error", "episodes"]
    for name in TASK_METRICS[task]:
        columns += [f"{name}_mean", f"{name}_std"]
    return columns


def write_grid_csv(path: Union[str, Path], rows: List[GridRow], task: str) -> Path:
    table = []
    for row in rows:
        line = [row.axis, row.value, row.status, row.error or "", row.report.episodes if row.report else ""]
        for name in TASK_METRICS[task]:
            summary = row.report.metrics.get(name) if row.report else None
            line += [summary.mean, summary.std] if summary else ["", ""]
        table.append(line)
    return write_csv(path, grid_columns(task), table)
