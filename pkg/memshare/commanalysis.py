"""
Communication analysis.

Records what every agent writes to (m') and reads from (r) the shared
message during a greedy episode, projects each agent's trace onto its
leading principal components, rescales the scores to [0, 1] and renders
them as a time x component heatmap with the task phases underneath.
"""

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib import rc_context
from matplotlib.colors import LinearSegmentedColormap
from matplotlib.figure import Figure
from matplotlib.patches import Patch

from . import envs
from .csvio import read_csv, rows_to_text, write_csv
from .errors import ConfigurationError, DegenerateTraceError, IncompatibilityError
from .rollout import episode_steps
from .schemas import EnvConfig
from .training import Team, load_team

logger = logging.getLogger(__name__)

TRACE_MAGIC = b"MSTRACE\0"
TRACE_VERSION = 1
TRACE_KINDS = ("write", "read")

JACOBI_TOL = 1e-15
JACOBI_MAX_SWEEPS = 60

COLORMAP_NOTE = "linear diverging map: 0 = rgb(0,0,255), 0.5 = rgb(255,255,255), 1 = rgb(255,0,0)"
# odd level count so that 0.5 lands exactly on white
HEATMAP_CMAP = LinearSegmentedColormap.from_list("memshare_bwr", [(0.0, 0.0, 1.0), (1.0, 1.0, 1.0), (1.0, 0.0, 0.0)],
                                                 N=257)
SYNC_GREYS = {"none": "#d9d9d9", "one": "#636363", "both": "#000000"}
PHASE_GREYS = ["#f0f0f0", "#bdbdbd", "#969696", "#737373", "#525252", "#252525"]

SVG_HASHSALT = "memshare"
STEP_WIDTH_INCHES = 0.06


@dataclass
class TraceMatrix:
    """T x M vectors one agent wrote or read, with the episode's phase labels."""

    agent: int
    kind: str
    values: np.ndarray
    task: str
    seed: int
    phases: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise ConfigurationError(f"Trace kind '{self.kind}' is not valid. Must be one of: {', '.join(TRACE_KINDS)}")
        if self.phases and len(self.phases) != self.values.shape[0]:
            raise ConfigurationError(f"{len(self.phases)} phase labels for {self.values.shape[0]} trace rows")


@dataclass
class PcaResult:
    """Leading directions (rows), per-timestep scores and explained-variance ratios."""

    components: np.ndarray
    scores: np.ndarray
    ratios: np.ndarray
    all_ratios: np.ndarray
    mean: np.ndarray


@dataclass
class TraceRecording:
    traces: List[TraceMatrix]
    records: List[envs.TraceRecord]

    def get(self, agent: int, kind: str) -> TraceMatrix:
        for trace in self.traces:
            if trace.agent == agent and trace.kind == kind:
                return trace
        raise KeyError((agent, kind))


def record_traces(team: Union[Team, str, Path], env_config: Optional[EnvConfig] = None, seed: int = 0) -> TraceRecording:
    """
    Greedy rollout capturing every agent's m' and r at each turn.

    Raises:
        ConfigurationError: If the team has no memory device
    """
    if not isinstance(team, Team):
        team = load_team(team, env_config)
    if not team.uses_memory:
        raise ConfigurationError(f"{team.algorithm} checkpoints have no memory device to analyse")
    env_config = env_config or team.env_config

    writes = [[] for _ in range(team.n_agents)]
    reads = [[] for _ in range(team.n_agents)]
    records = []
    for record in episode_steps(team, env_config, seed):
        for i, turn in enumerate(record.turns):
            writes[i].append(turn.m_prime)
            reads[i].append(turn.r)
        records.append(envs.TraceRecord.from_step(record.t, record.result, record.actions))

    phases = envs.phase_of(records, env_config.task)
    for rec, phase in zip(records, phases):
        rec.phase = phase

    kinds = TRACE_KINDS if team.actors[0].dims.reads else ("write",)
    traces = []
    for i in range(team.n_agents):
        for kind, rows in zip(kinds, (writes[i], reads[i])):
            values = np.stack(rows) if rows else np.zeros((0, team.memory_size))
            traces.append(TraceMatrix(agent=i, kind=kind, values=values, task=env_config.task,
                                      seed=seed, phases=list(phases)))
    logger.info(f"Recorded {len(records)} steps of {team.n_agents} agents on {env_config.task} (seed {seed})")
    return TraceRecording(traces=traces, records=records)


# ---------------------------------------------------------------------------
# Principal components
# ---------------------------------------------------------------------------

def jacobi_eigh(matrix: np.ndarray, tol: float = JACOBI_TOL,
                max_sweeps: int = JACOBI_MAX_SWEEPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns:
        Tuple of (eigenvalues in descending order, eigenvectors as columns)
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    n = a.shape[0]
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), np.finfo(np.float64).tiny)

    for sweep in range(max_sweeps):
        off = float(np.sqrt(np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning(f"Jacobi eigensolver stopped after {max_sweeps} sweeps (off-diagonal norm {off:.3e})")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def orient(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive."""
    out = components.copy()
    for row in out:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return out


def pca(traces: Union[TraceMatrix, np.ndarray], k: int = 3) -> PcaResult:
    """
    Principal components of a trace (rows are timesteps).

    Args:
        traces: TraceMatrix or T x M array
        k: Number of components to keep (capped at M)

    Raises:
        DegenerateTraceError: For fewer than 2 rows or zero total variance
        ConfigurationError: For non-finite entries or k < 1
    """
    values = traces.values if isinstance(traces, TraceMatrix) else np.asarray(traces, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigurationError(f"pca needs a T x M matrix, got shape {values.shape}")
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    if values.shape[0] < 2:
        raise DegenerateTraceError(f"pca needs at least 2 rows, got {values.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise ConfigurationError("trace contains non-finite entries")

    mean = values.mean(axis=0)
    centred = values - mean
    cov = centred.T @ centred / (values.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateTraceError("trace has zero variance in every column")

    eigenvalues, vectors = jacobi_eigh(cov)
    eigenvalues = np.maximum(eigenvalues, 0.0)
    all_ratios = eigenvalues / eigenvalues.sum()
    k = min(k, values.shape[1])
    components = orient(vectors[:, :k].T)
    return PcaResult(components=components, scores=centred @ components.T, ratios=all_ratios[:k],
                     all_ratios=all_ratios, mean=mean)


def components_for_variance(ratios: Sequence[float], threshold: float = 0.8) -> int:
    """Fewest leading components whose cumulative ratio exceeds the threshold."""
    cumulative = np.cumsum(ratios)
    above = np.flatnonzero(cumulative > threshold)
    return int(above[0]) + 1 if above.size else len(cumulative)


def standardize01(scores: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling to [0, 1]; constant columns become 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ConfigurationError("scores contain non-finite entries")
    low, high = scores.min(axis=0), scores.max(axis=0)
    span = high - low
    out = np.full(scores.shape, 0.5)
    varying = span > 0
    out[:, varying] = (scores[:, varying] - low[varying]) / span[varying]
    return out


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------

def heatmap_image(scores: np.ndarray) -> np.ndarray:
    """RGBA raster of shape (k, T, 4), one row per component."""
    scores = np.asarray(scores, dtype=np.float64)
    return HEATMAP_CMAP(np.clip(scores.T, 0.0, 1.0))


def phase_runs(labels: Sequence[str]) -> List[Tuple[str, int, int]]:
    """Consecutive runs as (label, start, length)."""
    runs: List[Tuple[str, int, int]] = []
    for t, label in enumerate(labels):
        if runs and runs[-1][0] == label:
            name, start, length = runs[-1]
            runs[-1] = (name, start, length + 1)
        else:
            runs.append((label, t, 1))
    return runs


def phase_greys(labels: Sequence[str]) -> Dict[str, str]:
    palette: Dict[str, str] = {}
    for label in labels:
        if label in palette:
            continue
        if label in SYNC_GREYS:
            palette[label] = SYNC_GREYS[label]
        else:
            others = sum(1 for name in palette if name not in SYNC_GREYS)
            palette[label] = PHASE_GREYS[others % len(PHASE_GREYS)]
    return palette


def render_heatmap(scores: np.ndarray, phases: Sequence[str], title: str = "") -> str:
    """
    SVG heatmap: one row per component over time, phase bar beneath.

    Every phase run is drawn as its own patch with gid ``phase-run-<i>``.

    Raises:
        ConfigurationError: If the label count differs from the number of timesteps
    """
    scores = np.asarray(scores, dtype=np.float64)
    T, k = scores.shape
    if len(phases) != T:
        raise ConfigurationError(f"{len(phases)} phase labels for {T} timesteps")

    fig = Figure(figsize=(max(4.0, 1.5 + T * STEP_WIDTH_INCHES), 1.2 + 0.35 * k))
    grid = fig.add_gridspec(2, 1, height_ratios=[k, 0.6], hspace=0.08)
    ax = fig.add_subplot(grid[0])
    bar = fig.add_subplot(grid[1], sharex=ax)

    ax.imshow(heatmap_image(scores), aspect="auto", interpolation="nearest")
    ax.set_yticks(range(k))
    ax.set_yticklabels([f"PC{j + 1}" for j in range(k)])
    ax.tick_params(labelbottom=False)
    if title:
        ax.set_title(title, fontsize="medium")

    greys = phase_greys(phases)
    for i, (label, start, length) in enumerate(phase_runs(phases)):
        bar.broken_barh([(start - 0.5, length)], (0.0, 1.0), facecolors=greys[label], gid=f"phase-run-{i}")
    bar.set_xlim(-0.5, T - 0.5)
    bar.set_ylim(0.0, 1.0)
    bar.set_yticks([])
    bar.set_ylabel("phase", rotation=0, ha="right", va="center")
    bar.set_xlabel(f"time step (0-{max(T - 1, 0)})")
    bar.legend(handles=[Patch(facecolor=grey, edgecolor="black", linewidth=0.5, label=label)
                        for label, grey in greys.items()],
               loc="center left", bbox_to_anchor=(1.01, 0.5), fontsize="small", frameon=False)

    metadata = {"Date": None, "Description": COLORMAP_NOTE}
    if title:
        metadata["Title"] = title
    buffer = io.BytesIO()
    # fixed salt and no date keep the output byte-stable
    with rc_context({"svg.hashsalt": SVG_HASHSALT, "svg.fonttype": "none"}):
        fig.savefig(buffer, format="svg", bbox_inches="tight", metadata=metadata)
    return buffer.getvalue().decode("utf-8")


def heatmap_csv(scores: np.ndarray, phases: Sequence[str]) -> str:
    """Plotted values: t, pc1..pck, phase."""
    scores = np.asarray(scores, dtype=np.float64)
    header = ["t"] + [f"pc{j + 1}" for j in range(scores.shape[1])] + ["phase"]
    rows = [[t] + [float(v) for v in scores[t]] + [phases[t]] for t in range(scores.shape[0])]
    return rows_to_text(header, rows)


def heatmap_from_csv(source: Union[str, Path], title: str = "") -> str:
    """Re-render a heatmap from its companion CSV."""
    rows = read_csv(source)
    if not rows:
        raise ConfigurationError(f"{source} holds no heatmap rows")
    k = sum(1 for c in rows[0] if c.startswith("pc"))
    scores = np.array([[float(r[f"pc{j + 1}"]) for j in range(k)] for r in rows])
    return render_heatmap(scores, [r["phase"] for r in rows], title)


# ---------------------------------------------------------------------------
# Binary vector traces
# ---------------------------------------------------------------------------

def write_trace_matrix(path: Union[str, Path], values: np.ndarray) -> Path:
    """Magic, uint32 version, uint32 T, uint32 M, then T*M little-endian float64."""
    values = np.asarray(values, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(struct.pack("<III", TRACE_VERSION, values.shape[0], values.shape[1]))
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path


def read_trace_matrix(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise IncompatibilityError(f"{path} is not a memshare trace")
    version, T, M = struct.unpack_from("<III", data, len(TRACE_MAGIC))
    if version != TRACE_VERSION:
        raise IncompatibilityError(f"{path} has trace version {version}",
                                   expected={"version": TRACE_VERSION}, found={"version": version})
    offset = len(TRACE_MAGIC) + 12
    if len(data) - offset != 8 * T * M:
        raise IncompatibilityError(f"{path} holds {len(data) - offset} data bytes, expected {8 * T * M}")
    if T * M == 0:
        return np.zeros((T, M))
    return np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64).reshape(T, M)


# ---------------------------------------------------------------------------
# Full analysis
# ---------------------------------------------------------------------------

def summary_columns(k: int) -> List[str]:
    return ["agent", "kind", "status", "components_for_80"] + [f"ratio_{j + 1}" for j in range(k)]


def analyze(team: Union[Team, str, Path], output_dir: Union[str, Path], env_config: Optional[EnvConfig] = None,
            seed: int = 0, k: int = 3) -> List[Dict]:
    """
    Record one greedy episode and write, per agent and trace kind, the
    binary trace, the heatmap CSV and SVG; plus the episode trace CSV and
    a summary CSV of explained-variance ratios.

    Returns:
        Summary rows (status "ok" or "degenerate")
    """
    output_dir = Path(output_dir)
    recording = record_traces(team, env_config, seed)
    envs.write_trace_csv(output_dir / "episode_trace.csv", recording.records)

    summary = []
    for trace in recording.traces:
        stem = f"agent{trace.agent}_{trace.kind}"
        write_trace_matrix(output_dir / f"{stem}.trace", trace.values)
        row = {"agent": trace.agent, "kind": trace.kind, "status": "ok", "components_for_80": ""}
        try:
            result = pca(trace, k)
        except DegenerateTraceError as e:
            logger.warning(f"Agent {trace.agent} {trace.kind} trace: {e}")
            row["status"] = "degenerate"
            summary.append(row)
            continue
        scaled = standardize01(result.scores)
        csv_text = heatmap_csv(scaled, trace.phases)
        (output_dir / f"{stem}_heatmap.csv").write_text(csv_text, encoding="utf-8")
        title = f"{trace.task} agent {trace.agent} {trace.kind} (seed {seed})"
        (output_dir / f"{stem}_heatmap.svg").write_text(render_heatmap(scaled, trace.phases, title), encoding="utf-8")
        row["components_for_80"] = components_for_variance(result.all_ratios)
        row.update({f"ratio_{j + 1}": float(r) for j, r in enumerate(result.ratios)})
        summary.append(row)

    columns = summary_columns(k)
    write_csv(output_dir / "pca_summary.csv", columns, [[row.get(c, "") for c in columns] for row in summary])
    return summary
