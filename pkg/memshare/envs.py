"""
Cooperative particle tasks on a shared 2-D physics kernel.

Tasks: CN, PO-CN, SyncCN, SequentialCN, SwappingCN (5-way discrete moves)
and Waterworld (continuous 2-D force). Space is continuous, time discrete,
the arena is [-1, 1]^2 with hard clamping, and all randomness during an
episode (target drift, respawns) comes from the state's seeded stream.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .csvio import read_csv, write_csv
from .errors import ConfigurationError
from .schemas import EnvConfig

logger = logging.getLogger(__name__)

# noop, right, left, up, down
MOVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
N_MOVES = len(MOVES)
CONTINUOUS_ACTION_DIM = 2
ARENA = 1.0
ARENA_DIAGONAL = 2.0 * np.sqrt(2.0) * ARENA

SYNC_PHASES = ("none", "one", "both")
SWAP_PHASES = ("reach", "swap", "reach-again")


@dataclass
class WorldState:
    """Bodies, targets, episode clock and task bookkeeping."""

    config: EnvConfig
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    landmark_pos: np.ndarray
    food_pos: np.ndarray
    food_vel: np.ndarray
    poison_pos: np.ndarray
    poison_vel: np.ndarray
    rng: np.random.Generator
    t: int = 0
    occupied: np.ndarray = None
    # landmarks occupied at least once this episode
    reached: np.ndarray = None
    assignment: np.ndarray = None
    swaps: int = 0

    @property
    def n_agents(self) -> int:
        return self.agent_pos.shape[0]

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)


@dataclass
class StepResult:
    """Observations, rewards and per-step metric events."""

    state: WorldState
    observations: List[np.ndarray]
    rewards: np.ndarray
    collisions: int = 0
    sync: bool = False
    not_sync: bool = False
    newly_occupied: int = 0
    first_occupied: int = 0
    swapped: bool = False
    food_captured: int = 0
    poison_hits: int = 0
    landmark_distance: float = 0.0
    path_length: float = 0.0
    done: bool = False


def n_landmarks(config: EnvConfig) -> int:
    return 0 if config.task == "Waterworld" else config.n_agents


def action_dim(config: EnvConfig) -> int:
    return N_MOVES if config.discrete else CONTINUOUS_ACTION_DIM


def observation_dim(config: EnvConfig) -> int:
    """
    Own position and velocity, then relative landmark and agent positions
    (plus a visibility bit each under partial observability), plus
    3 x n_sensors range readings in Waterworld.
    """
    per_entity = 3 if config.partial else 2
    dim = 4 + n_landmarks(config) * per_entity + (config.n_agents - 1) * per_entity
    if config.task == "Waterworld":
        dim += 3 * config.n_sensors
    return dim


def reward_bound(config: EnvConfig) -> float:
    """Upper bound on |reward| of any agent in a single step."""
    L, N = n_landmarks(config), config.n_agents
    if config.task in ("CN", "PO-CN"):
        return L * ARENA_DIAGONAL + config.collision_penalty * (N - 1)
    if config.task in ("SyncCN", "SwappingCN"):
        return max(config.sync_reward, config.not_sync_penalty) + config.shaping_coef * L * ARENA_DIAGONAL
    if config.task == "SequentialCN":
        return max(config.sequential_reward * L, config.overlap_penalty)
    return config.food_reward * config.food_count + config.poison_penalty * config.poison_count


def _place(rng: np.random.Generator, radii: Sequence[float], config: EnvConfig) -> np.ndarray:
    """
    Rejection-sample non-overlapping centres for the given radii.

    Raises:
        ConfigurationError: If an entity cannot be placed within the retry budget
    """
    extent = config.spawn_extent * ARENA
    centres = np.zeros((len(radii), 2))
    for index, radius in enumerate(radii):
        for _ in range(config.spawn_retries):
            candidate = rng.uniform(-extent, extent, size=2)
            if index == 0:
                break
            gaps = np.linalg.norm(centres[:index] - candidate, axis=1)
            if np.all(gaps >= np.asarray(radii[:index]) + radius):
                break
        else:
            raise ConfigurationError(
                f"Could not place entity {index} of {len(radii)} after {config.spawn_retries} tries; arena too crowded"
            )
        centres[index] = candidate
    return centres


def reset(config: EnvConfig, seed: Optional[int] = None):
    """
    Start an episode.

    Args:
        config: Task configuration
        seed: Episode seed (defaults to config.seed)

    Returns:
        Tuple of (WorldState, list of per-agent observations)
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    N, L = config.n_agents, n_landmarks(config)
    is_water = config.task == "Waterworld"
    F = config.food_count if is_water else 0
    P = config.poison_count if is_water else 0

    radii = ([config.agent_radius] * N + [config.landmark_radius] * L
             + [config.food_radius] * F + [config.poison_radius] * P)
    centres = _place(rng, radii, config)

    def drift(count: int) -> np.ndarray:
        return rng.uniform(-config.target_max_speed, config.target_max_speed, size=(count, 2))

    state = WorldState(
        config=config,
        agent_pos=centres[:N],
        agent_vel=np.zeros((N, 2)),
        landmark_pos=centres[N:N + L],
        food_pos=centres[N + L:N + L + F],
        food_vel=drift(F),
        poison_pos=centres[N + L + F:],
        poison_vel=drift(P),
        rng=rng,
        occupied=np.zeros(L, dtype=bool),
        reached=np.zeros(L, dtype=bool),
        assignment=np.arange(N) % max(L, 1),
    )
    return state, [observe(state, i) for i in range(N)]


def _mask(rel: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Relative positions, masked beyond the vision radius with a visibility bit appended."""
    if not config.partial:
        return rel.reshape(-1)
    visible = (np.linalg.norm(rel, axis=1) < config.vision_radius).astype(np.float64)
    return np.concatenate([rel * visible[:, None], visible[:, None]], axis=1).reshape(-1)


def _sensor_readings(origin: np.ndarray, centres: np.ndarray, radius: float, config: EnvConfig) -> np.ndarray:
    """Distance along each sensor ray to the nearest circle, over vision radius; 1.0 when nothing is seen."""
    K = config.n_sensors
    if centres.shape[0] == 0:
        return np.ones(K)
    angles = 2.0 * np.pi * np.arange(K) / K
    rays = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    rel = centres - origin
    along = rel @ rays.T
    perp2 = np.sum(rel * rel, axis=1)[:, None] - along ** 2
    hit = (along > 0) & (perp2 <= radius ** 2)
    dist = along - np.sqrt(np.maximum(radius ** 2 - perp2, 0.0))
    inside = np.linalg.norm(rel, axis=1) < radius
    dist = np.where(inside[:, None], 0.0, dist)
    hit = hit | inside[:, None]
    dist = np.where(hit & (dist < config.vision_radius), np.maximum(dist, 0.0), np.inf)
    nearest = dist.min(axis=0)
    return np.where(np.isfinite(nearest), nearest / config.vision_radius, 1.0)


def observe(state: WorldState, agent: int, config: Optional[EnvConfig] = None) -> np.ndarray:
    """Fixed-length observation vector of one agent."""
    config = config or state.config
    pos = state.agent_pos[agent]
    others = [j for j in range(state.n_agents) if j != agent]
    parts = [pos, state.agent_vel[agent]]
    if state.landmark_pos.shape[0]:
        parts.append(_mask(state.landmark_pos - pos, config))
    parts.append(_mask(state.agent_pos[others] - pos, config))
    if config.task == "Waterworld":
        parts.append(_sensor_readings(pos, state.food_pos, config.food_radius, config))
        parts.append(_sensor_readings(pos, state.poison_pos, config.poison_radius, config))
        parts.append(_sensor_readings(pos, state.agent_pos[others], config.agent_radius, config))
    return np.concatenate(parts)


def _action_forces(joint_action, config: EnvConfig) -> np.ndarray:
    if len(joint_action) != config.n_agents:
        raise ConfigurationError(f"Expected {config.n_agents} actions, got {len(joint_action)}")
    forces = np.zeros((config.n_agents, 2))
    for i, a in enumerate(joint_action):
        if config.discrete:
            if np.isscalar(a) or np.ndim(a) == 0:
                index = int(a)
                if not 0 <= index < N_MOVES:
                    raise ConfigurationError(f"Agent {i}: move index {index} outside 0..{N_MOVES - 1}")
                forces[i] = MOVES[index]
                continue
            a = np.asarray(a, dtype=np.float64)
            if a.shape != (N_MOVES,) or not np.all(np.isfinite(a)):
                raise ConfigurationError(f"Agent {i}: expected a finite {N_MOVES}-vector, got shape {a.shape}")
            forces[i] = a @ MOVES
        else:
            a = np.asarray(a, dtype=np.float64)
            if a.shape != (CONTINUOUS_ACTION_DIM,) or not np.all(np.isfinite(a)):
                raise ConfigurationError(f"Agent {i}: expected a finite 2-vector, got shape {a.shape}")
            forces[i] = np.clip(a, -1.0, 1.0)
    return forces


def _cap_speed(vel: np.ndarray, limit: float) -> np.ndarray:
    speed = np.linalg.norm(vel, axis=1)
    scale = np.where(speed > limit, limit / np.maximum(speed, 1e-300), 1.0)
    return vel * scale[:, None]


def _drift_targets(pos: np.ndarray, vel: np.ndarray, rng: np.random.Generator, config: EnvConfig):
    if pos.shape[0] == 0:
        return pos, vel
    vel = _cap_speed(vel + rng.normal(0.0, config.target_jitter, size=vel.shape), config.target_max_speed)
    pos = pos + vel
    outside = np.abs(pos) > ARENA
    vel = np.where(outside, -vel, vel)
    return np.clip(pos, -ARENA, ARENA), vel


def collision_pairs(positions: np.ndarray, radius: float) -> List[tuple]:
    """All pairs (i, j), i < j, closer than the sum of their radii."""
    pairs = []
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if np.linalg.norm(positions[i] - positions[j]) < 2 * radius:
                pairs.append((i, j))
    return pairs


def step(state: WorldState, joint_action) -> StepResult:
    """
    Advance one timestep. The input state is not modified.

    Args:
        state: Current world state
        joint_action: One action per agent; discrete tasks take a move index
            or a 5-vector of move weights (one-hot or relaxed), Waterworld a
            2-vector in [-1, 1]^2

    Returns:
        StepResult carrying the next state
    """
    config = state.config
    forces = _action_forces(joint_action, config)
    s = state.copy()
    N = s.n_agents

    previous = s.agent_pos.copy()
    s.agent_vel = _cap_speed(config.damping * s.agent_vel + config.force_scale * forces, config.max_speed)
    moved = s.agent_pos + s.agent_vel
    clamped = np.abs(moved) > ARENA
    s.agent_pos = np.clip(moved, -ARENA, ARENA)
    s.agent_vel = np.where(clamped, 0.0, s.agent_vel)
    path_length = float(np.sum(np.linalg.norm(s.agent_pos - previous, axis=1)))
    s.t += 1

    pairs = collision_pairs(s.agent_pos, config.agent_radius)
    per_agent_collisions = np.zeros(N)
    for i, j in pairs:
        per_agent_collisions[i] += 1
        per_agent_collisions[j] += 1

    result = StepResult(state=s, observations=[], rewards=np.zeros(N), collisions=len(pairs),
                        path_length=path_length, done=s.t >= config.horizon)

    if config.task == "Waterworld":
        _waterworld_events(s, result)
    else:
        _landmark_events(s, result, per_agent_collisions)

    result.observations = [observe(s, i) for i in range(N)]
    return result


def _landmark_events(s: WorldState, result: StepResult, per_agent_collisions: np.ndarray) -> None:
    config = s.config
    L = s.landmark_pos.shape[0]
    dists = np.linalg.norm(s.agent_pos[:, None, :] - s.landmark_pos[None, :, :], axis=2)
    nearest = dists.min(axis=0)
    result.landmark_distance = float(nearest.mean())
    threshold = config.agent_radius + config.landmark_radius

    if config.task == "SwappingCN":
        occupied = np.zeros(L, dtype=bool)
        for agent, landmark in enumerate(s.assignment):
            occupied[landmark] |= dists[agent, landmark] < threshold
    else:
        occupied = (dists < threshold).any(axis=0)

    n_occupied = int(occupied.sum())
    result.sync = n_occupied == L
    result.not_sync = 0 < n_occupied < L
    newly = occupied & ~s.occupied
    result.newly_occupied = int(newly.sum())
    result.first_occupied = int((occupied & ~s.reached).sum())
    s.occupied = occupied
    s.reached = s.reached | occupied

    if config.task in ("CN", "PO-CN"):
        result.rewards = -nearest.sum() - config.collision_penalty * per_agent_collisions
        return

    if config.task in ("SyncCN", "SwappingCN"):
        shared = -config.shaping_coef * nearest.sum()
        if result.sync:
            shared += config.sync_reward
        elif result.not_sync:
            shared -= config.not_sync_penalty
        if config.task == "SwappingCN" and result.sync:
            s.swaps += 1
            s.assignment = (s.assignment + 1) % L
            s.occupied = np.zeros(L, dtype=bool)
            result.swapped = True
    else:
        shared = 0.0
        if result.sync:
            shared -= config.overlap_penalty
        else:
            shared += config.sequential_reward * result.newly_occupied
    result.rewards = np.full(s.n_agents, shared)


def _waterworld_events(s: WorldState, result: StepResult) -> None:
    config = s.config
    N = s.n_agents
    s.food_pos, s.food_vel = _drift_targets(s.food_pos, s.food_vel, s.rng, config)
    s.poison_pos, s.poison_vel = _drift_targets(s.poison_pos, s.poison_vel, s.rng, config)
    extent = config.spawn_extent * ARENA
    rewards = np.zeros(N)

    food_d = np.linalg.norm(s.agent_pos[:, None, :] - s.food_pos[None, :, :], axis=2)
    reached = (food_d < config.agent_radius + config.food_radius).sum(axis=0)
    for target in np.flatnonzero(reached >= config.capture_agents):
        result.food_captured += 1
        rewards += config.food_reward
        s.food_pos[target] = s.rng.uniform(-extent, extent, size=2)

    if s.poison_pos.shape[0]:
        poison_d = np.linalg.norm(s.agent_pos[:, None, :] - s.poison_pos[None, :, :], axis=2)
        contact = poison_d < config.agent_radius + config.poison_radius
        for agent, target in zip(*np.nonzero(contact)):
            result.poison_hits += 1
            rewards[agent] -= config.poison_penalty
        for target in np.flatnonzero(contact.any(axis=0)):
            s.poison_pos[target] = s.rng.uniform(-extent, extent, size=2)

    result.rewards = rewards


# ---------------------------------------------------------------------------
# Phases and episode traces
# ---------------------------------------------------------------------------

def phase_of(trace: Sequence, task: str) -> List[str]:
    """
    Label each timestep with the sub-task being executed.

    Args:
        trace: Per-timestep records carrying the event fields of StepResult
            (sync, not_sync, first_occupied, swapped, food_captured)
        task: Task tag

    Returns:
        One label per timestep

    Raises:
        ConfigurationError: For an unknown task tag
    """
    if task in ("CN", "PO-CN"):
        return ["navigate"] * len(trace)
    if task == "SyncCN":
        return [SYNC_PHASES[2] if r.sync else SYNC_PHASES[1] if r.not_sync else SYNC_PHASES[0] for r in trace]

    labels, count = [], 0
    for record in trace:
        if task == "SequentialCN":
            # leaving and re-entering a landmark does not open a new phase
            count += int(record.first_occupied)
            labels.append(f"phase-{count}")
        elif task == "SwappingCN":
            count += int(bool(record.swapped))
            labels.append(SWAP_PHASES[min(count, len(SWAP_PHASES) - 1)])
        elif task == "Waterworld":
            count += int(record.food_captured)
            labels.append(f"phase-{count}")
        else:
            raise ConfigurationError(f"Task '{task}' has no phase definition")
    return labels


@dataclass
class TraceRecord:
    """One timestep of an executed episode."""

    t: int
    positions: np.ndarray
    actions: List[np.ndarray]
    rewards: np.ndarray
    collisions: int = 0
    sync: bool = False
    not_sync: bool = False
    newly_occupied: int = 0
    first_occupied: int = 0
    swapped: bool = False
    food_captured: int = 0
    poison_hits: int = 0
    phase: str = ""

    @classmethod
    def from_step(cls, t: int, result: StepResult, actions: Sequence[np.ndarray]) -> "TraceRecord":
        return cls(
            t=t, positions=result.state.agent_pos.copy(),
            actions=[np.atleast_1d(np.asarray(a, dtype=np.float64)).copy() for a in actions],
            rewards=np.asarray(result.rewards, dtype=np.float64).copy(),
            collisions=result.collisions, sync=result.sync, not_sync=result.not_sync,
            newly_occupied=result.newly_occupied, first_occupied=result.first_occupied, swapped=result.swapped,
            food_captured=result.food_captured, poison_hits=result.poison_hits,
        )


EVENT_COLUMNS = ["collisions", "sync", "not_sync", "newly_occupied", "first_occupied", "swapped", "food_captured",
                 "poison_hits"]


def trace_columns(n_agents: int, act_dim: int) -> List[str]:
    """
    Column order of the episode trace CSV:
    t, x_i/y_i per agent, a_i_k per agent and action entry, r_i per agent,
    the event columns, phase.
    """
    columns = ["t"]
    for i in range(n_agents):
        columns += [f"x_{i}", f"y_{i}"]
    for i in range(n_agents):
        columns += [f"a_{i}_{k}" for k in range(act_dim)]
    columns += [f"r_{i}" for i in range(n_agents)]
    return columns + EVENT_COLUMNS + ["phase"]


def write_trace_csv(path: Union[str, Path], records: Sequence[TraceRecord]) -> Path:
    n_agents = len(records[0].rewards) if records else 0
    act_dim = len(records[0].actions[0]) if records else 0
    rows = []
    for r in records:
        row = [r.t]
        row += [float(v) for v in r.positions.reshape(-1)]
        row += [float(v) for a in r.actions for v in a]
        row += [float(v) for v in r.rewards]
        row += [r.collisions, r.sync, r.not_sync, r.newly_occupied, r.first_occupied, r.swapped, r.food_captured,
                r.poison_hits, r.phase]
        rows.append(row)
    return write_csv(path, trace_columns(n_agents, act_dim), rows)


def read_trace_csv(path: Union[str, Path]) -> List[TraceRecord]:
    rows = read_csv(path)
    if not rows:
        return []
    n_agents = sum(1 for c in rows[0] if c.startswith("r_"))
    act_dim = sum(1 for c in rows[0] if c.startswith("a_0_"))
    records = []
    for row in rows:
        positions = np.array([[float(row[f"x_{i}"]), float(row[f"y_{i}"])] for i in range(n_agents)])
        actions = [np.array([float(row[f"a_{i}_{k}"]) for k in range(act_dim)]) for i in range(n_agents)]
        rewards = np.array([float(row[f"r_{i}"]) for i in range(n_agents)])
        records.append(TraceRecord(
            t=int(row["t"]), positions=positions, actions=actions, rewards=rewards,
            collisions=int(row["collisions"]), sync=row["sync"] == "1", not_sync=row["not_sync"] == "1",
            newly_occupied=int(row["newly_occupied"]), first_occupied=int(row["first_occupied"]),
            swapped=row["swapped"] == "1",
            food_captured=int(row["food_captured"]), poison_hits=int(row["poison_hits"]), phase=row["phase"],
        ))
    return records
