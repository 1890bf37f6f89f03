"""
Centralised critics, decentralised actors.

Each agent owns an actor (memory-driven or plain MLP), a critic over the
joint observations and actions, target copies of both and one Adam state
per network. ``train`` runs the full loop: sequential-turn episodes with
exploration noise, replay storage with memory snapshots, an update round
every ``update_every`` environment steps, soft target updates and a
periodic greedy evaluation for the learning curve.
"""

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import envs
from .actors import Actor, MemoryActor, MlpActor, actor_input, build_actor
from .csvio import write_csv
from .errors import ConfigurationError, IncompatibilityError, TrainingFault
from .exploration import OUState, decayed_sigma, gumbel_softmax, gumbel_softmax_backward
from .memdevice import MdPolicyParams
from .nn import (AdamState, MlpSpec, Params, adam_init, adam_step, copy_params, global_norm, init_mlp,
                 load_checkpoint, mlp_backward, mlp_forward, mlp_spec, save_checkpoint, soft_update)
from .replay import Minibatch, ReplayBuffer, Transition
from .rollout import episode_return, episode_steps
from .schemas import EnvConfig, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
DIAGNOSTIC_DIR = "diagnostic"
CURVE_FILE = "learning_curve.csv"
SEED_BOUND = 2 ** 31 - 1


@dataclass
class AgentNets:
    """Online and target networks of one agent, with their optimiser states."""

    actor: Actor
    target_actor: Actor
    critic: Params
    target_critic: Params
    actor_opt: AdamState
    critic_opt: AdamState


@dataclass
class Team:
    env_config: EnvConfig
    train_config: TrainConfig
    obs_dims: List[int]
    act_dim: int
    critic_spec: MlpSpec
    agents: List[AgentNets]

    @property
    def algorithm(self) -> str:
        return self.train_config.algorithm

    @property
    def uses_memory(self) -> bool:
        return self.train_config.uses_memory

    @property
    def memory_size(self) -> int:
        return self.train_config.memory_size if self.uses_memory else 0

    @property
    def actors(self) -> List[Actor]:
        return [agent.actor for agent in self.agents]

    @property
    def n_agents(self) -> int:
        return len(self.agents)


def critic_input_dim(obs_dims: List[int], act_dim: int) -> int:
    """Sum of every agent's observation and action widths."""
    return sum(obs_dims) + len(obs_dims) * act_dim


def _adam(params: Params, config: TrainConfig) -> AdamState:
    return adam_init(params, config.adam_beta1, config.adam_beta2, config.adam_eps)


def build_team(env_config: EnvConfig, train_config: TrainConfig, rng: np.random.Generator) -> Team:
    """Initialise actors, critics, target copies and optimiser states."""
    n = env_config.n_agents
    obs_dims = [envs.observation_dim(env_config)] * n
    act_dim = envs.action_dim(env_config)
    critic_spec = mlp_spec(critic_input_dim(obs_dims, act_dim), train_config.critic_hidden, 1,
                           train_config.hidden_activation, "linear")
    agents = []
    for i in range(n):
        actor = build_actor(i, obs_dims, act_dim, env_config, train_config, rng)
        critic = init_mlp(critic_spec, rng)
        agents.append(AgentNets(
            actor=actor,
            target_actor=actor.with_flat(copy_params(actor.flat())),
            critic=critic,
            target_critic=copy_params(critic),
            actor_opt=_adam(actor.flat(), train_config),
            critic_opt=_adam(critic, train_config),
        ))
    logger.info(f"Built {train_config.algorithm} team: {n} agents, obs {obs_dims[0]}, "
                f"actions {act_dim}, critic input {critic_spec.input_dim}")
    return Team(env_config, train_config, obs_dims, act_dim, critic_spec, agents)


def joint_input(observations: List[np.ndarray], actions: List[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(observations) + list(actions), axis=-1)


def _policy_memory(team: Team, batch: Minibatch, agent: int) -> Optional[np.ndarray]:
    return batch.memories[:, agent, :] if team.uses_memory else None


def _relax(team: Team, out: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if not team.env_config.discrete:
        return out
    sample, _ = gumbel_softmax(out, team.train_config.gumbel_temperature, rng)
    return sample


def target_actions(team: Team, batch: Minibatch, rng: np.random.Generator) -> List[np.ndarray]:
    """Target-policy actions on next observations with the stored memory snapshots."""
    actions = []
    for k, agent in enumerate(team.agents):
        x = actor_input(team.algorithm, batch.next_obs, k)
        out, _, _ = agent.target_actor.forward(x, _policy_memory(team, batch, k))
        actions.append(_relax(team, out, rng))
    return actions


def critic_update(team: Team, agent: int, batch: Minibatch, rng: np.random.Generator) -> float:
    """
    One Adam step on the mean squared TD error of agent i's critic.

    Returns:
        The loss before the step

    Raises:
        TrainingFault: If the loss is not finite
    """
    config = team.train_config
    nets = team.agents[agent]
    q_next, _ = mlp_forward(team.critic_spec, nets.target_critic,
                            joint_input(batch.next_obs, target_actions(team, batch, rng)))
    y = batch.rewards[:, agent] + config.gamma * q_next[:, 0]

    q, cache = mlp_forward(team.critic_spec, nets.critic, joint_input(batch.obs, batch.actions))
    diff = q[:, 0] - y
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingFault(f"Non-finite critic loss for agent {agent}", diagnostic={"agent": agent, "loss": loss})

    grads, _ = mlp_backward(cache, (2.0 / batch.size) * diff[:, None])
    nets.critic, nets.critic_opt = adam_step(nets.critic, grads, nets.critic_opt, config.lr_critic)
    return loss


def actor_gradients(team: Team, agent: int, batch: Minibatch, rng: np.random.Generator) -> Tuple[Params, float]:
    """
    Gradient of -mean Q_i with agent i's action recomputed by its policy.

    Other agents' actions come from the batch; discrete actions pass
    through the Gumbel-Softmax relaxation.

    Returns:
        Tuple of (actor parameter gradients, mean Q)
    """
    config = team.train_config
    nets = team.agents[agent]
    x = actor_input(team.algorithm, batch.obs, agent)
    out, _, cache = nets.actor.forward(x, _policy_memory(team, batch, agent))
    action = _relax(team, out, rng)

    actions = list(batch.actions)
    actions[agent] = action
    q, q_cache = mlp_forward(team.critic_spec, nets.critic, joint_input(batch.obs, actions))
    _, d_input = mlp_backward(q_cache, np.full(q.shape, -1.0 / batch.size))

    offset = sum(team.obs_dims) + agent * team.act_dim
    d_action = d_input[:, offset:offset + team.act_dim]
    if team.env_config.discrete:
        d_action = gumbel_softmax_backward(action, d_action, config.gumbel_temperature)
    return nets.actor.backward(cache, d_action), float(np.mean(q))


def actor_update(team: Team, agent: int, batch: Minibatch, rng: np.random.Generator) -> float:
    """
    One Adam step ascending Q_i through agent i's policy.

    Returns:
        Global norm of the actor gradient

    Raises:
        TrainingFault: If the gradient is not finite
    """
    nets = team.agents[agent]
    grads, mean_q = actor_gradients(team, agent, batch, rng)
    norm = global_norm(grads)
    if not np.isfinite(norm) or not np.isfinite(mean_q):
        raise TrainingFault(f"Non-finite actor gradient for agent {agent}",
                            diagnostic={"agent": agent, "grad_norm": norm, "mean_q": mean_q})
    params, nets.actor_opt = adam_step(nets.actor.flat(), grads, nets.actor_opt, team.train_config.lr_actor)
    nets.actor = nets.actor.with_flat(params)
    return norm


def update_targets(team: Team) -> None:
    tau = team.train_config.tau
    for nets in team.agents:
        nets.target_actor = nets.target_actor.with_flat(soft_update(nets.target_actor.flat(), nets.actor.flat(), tau))
        nets.target_critic = soft_update(nets.target_critic, nets.critic, tau)


def update_round(team: Team, buffer: ReplayBuffer, rng: np.random.Generator) -> Tuple[float, float]:
    """
    Critic then actor step for every agent, each on its own minibatch,
    followed by soft target updates.

    Returns:
        Tuple of (mean critic loss, mean actor gradient norm)
    """
    losses, norms = [], []
    for i in range(team.n_agents):
        batch = buffer.sample(team.train_config.batch_size, rng)
        losses.append(critic_update(team, i, batch, rng))
        norms.append(actor_update(team, i, batch, rng))
    update_targets(team)
    return float(np.mean(losses)), float(np.mean(norms))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def team_descriptor(team: Team) -> Dict:
    return {
        "algorithm": team.algorithm,
        "variant": team.train_config.variant,
        "task": team.env_config.task,
        "n_agents": team.n_agents,
        "obs_dims": list(team.obs_dims),
        "action_dim": team.act_dim,
        "memory_size": team.memory_size,
        "env_config": team.env_config.model_dump(),
        "train_config": team.train_config.model_dump(),
    }


def _agent_blocks(nets: AgentNets) -> Dict[str, np.ndarray]:
    blocks: Dict[str, np.ndarray] = {}
    for prefix, actor in (("actor", nets.actor), ("target_actor", nets.target_actor)):
        for name, arr in actor.named_blocks().items():
            blocks[f"{prefix}.{name}"] = arr
    for prefix, params in (("critic", nets.critic), ("target_critic", nets.target_critic)):
        for i, arr in enumerate(params):
            blocks[f"{prefix}.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}"] = arr
    return blocks


def save_team(team: Team, directory: Union[str, Path]) -> List[Path]:
    """One checkpoint container per agent: agent_<i>.ckpt (plus JSON sidecars)."""
    directory = Path(directory)
    paths = []
    for i, nets in enumerate(team.agents):
        descriptor = dict(team_descriptor(team), agent=i)
        paths.append(save_checkpoint(directory / f"agent_{i}.ckpt", _agent_blocks(nets), descriptor))
    logger.info(f"Saved {len(paths)} agent checkpoints to {directory}")
    return paths


def _restore_actor(template: Actor, blocks: Dict[str, np.ndarray], prefix: str) -> Actor:
    arrays = [blocks[f"{prefix}.{name}"] for name in template.named_blocks()]
    if isinstance(template, MemoryActor):
        return MemoryActor(MdPolicyParams.from_flat(template.dims, arrays))
    return MlpActor(template.spec, arrays)


def load_team(directory: Union[str, Path], env_config: Optional[EnvConfig] = None) -> Team:
    """
    Rebuild a team from agent checkpoints.

    Args:
        directory: Directory holding agent_<i>.ckpt files
        env_config: Task to run the team on; defaults to the training task

    Raises:
        ConfigurationError: If the directory holds no checkpoints
        IncompatibilityError: If the task's dimensions or any block shape
            differ from the checkpoint
    """
    directory = Path(directory)
    first = directory / "agent_0.ckpt"
    if not first.exists():
        raise ConfigurationError(f"No agent checkpoints found in {directory}")
    _, descriptor = load_checkpoint(first)
    train_config = TrainConfig(**descriptor["train_config"])
    saved_env = EnvConfig(**descriptor["env_config"])
    env_config = env_config or saved_env

    expected = {"n_agents": env_config.n_agents, "obs_dim": envs.observation_dim(env_config),
                "action_dim": envs.action_dim(env_config)}
    found = {"n_agents": descriptor["n_agents"], "obs_dim": descriptor["obs_dims"][0],
             "action_dim": descriptor["action_dim"]}
    if expected != found:
        raise IncompatibilityError(f"Checkpoint in {directory} does not fit task {env_config.task}",
                                   expected=expected, found=found)

    team = build_team(env_config, train_config, np.random.default_rng(0))
    for i, nets in enumerate(team.agents):
        blocks, _ = load_checkpoint(directory / f"agent_{i}.ckpt")
        template = _agent_blocks(nets)
        want = {name: list(arr.shape) for name, arr in template.items()}
        have = {name: list(arr.shape) for name, arr in blocks.items()}
        if want != have:
            diff_expected = {k: v for k, v in want.items() if have.get(k) != v}
            diff_found = {k: have.get(k) for k in diff_expected}
            for k in have:
                if k not in want:
                    diff_found[k] = have[k]
            raise IncompatibilityError(f"Agent {i} parameter blocks do not match", expected=diff_expected,
                                       found=diff_found)
        nets.actor = _restore_actor(nets.actor, blocks, "actor")
        nets.target_actor = _restore_actor(nets.target_actor, blocks, "target_actor")
        n_critic = len(nets.critic)
        nets.critic = [blocks[f"critic.{j // 2}.{'weight' if j % 2 == 0 else 'bias'}"] for j in range(n_critic)]
        nets.target_critic = [blocks[f"target_critic.{j // 2}.{'weight' if j % 2 == 0 else 'bias'}"]
                              for j in range(n_critic)]
        nets.actor_opt = _adam(nets.actor.flat(), train_config)
        nets.critic_opt = _adam(nets.critic, train_config)
    logger.info(f"Loaded {train_config.algorithm} team ({team.n_agents} agents) from {directory}")
    return team


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    team: Team
    curve: List[Dict] = field(default_factory=list)
    steps: int = 0
    updates: int = 0


def curve_columns(n_agents: int) -> List[str]:
    return (["episode", "eval_reward"] + [f"eval_reward_{i}" for i in range(n_agents)]
            + ["critic_loss", "actor_grad_norm"])


def _evaluate_greedy(team: Team, seeds: np.ndarray) -> np.ndarray:
    returns = np.stack([episode_return(team, team.env_config, int(s)) for s in seeds])
    return returns.mean(axis=0)


def train(train_config: TrainConfig, env_config: EnvConfig, output_dir: Optional[Union[str, Path]] = None,
          progress: Optional[bool] = None) -> TrainResult:
    """
    Train a team from scratch.

    Args:
        train_config: Algorithm and optimisation settings (its seed drives every stream)
        env_config: Task configuration
        output_dir: If set, receives checkpoint/, learning_curve.csv and, on
            a training fault, diagnostic/
        progress: Show a tqdm bar (defaults to whether stderr is a terminal)

    Returns:
        TrainResult with the trained team and learning-curve rows

    Raises:
        TrainingFault: On non-finite losses or gradients, after writing the
            diagnostic checkpoint
    """
    root = np.random.SeedSequence(train_config.seed)
    init_seq, env_seq, noise_seq, sample_seq, eval_seq = root.spawn(5)
    team = build_team(env_config, train_config, np.random.default_rng(init_seq))
    env_rng = np.random.default_rng(env_seq)
    noise_rng = np.random.default_rng(noise_seq)
    sample_rng = np.random.default_rng(sample_seq)
    eval_seeds = np.random.default_rng(eval_seq).integers(0, SEED_BOUND, size=train_config.eval_episodes)

    buffer = ReplayBuffer(train_config.buffer_capacity)
    result = TrainResult(team=team)
    critic_loss, grad_norm = float("nan"), float("nan")
    output_dir = Path(output_dir) if output_dir is not None else None
    show = sys.stderr.isatty() if progress is None else progress

    logger.info(f"Training {train_config.algorithm} on {env_config.task} for {train_config.episodes} episodes "
                f"(seed {train_config.seed})")
    episode = 0
    try:
        for episode in tqdm(range(train_config.episodes), desc="Training", disable=not show):
            sigma = train_config.ou_sigma
            if train_config.noise_decay:
                sigma = decayed_sigma(sigma, episode, train_config.episodes, train_config.noise_decay_fraction)
            noises = [OUState.zeros(team.act_dim, train_config.ou_theta, sigma) for _ in range(team.n_agents)]
            seed = int(env_rng.integers(0, SEED_BOUND))

            for record in episode_steps(team, env_config, seed, explore=True, noises=noises, rng=noise_rng):
                buffer.push(Transition(obs=record.obs, next_obs=record.next_obs, actions=record.actions,
                                       memories=record.memories, rewards=record.rewards))
                result.steps += 1
                if result.steps % train_config.update_every == 0 and len(buffer) >= train_config.batch_size:
                    critic_loss, grad_norm = update_round(team, buffer, sample_rng)
                    result.updates += 1

            if (episode + 1) % train_config.eval_interval == 0 or episode + 1 == train_config.episodes:
                per_agent = _evaluate_greedy(team, eval_seeds)
                row = {"episode": episode + 1, "eval_reward": float(per_agent.mean())}
                row.update({f"eval_reward_{i}": float(v) for i, v in enumerate(per_agent)})
                row.update({"critic_loss": critic_loss, "actor_grad_norm": grad_norm})
                result.curve.append(row)
                logger.debug(f"Episode {episode + 1}: eval reward {row['eval_reward']:.4f}, "
                             f"critic loss {critic_loss:.4g}")
    except TrainingFault as fault:
        fault.diagnostic.update({"episode": episode, "steps": result.steps, "updates": result.updates})
        logger.error(f"Training fault at episode {episode}: {fault}")
        if output_dir is not None:
            save_team(team, output_dir / DIAGNOSTIC_DIR)
            (output_dir / DIAGNOSTIC_DIR / "fault.json").write_text(
                json.dumps(fault.diagnostic, indent=2, default=str), encoding="utf-8")
        raise

    logger.info(f"Training finished: {result.steps} steps, {result.updates} update rounds")
    if output_dir is not None:
        save_team(team, output_dir / CHECKPOINT_DIR)
        write_curve(output_dir / CURVE_FILE, result.curve, team.n_agents)
    return result


def write_curve(path: Union[str, Path], rows: List[Dict], n_agents: int) -> Path:
    columns = curve_columns(n_agents)
    return write_csv(path, columns, [[row[c] for c in columns] for row in rows])
