"""
Sequential-turn episode execution.

Agents act in a fixed order within every timestep. Under MD-MADDPG each
agent reads the message left by the previous agent and commits its own
write before the next agent acts. The message starts at zero each episode.

``episode_steps`` yields one StepRecord per timestep, so training, evaluation
and trace recording all drive the same loop.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, List, Optional, Sequence

import numpy as np

from . import envs
from .actors import actor_input
from .errors import ConfigurationError
from .exploration import OUState, gumbel_softmax, onehot_argmax, ou_next
from .memdevice import MdStepOutput
from .schemas import EnvConfig

if TYPE_CHECKING:
    from .training import Team

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    """Everything one timestep produced."""

    t: int
    obs: List[np.ndarray]
    actions: List[np.ndarray]
    memories: np.ndarray
    result: envs.StepResult
    turns: List[Optional[MdStepOutput]]

    @property
    def next_obs(self) -> List[np.ndarray]:
        return self.result.observations

    @property
    def rewards(self) -> np.ndarray:
        return self.result.rewards


def select_action(out: np.ndarray, discrete: bool, explore: bool, noise: Optional[OUState],
                  rng: Optional[np.random.Generator], temperature: float = 1.0) -> np.ndarray:
    """
    Turn a policy output into an executed action.

    Discrete: exploring adds OU noise to the logits and draws a relaxed
    Gumbel-Softmax sample; greedy is a hard one-hot argmax.
    Continuous: exploring adds OU noise and clips to [-1, 1]; greedy is the
    tanh output itself.
    """
    if explore and rng is None:
        raise ConfigurationError("Exploring rollouts need a random stream")
    if discrete:
        if not explore:
            return onehot_argmax(out)
        logits = out + ou_next(noise, rng) if noise is not None else out
        sample, _ = gumbel_softmax(logits, temperature, rng)
        return sample
    if not explore:
        return np.asarray(out, dtype=np.float64).copy()
    noisy = out + ou_next(noise, rng) if noise is not None else out
    return np.clip(noisy, -1.0, 1.0)


def episode_steps(team: "Team", env_config: EnvConfig, seed: int, explore: bool = False,
                  noises: Optional[Sequence[OUState]] = None, rng: Optional[np.random.Generator] = None,
                  corruption_std: float = 0.0, random_memory_std: Optional[float] = None,
                  memory_rng: Optional[np.random.Generator] = None) -> Iterator[StepRecord]:
    """
    Run one episode and yield each timestep.

    Args:
        team: Trained or freshly initialised team
        env_config: Task configuration (must match the team's dimensions)
        seed: Episode seed for envs.reset
        explore: Add exploration noise and sample relaxed discrete actions
        noises: One OUState per agent (exploring only)
        rng: Stream for OU and Gumbel draws (exploring only)
        corruption_std: N(0, std^2) noise added to the message after every commit
        random_memory_std: If set, every agent reads fresh N(0, s^2) noise
            instead of the message
        memory_rng: Stream for corruption and random-memory draws
    """
    memory_size = team.memory_size
    if (corruption_std > 0 or random_memory_std is not None) and not team.uses_memory:
        raise ConfigurationError(f"{team.algorithm} has no memory device to corrupt")
    if (corruption_std > 0 or random_memory_std is not None) and memory_rng is None:
        raise ConfigurationError("Memory noise needs a random stream")

    state, obs = envs.reset(env_config, seed)
    m = np.zeros(memory_size)
    for t in range(env_config.horizon):
        actions, snapshots, turns = [], [], []
        for i, actor in enumerate(team.actors):
            x = actor_input(team.algorithm, obs, i)
            if actor.uses_memory:
                if random_memory_std is not None:
                    m = memory_rng.normal(0.0, random_memory_std, size=memory_size)
                turn = actor.step(x, m)
                out = turn.action
                snapshots.append(turn.memory_snapshot)
                m = turn.m_prime
                if corruption_std > 0:
                    m = m + memory_rng.normal(0.0, corruption_std, size=memory_size)
                turns.append(turn)
            else:
                out, _, _ = actor.forward(x)
                turns.append(None)
            noise = noises[i] if noises is not None else None
            actions.append(select_action(out, env_config.discrete, explore, noise, rng,
                                         team.train_config.gumbel_temperature))

        result = envs.step(state, actions)
        memories = np.stack(snapshots) if snapshots else np.zeros((len(team.actors), 0))
        yield StepRecord(t=t, obs=obs, actions=actions, memories=memories, result=result, turns=turns)
        state, obs = result.state, result.observations


def episode_return(team: "Team", env_config: EnvConfig, seed: int) -> np.ndarray:
    """Greedy per-agent undiscounted return of one episode."""
    total = np.zeros(env_config.n_agents)
    for record in episode_steps(team, env_config, seed):
        total += record.rewards
    return total
