"""
Experience replay with per-agent memory snapshots.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import BufferNotReady, ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    """
    One joint step: observations, next observations, executed actions,
    the memory each agent read (N x M, empty for memoryless algorithms)
    and per-agent rewards.
    """

    obs: List[np.ndarray]
    next_obs: List[np.ndarray]
    actions: List[np.ndarray]
    memories: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        arity = (len(self.next_obs), len(self.actions), len(self.rewards))
        if any(a != n for a in arity):
            raise ConfigurationError(f"Transition arity mismatch: obs {n}, next_obs/actions/rewards {arity}")
        if self.memories.size and self.memories.shape[0] != n:
            raise ConfigurationError(f"Transition holds {self.memories.shape[0]} memory snapshots for {n} agents")


@dataclass
class Minibatch:
    """Per-agent stacked arrays: obs[i] is B x obs_dim_i, memories is B x N x M."""

    obs: List[np.ndarray]
    next_obs: List[np.ndarray]
    actions: List[np.ndarray]
    memories: np.ndarray
    rewards: np.ndarray

    @property
    def size(self) -> int:
        return self.rewards.shape[0]


class ReplayBuffer:
    """
    Fixed-capacity FIFO ring of transitions.

    Sampling is uniform with replacement over the stored items.
    """

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ConfigurationError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.storage: List[Transition] = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.storage)

    def push(self, transition: Transition) -> None:
        if len(self.storage) < self.capacity:
            self.storage.append(transition)
        else:
            self.storage[self.cursor] = transition
        self.cursor = (self.cursor + 1) % self.capacity

    def get(self, index: int) -> Transition:
        """Item by age: 0 is the oldest stored transition."""
        if len(self.storage) < self.capacity:
            return self.storage[index]
        return self.storage[(self.cursor + index) % self.capacity]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.storage) < batch_size:
            raise BufferNotReady(len(self.storage), batch_size)
        return rng.integers(0, len(self.storage), size=batch_size)

    def collate(self, indices: np.ndarray) -> Minibatch:
        items = [self.storage[i] for i in indices]
        n = len(items[0].obs)
        return Minibatch(
            obs=[np.stack([t.obs[i] for t in items]) for i in range(n)],
            next_obs=[np.stack([t.next_obs[i] for t in items]) for i in range(n)],
            actions=[np.stack([t.actions[i] for t in items]) for i in range(n)],
            memories=np.stack([t.memories for t in items]),
            rewards=np.stack([t.rewards for t in items]),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Minibatch:
        """
        Raises:
            BufferNotReady: If fewer than batch_size transitions are stored
        """
        return self.collate(self.sample_indices(batch_size, rng))
