"""
Policy wrappers with one interface for the three algorithms.

MD-MADDPG actors run the memory-driven policy. MADDPG and MA-MADDPG
actors are plain MLPs; the meta-agent variant conditions on the
concatenated observations of every agent.
"""

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .memdevice import MdPolicyParams, MdStepOutput, PolicyDims, init_policy, policy_backward, policy_forward, policy_step
from .nn import MlpSpec, Params, check_params, init_mlp, mlp_backward, mlp_forward, mlp_spec
from .schemas import EnvConfig, TrainConfig

logger = logging.getLogger(__name__)


class MemoryActor:
    """Memory-driven actor: forward also returns the updated message."""

    uses_memory = True

    def __init__(self, params: MdPolicyParams):
        self.params = params

    @property
    def dims(self) -> PolicyDims:
        return self.params.dims

    @property
    def input_dim(self) -> int:
        return self.dims.obs_dim

    @property
    def action_dim(self) -> int:
        return self.dims.action_dim

    @property
    def memory_size(self) -> int:
        return self.dims.memory_size

    def flat(self) -> Params:
        return self.params.flat()

    def with_flat(self, arrays: Sequence[np.ndarray]) -> "MemoryActor":
        return MemoryActor(MdPolicyParams.from_flat(self.dims, list(arrays)))

    def named_blocks(self) -> Dict[str, np.ndarray]:
        return self.params.named_blocks()

    def forward(self, x: np.ndarray, m: np.ndarray):
        return policy_forward(self.params, x, m)

    def backward(self, cache, d_out: np.ndarray) -> Params:
        grads, _ = policy_backward(self.params, cache, d_out)
        return grads.flat()

    def step(self, o: np.ndarray, m: np.ndarray) -> MdStepOutput:
        return policy_step(self.params, o, m)


class MlpActor:
    """Memoryless actor over its own (or the joint) observation."""

    uses_memory = False
    memory_size = 0

    def __init__(self, spec: MlpSpec, params: Params):
        check_params(spec, params)
        self.spec = spec
        self.params = list(params)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim

    def flat(self) -> Params:
        return list(self.params)

    def with_flat(self, arrays: Sequence[np.ndarray]) -> "MlpActor":
        return MlpActor(self.spec, list(arrays))

    def named_blocks(self) -> Dict[str, np.ndarray]:
        blocks = {}
        for layer in range(self.spec.n_layers):
            blocks[f"mlp.{layer}.weight"] = self.params[2 * layer]
            blocks[f"mlp.{layer}.bias"] = self.params[2 * layer + 1]
        return blocks

    def forward(self, x: np.ndarray, m: Optional[np.ndarray] = None):
        out, cache = mlp_forward(self.spec, self.params, x)
        return out, None, cache

    def backward(self, cache, d_out: np.ndarray) -> Params:
        grads, _ = mlp_backward(cache, d_out)
        return grads


Actor = Union[MemoryActor, MlpActor]


def actor_input(algorithm: str, observations: Sequence[np.ndarray], agent: int) -> np.ndarray:
    """Own observation, or all observations concatenated for the meta-agent baseline."""
    if algorithm == "MA-MADDPG":
        return np.concatenate([np.asarray(o, dtype=np.float64) for o in observations], axis=-1)
    return np.asarray(observations[agent], dtype=np.float64)


def policy_dims(obs_dim: int, act_dim: int, env_config: EnvConfig, train_config: TrainConfig) -> PolicyDims:
    return PolicyDims(
        obs_dim=obs_dim, action_dim=act_dim,
        memory_size=train_config.memory_size, encoding_size=train_config.encoding_size,
        context_size=train_config.context_size, encoder_hidden=train_config.encoder_hidden,
        action_hidden=train_config.action_hidden, discrete=env_config.discrete,
        variant=train_config.variant, hidden_activation=train_config.hidden_activation,
    )


def baseline_spec(input_dim: int, act_dim: int, env_config: EnvConfig, train_config: TrainConfig) -> MlpSpec:
    out = "gumbel-softmax-head" if env_config.discrete else "tanh"
    return mlp_spec(input_dim, train_config.baseline_hidden, act_dim, train_config.hidden_activation, out)


def build_actor(agent: int, obs_dims: List[int], act_dim: int, env_config: EnvConfig,
                train_config: TrainConfig, rng: np.random.Generator) -> Actor:
    """Initialise the actor of one agent for the configured algorithm."""
    if train_config.algorithm == "MD-MADDPG":
        return MemoryActor(init_policy(policy_dims(obs_dims[agent], act_dim, env_config, train_config), rng))
    input_dim = sum(obs_dims) if train_config.algorithm == "MA-MADDPG" else obs_dims[agent]
    spec = baseline_spec(input_dim, act_dim, env_config, train_config)
    return MlpActor(spec, init_mlp(spec, rng))
