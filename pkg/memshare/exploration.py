"""
Exploration noise and the discrete-action relaxation.

Continuous actions get Ornstein-Uhlenbeck noise added at execution time.
Discrete actions get OU noise on the logits and are then sampled through a
Gumbel-Softmax, which also carries the policy gradient during updates.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import softmax

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class OUState:
    """Current noise vector and process constants (mean mu)."""

    x: np.ndarray
    theta: float = 0.15
    sigma: float = 0.3
    mu: float = 0.0

    @classmethod
    def zeros(cls, size: int, theta: float = 0.15, sigma: float = 0.3, mu: float = 0.0) -> "OUState":
        return cls(x=np.full(size, float(mu)), theta=theta, sigma=sigma, mu=mu)


def ou_next(state: OUState, rng: np.random.Generator) -> np.ndarray:
    """
    x_{t+1} = x_t + theta * (mu - x_t) + sigma * eps, eps ~ N(0, 1) per coordinate.

    Advances the state in place and returns the new noise vector.
    """
    eps = rng.standard_normal(state.x.shape)
    state.x = state.x + state.theta * (state.mu - state.x) + state.sigma * eps
    return state.x.copy()


def decayed_sigma(base_sigma: float, episode: int, total_episodes: int, fraction: float = 0.8) -> float:
    """Linear decay of sigma to zero over the first ``fraction`` of training."""
    horizon = fraction * total_episodes
    if horizon <= 0:
        return base_sigma
    return base_sigma * max(0.0, 1.0 - episode / horizon)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel noise, -log(-log U) with U in the open unit interval."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: np.ndarray, temperature: float, rng: np.random.Generator,
                   noise: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Relaxed one-hot sample softmax((logits + g) / temperature).

    Args:
        logits: Vector or batch (rows) of logits
        temperature: Positive temperature
        rng: Random stream for the Gumbel noise
        noise: Optional pre-drawn Gumbel noise of the same shape

    Returns:
        Tuple of (sample on the simplex, the Gumbel noise used)
    """
    if temperature <= 0:
        raise ConfigurationError(f"Gumbel-Softmax temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    g = sample_gumbel(logits.shape, rng) if noise is None else noise
    return softmax((logits + g) / temperature, axis=-1), g


def gumbel_softmax_backward(sample: np.ndarray, d_sample: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient w.r.t. the logits given the upstream gradient on the sample."""
    inner = np.sum(d_sample * sample, axis=-1, keepdims=True)
    return sample * (d_sample - inner) / temperature


def onehot_argmax(logits: np.ndarray) -> np.ndarray:
    """Hard greedy action: one-hot at the first maximal logit."""
    logits = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(logits)
    np.put_along_axis(out, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
    return out
