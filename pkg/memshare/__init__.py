"""
memshare: memory-driven multi-agent deep deterministic policy gradient.

Agents share a learnable message that each one reads through a gate and
rewrites in turn before acting; critics are centralised during training.
"""

__version__ = "0.1.0"

from .schemas import EnvConfig, TrainConfig, RunManifest, MetricsReport, TASKS, ALGORITHMS, VARIANTS
from .errors import (MemshareError, ConfigurationError, UsageError, BufferNotReady, DegenerateTraceError,
                     TrainingFault, IncompatibilityError)
from . import nn, memdevice, envs, exploration, replay, actors, rollout, training, evaluation, commanalysis

__all__ = [
    'EnvConfig',
    'TrainConfig',
    'RunManifest',
    'MetricsReport',
    'TASKS',
    'ALGORITHMS',
    'VARIANTS',
    'MemshareError',
    'ConfigurationError',
    'UsageError',
    'BufferNotReady',
    'DegenerateTraceError',
    'TrainingFault',
    'IncompatibilityError',
    'nn',
    'memdevice',
    'envs',
    'exploration',
    'replay',
    'actors',
    'rollout',
    'training',
    'evaluation',
    'commanalysis',
]
