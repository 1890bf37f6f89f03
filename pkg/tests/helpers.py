"""
Shared test helpers: tiny configs, finite differences and an independent
power-iteration eigensolver used as the PCA oracle.
"""

from pathlib import Path
from typing import Callable, Dict, Tuple

import numpy as np

from memshare.cli import load_config
from memshare.schemas import EnvConfig, TrainConfig

CONFIGS_DIR = Path(__file__).resolve().parents[1] / "configs"

TINY_TRAIN = dict(
    memory_size=4, encoding_size=5, context_size=3, encoder_hidden=6, action_hidden=5,
    baseline_hidden=[6, 5], critic_hidden=[8, 6], batch_size=8, update_every=5,
    buffer_capacity=500, eval_interval=2, eval_episodes=2,
)


def tiny_train(algorithm: str = "MD-MADDPG", **overrides) -> TrainConfig:
    return TrainConfig(algorithm=algorithm, **{**TINY_TRAIN, **overrides})


def tiny_env(task: str = "CN", **overrides) -> EnvConfig:
    overrides.setdefault("horizon", 10)
    return EnvConfig(task=task, **overrides)


def desk_config(name: str) -> Tuple[EnvConfig, TrainConfig, Dict]:
    """One of the shipped desk-scale presets."""
    return load_config(CONFIGS_DIR / name)


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6, max_entries: int = None,
                 rng: np.random.Generator = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central differences of f with respect to entries of ``array`` (perturbed in place).

    Returns:
        Tuple of (flat indices checked, numeric derivatives at those indices)
    """
    flat = array.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        indices = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
    values = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        original = flat[idx]
        flat[idx] = original + eps
        up = f()
        flat[idx] = original - eps
        down = f()
        flat[idx] = original
        values[n] = (up - down) / (2 * eps)
    return indices, values


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))))


def power_iteration_eigh(matrix: np.ndarray, k: int, iterations: int = 50000, tol: float = 1e-15,
                         seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Top-k eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Returns:
        Tuple of (eigenvalues, eigenvectors as rows)
    """
    rng = np.random.default_rng(seed)
    work = np.array(matrix, dtype=np.float64, copy=True)
    n = work.shape[0]
    values, vectors = [], []
    for _ in range(k):
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        for _ in range(iterations):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        lam = float(v @ work @ v)
        values.append(lam)
        vectors.append(v)
        work = work - lam * np.outer(v, v)
    return np.array(values), np.array(vectors)


def align_sign(reference: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    return candidate if reference @ candidate >= 0 else -candidate
