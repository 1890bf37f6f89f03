"""
Minimal dense-network engine.

Forward/backward passes for fixed-shape MLPs, Adam, Polyak target updates and
the versioned binary checkpoint container. Every learnable function in the
package (encoders, gate maps, action heads, critics) is built from here.

All arrays are float64. Functions are pure: parameters go in, new
parameters come out, and no state is shared between calls.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import expit

from .errors import ConfigurationError, IncompatibilityError, TrainingFault, UsageError

logger = logging.getLogger(__name__)

# Engine activation tags. The gumbel-softmax head is linear at this level:
# the network emits logits and the relaxation is applied by the caller.
ENGINE_ACTIVATIONS = {"relu", "tanh", "sigmoid", "linear", "gumbel-softmax-head"}

CHECKPOINT_MAGIC = b"MEMSHARE"
CHECKPOINT_VERSION = 1

Params = List[np.ndarray]


class MlpSpec(BaseModel):
    """
    Layer widths (input width first) and one activation tag per layer.

    ``MlpSpec(widths=(2, 3, 1), activations=("relu", "linear"))`` is a
    2 -> 3 relu -> 1 linear network.
    """

    model_config = ConfigDict(frozen=True)

    widths: Tuple[int, ...]
    activations: Tuple[str, ...]

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v):
        if len(v) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w < 0 for w in v) or any(w == 0 for w in v[1:]):
            raise ValueError(f"layer widths must be positive, got {v}")
        return v

    @field_validator("activations")
    @classmethod
    def validate_activations(cls, v):
        for tag in v:
            if tag not in ENGINE_ACTIVATIONS:
                raise ValueError(f"Activation '{tag}' is not valid. Must be one of: {sorted(ENGINE_ACTIVATIONS)}")
        return v

    @model_validator(mode="after")
    def one_activation_per_layer(self):
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError(
                f"{len(self.widths) - 1} layers need {len(self.widths) - 1} activations, got {len(self.activations)}"
            )
        return self

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self) -> List[Tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            shapes.append((fan_out, fan_in))
            shapes.append((fan_out,))
        return shapes


def mlp_spec(input_dim: int, hidden: Sequence[int], output_dim: int,
             hidden_activation: str = "relu", output_activation: str = "linear") -> MlpSpec:
    """Build an MlpSpec from hidden widths and activation tags."""
    widths = (input_dim, *hidden, output_dim)
    activations = tuple([hidden_activation] * len(hidden) + [output_activation])
    return MlpSpec(widths=widths, activations=activations)


def uniform_fan_in(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    if cols == 0 or rows == 0:
        return np.zeros((rows, cols))
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> Params:
    """Initialise weights fan-in uniform and biases at zero."""
    params: Params = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        params.append(uniform_fan_in(rng, fan_out, fan_in))
        params.append(np.zeros(fan_out))
    return params


def check_params(spec: MlpSpec, params: Sequence[np.ndarray]) -> None:
    """
    Raises:
        ConfigurationError: If the parameter list does not match the MlpSpec
    """
    expected = spec.param_shapes()
    found = [tuple(p.shape) for p in params]
    if expected != found:
        raise ConfigurationError(f"MLP parameters do not match spec: expected {expected}, found {found}")


def _activate(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "sigmoid":
        return expit(z)
    return z


def _activation_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return (z > 0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class MlpCache:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    spec: MlpSpec
    params: Tuple[np.ndarray, ...]
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)
    squeeze: bool = False

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]


def mlp_forward(spec: MlpSpec, params: Sequence[np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """
    Run the network on a vector (d,) or a batch (B, d).

    Args:
        spec: Network layout
        params: [W0, b0, W1, b1, ...] with W of shape (out, in)
        x: Input vector or batch

    Returns:
        Tuple of (output with the same rank as x, cache for mlp_backward)

    Raises:
        ConfigurationError: On input or parameter dimension mismatch
    """
    check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != spec.input_dim:
        raise ConfigurationError(f"MLP input has shape {x.shape}, expected last dimension {spec.input_dim}")

    cache = MlpCache(spec=spec, params=tuple(params), squeeze=squeeze)
    for layer, tag in enumerate(spec.activations):
        W, b = params[2 * layer], params[2 * layer + 1]
        z = a @ W.T + b
        out = _activate(tag, z)
        cache.inputs.append(a)
        cache.pre.append(z)
        cache.post.append(out)
        a = out

    return (a[0] if squeeze else a), cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray) -> Tuple[Params, np.ndarray]:
    """
    Backpropagate an upstream gradient through a cached forward pass.

    The upstream gradient is taken as-is: for a mean loss over a batch the
    caller folds the 1/B factor in before calling.

    Returns:
        Tuple of (parameter gradients in params order, input gradient)

    Raises:
        UsageError: If the upstream gradient does not match the cached output
    """
    if not cache.inputs:
        raise UsageError("MLP cache is empty; run mlp_forward first")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :] if g.ndim == 1 else g
    expected = cache.post[-1].shape
    if g.shape != expected:
        raise UsageError(f"Upstream gradient shape {np.shape(upstream)} does not match cached output {expected}")

    grads: Params = [None] * (2 * cache.spec.n_layers)
    for layer in reversed(range(cache.spec.n_layers)):
        tag = cache.spec.activations[layer]
        dz = g * _activation_grad(tag, cache.pre[layer], cache.post[layer])
        W = cache.params[2 * layer]
        grads[2 * layer] = dz.T @ cache.inputs[layer]
        grads[2 * layer + 1] = dz.sum(axis=0)
        g = dz @ W

    return grads, (g[0] if cache.squeeze else g)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        step=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> Tuple[Params, AdamState]:
    """
    One bias-corrected Adam step (descent direction).

    Returns:
        Tuple of (new parameter list, new AdamState)

    Raises:
        ConfigurationError: If shapes disagree
        TrainingFault: If any gradient entry is not finite
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError(
            f"Adam got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for index, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigurationError(f"Adam slot {index}: parameter {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingFault(
                f"Non-finite gradient in Adam slot {index}",
                diagnostic={"slot": index, "shape": list(g.shape), "step": state.step},
            )

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    return new_params, AdamState(m=new_m, v=new_v, step=step, beta1=b1, beta2=b2, eps=state.eps)


def soft_update(target: Sequence[np.ndarray], source: Sequence[np.ndarray], tau: float) -> Params:
    """
    Polyak update: (1 - tau) * target + tau * source, elementwise.

    Raises:
        ConfigurationError: If tau is outside [0, 1] or shapes disagree
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"tau must lie in [0, 1], got {tau}")
    if len(target) != len(source):
        raise ConfigurationError(f"soft_update got {len(target)} target and {len(source)} source arrays")
    updated = []
    for t, s in zip(target, source):
        if t.shape != s.shape:
            raise ConfigurationError(f"soft_update shape mismatch: target {t.shape} vs source {s.shape}")
        updated.append((1.0 - tau) * t + tau * s)
    return updated


def copy_params(params: Sequence[np.ndarray]) -> Params:
    return [np.array(p, dtype=np.float64, copy=True) for p in params]


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], blocks: Dict[str, np.ndarray], descriptor: Dict) -> Path:
    """
    Write parameter blocks to the binary container plus a JSON sidecar.

    Layout: magic, uint32 format version, uint32 descriptor length, UTF-8
    JSON descriptor (with the ordered block names and shapes), then every
    block as little-endian float64 in declared order.

    Args:
        path: Target file (sidecar goes to ``<path>.json``)
        blocks: Ordered mapping of block name to array
        descriptor: JSON-compatible description of the network layout

    Returns:
        Path of the written container
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks.items()]
    header = dict(descriptor)
    header["blocks"] = layout
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for arr in blocks.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    sidecar = {"format_version": CHECKPOINT_VERSION, "descriptor": descriptor, "blocks": layout}
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.debug(f"Saved checkpoint {path} with {len(layout)} blocks")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a container written by save_checkpoint.

    Returns:
        Tuple of (ordered name -> array mapping, descriptor)

    Raises:
        IncompatibilityError: On bad magic, unknown version or truncated data
    """
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IncompatibilityError(f"{path} is not a memshare checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", data, offset)
    if version != CHECKPOINT_VERSION:
        raise IncompatibilityError(f"{path} has format version {version}",
                                   expected={"version": CHECKPOINT_VERSION}, found={"version": version})
    offset += 8
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    blocks: Dict[str, np.ndarray] = {}
    for entry in header.pop("blocks"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise IncompatibilityError(f"{path} is truncated at block {entry['name']}")
        if count == 0:
            blocks[entry["name"]] = np.zeros(shape)
            continue
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        blocks[entry["name"]] = arr.reshape(shape)
        offset += nbytes
    return blocks, header
