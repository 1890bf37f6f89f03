"""
Memory-driven policy.

Each agent encodes its observation, reads the shared message through a
sigmoid gate, writes an updated message through LSTM-style input/forget
gates and selects an action from [encoding, read vector, updated message].
Agents act in turn: the caller commits ``m_prime`` to the shared device
before the next agent reads it.

Ablation variants:
    full        every component
    no-context  read gate sees [e, m] only (no context vector h)
    no-read     read vector dropped from the action head input
    no-write    memory passed through unchanged (m' = m)
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, UsageError
from .nn import MlpCache, MlpSpec, Params, init_mlp, mlp_backward, mlp_forward, uniform_fan_in

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no-context", "no-read", "no-write")


@dataclass(frozen=True)
class PolicyDims:
    """Dimensions and layout of one memory-driven policy."""

    obs_dim: int
    action_dim: int
    memory_size: int = 200
    encoding_size: int = 200
    context_size: int = 200
    encoder_hidden: int = 512
    action_hidden: int = 256
    discrete: bool = True
    variant: str = "full"
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"Variant '{self.variant}' is not valid. Must be one of: {', '.join(VARIANTS)}")
        if self.obs_dim <= 0 or self.action_dim <= 0:
            raise ConfigurationError(f"obs_dim and action_dim must be positive, got {self.obs_dim}, {self.action_dim}")
        if self.memory_size < 0:
            raise ConfigurationError(f"memory_size must be >= 0, got {self.memory_size}")

    @property
    def reads(self) -> bool:
        return self.variant != "no-read"

    @property
    def writes(self) -> bool:
        return self.variant != "no-write"

    @property
    def uses_context(self) -> bool:
        return self.variant in ("full", "no-write")

    @property
    def read_gate_input(self) -> int:
        E, H, M = self.encoding_size, self.context_size, self.memory_size
        return E + H + M if self.uses_context else E + M

    @property
    def head_input(self) -> int:
        E, M = self.encoding_size, self.memory_size
        return E + (M if self.reads else 0) + M

    @property
    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(widths=(self.obs_dim, self.encoder_hidden, self.encoding_size),
                       activations=(self.hidden_activation, "linear"))

    @property
    def head_spec(self) -> MlpSpec:
        out = "gumbel-softmax-head" if self.discrete else "tanh"
        return MlpSpec(widths=(self.head_input, self.action_hidden, self.action_dim),
                       activations=(self.hidden_activation, out))


# Gate blocks in serialisation order, with the dims flag that enables them
_GATE_BLOCKS = (
    ("W_h", "uses_context"), ("W_k", "reads"), ("b_k", "reads"),
    ("W_c", "writes"), ("b_c", "writes"), ("W_g", "writes"), ("b_g", "writes"),
    ("W_f", "writes"), ("b_f", "writes"),
)


@dataclass
class MdPolicyParams:
    """
    Parameter bundle of one agent: encoder, context map, read gate, write
    gates and action head. Blocks a variant does not use are None.
    """

    dims: PolicyDims
    enc: Params
    act: Params
    W_h: Optional[np.ndarray] = None
    W_k: Optional[np.ndarray] = None
    b_k: Optional[np.ndarray] = None
    W_c: Optional[np.ndarray] = None
    b_c: Optional[np.ndarray] = None
    W_g: Optional[np.ndarray] = None
    b_g: Optional[np.ndarray] = None
    W_f: Optional[np.ndarray] = None
    b_f: Optional[np.ndarray] = None

    def named_blocks(self) -> Dict[str, np.ndarray]:
        """Ordered blocks: enc.*, W_h, W_k, b_k, W_c, ..., act.*"""
        blocks: Dict[str, np.ndarray] = {}
        for layer in range(len(self.enc) // 2):
            blocks[f"enc.{layer}.weight"] = self.enc[2 * layer]
            blocks[f"enc.{layer}.bias"] = self.enc[2 * layer + 1]
        for name, flag in _GATE_BLOCKS:
            if getattr(self.dims, flag):
                blocks[name] = getattr(self, name)
        for layer in range(len(self.act) // 2):
            blocks[f"act.{layer}.weight"] = self.act[2 * layer]
            blocks[f"act.{layer}.bias"] = self.act[2 * layer + 1]
        return blocks

    def flat(self) -> List[np.ndarray]:
        return list(self.named_blocks().values())

    @classmethod
    def from_flat(cls, dims: PolicyDims, arrays: List[np.ndarray]) -> "MdPolicyParams":
        template = expected_shapes(dims)
        if len(arrays) != len(template):
            raise ConfigurationError(f"Expected {len(template)} policy blocks, got {len(arrays)}")
        named = dict(zip(template.keys(), arrays))
        for name, shape in template.items():
            if tuple(named[name].shape) != shape:
                raise ConfigurationError(f"Block {name}: expected shape {shape}, found {named[name].shape}")
        enc = [named[f"enc.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}"] for i in range(4)]
        act = [named[f"act.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}"] for i in range(4)]
        gates = {name: named.get(name) for name, _ in _GATE_BLOCKS}
        return cls(dims=dims, enc=enc, act=act, **gates)


def expected_shapes(dims: PolicyDims) -> Dict[str, Tuple[int, ...]]:
    """Block name -> shape for a policy with these dimensions."""
    E, H, M = dims.encoding_size, dims.context_size, dims.memory_size
    shapes: Dict[str, Tuple[int, ...]] = {}
    for i, shape in enumerate(dims.encoder_spec.param_shapes()):
        shapes[f"enc.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}"] = shape
    gate_shapes = {
        "W_h": (H, E), "W_k": (M, dims.read_gate_input), "b_k": (M,),
        "W_c": (M, E + M), "b_c": (M,), "W_g": (M, E + M), "b_g": (M,),
        "W_f": (M, E + M), "b_f": (M,),
    }
    for name, flag in _GATE_BLOCKS:
        if getattr(dims, flag):
            shapes[name] = gate_shapes[name]
    for i, shape in enumerate(dims.head_spec.param_shapes()):
        shapes[f"act.{i // 2}.{'weight' if i % 2 == 0 else 'bias'}"] = shape
    return shapes


def init_policy(dims: PolicyDims, rng: np.random.Generator) -> MdPolicyParams:
    """Fan-in uniform weights, zero biases, for every block the variant uses."""
    E, H, M = dims.encoding_size, dims.context_size, dims.memory_size
    enc = init_mlp(dims.encoder_spec, rng)
    gates = {}
    if dims.uses_context:
        gates["W_h"] = uniform_fan_in(rng, H, E)
    if dims.reads:
        gates["W_k"] = uniform_fan_in(rng, M, dims.read_gate_input)
        gates["b_k"] = np.zeros(M)
    if dims.writes:
        for name in ("c", "g", "f"):
            gates[f"W_{name}"] = uniform_fan_in(rng, M, E + M)
            gates[f"b_{name}"] = np.zeros(M)
    act = init_mlp(dims.head_spec, rng)
    return MdPolicyParams(dims=dims, enc=enc, act=act, **gates)


def zero_like(params: MdPolicyParams) -> MdPolicyParams:
    """A bundle with the same layout and every entry zero."""
    return MdPolicyParams.from_flat(params.dims, [np.zeros_like(a) for a in params.flat()])


@dataclass
class MdStepOutput:
    """Result of one agent's turn."""

    e: np.ndarray
    r: np.ndarray
    m_prime: np.ndarray
    action: np.ndarray
    memory_snapshot: np.ndarray
    k: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None


@dataclass
class MdCache:
    """Intermediates of a batched policy forward pass."""

    dims: PolicyDims
    obs: np.ndarray
    m: np.ndarray
    enc_cache: MlpCache
    e: np.ndarray
    head_cache: MlpCache
    m_prime: np.ndarray
    h: Optional[np.ndarray] = None
    u_k: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None
    u_w: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    f: Optional[np.ndarray] = None
    squeeze: bool = False


def _as_batch(x: np.ndarray, width: int, label: str) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    batch = x[None, :] if squeeze else x
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ConfigurationError(f"{label} has shape {x.shape}, expected last dimension {width}")
    return batch, squeeze


def _squeeze(x: Optional[np.ndarray], squeeze: bool) -> Optional[np.ndarray]:
    if x is None or not squeeze:
        return x
    return x[0]


def _read_gate(params: MdPolicyParams, e: np.ndarray, m: np.ndarray):
    dims = params.dims
    h = None
    if dims.uses_context:
        h = e @ params.W_h.T
        u_k = np.concatenate([e, h, m], axis=-1)
    else:
        u_k = np.concatenate([e, m], axis=-1)
    k = expit(u_k @ params.W_k.T + params.b_k)
    return m * k, k, h, u_k


def _write_gates(params: MdPolicyParams, e: np.ndarray, m: np.ndarray):
    u_w = np.concatenate([e, m], axis=-1)
    c = np.tanh(u_w @ params.W_c.T + params.b_c)
    g = expit(u_w @ params.W_g.T + params.b_g)
    f = expit(u_w @ params.W_f.T + params.b_f)
    return g * c + f * m, c, g, f, u_w


def encode(params: MdPolicyParams, o: np.ndarray) -> np.ndarray:
    """e_i = enc(o_i)."""
    batch, squeeze = _as_batch(o, params.dims.obs_dim, "observation")
    e, _ = mlp_forward(params.dims.encoder_spec, params.enc, batch)
    return _squeeze(e, squeeze)


def read(params: MdPolicyParams, e: np.ndarray, m: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Gated read of the shared message.

    Returns:
        Tuple of (r_i = m * k_i, read gate k_i, context vector h_i or None
        for the no-context variant)
    """
    dims = params.dims
    if not dims.reads:
        raise UsageError("The no-read variant has no read gate")
    e_b, squeeze = _as_batch(e, dims.encoding_size, "encoding")
    m_b, _ = _as_batch(m, dims.memory_size, "memory")
    r, k, h, _ = _read_gate(params, e_b, m_b)
    return _squeeze(r, squeeze), _squeeze(k, squeeze), _squeeze(h, squeeze)


def write(params: MdPolicyParams, e: np.ndarray, m: np.ndarray) -> Tuple[np.ndarray, ...]:
    """
    Gated write: m' = g * c + f * m.

    Returns:
        Tuple of (m_prime, candidate c, input gate g, forget gate f); the
        gates are None for the no-write variant, where m' = m
    """
    dims = params.dims
    e_b, squeeze = _as_batch(e, dims.encoding_size, "encoding")
    m_b, _ = _as_batch(m, dims.memory_size, "memory")
    if not dims.writes:
        return _squeeze(m_b.copy(), squeeze), None, None, None
    m_prime, c, g, f, _ = _write_gates(params, e_b, m_b)
    return tuple(_squeeze(x, squeeze) for x in (m_prime, c, g, f))


def act(params: MdPolicyParams, e: np.ndarray, r: Optional[np.ndarray], m_prime: np.ndarray) -> np.ndarray:
    """Action head on [e, r, m']; logits for discrete tasks, tanh 2-vector otherwise."""
    dims = params.dims
    parts = [e, r, m_prime] if dims.reads else [e, m_prime]
    head_in = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)
    batch, squeeze = _as_batch(head_in, dims.head_input, "action head input")
    out, _ = mlp_forward(dims.head_spec, params.act, batch)
    return _squeeze(out, squeeze)


def policy_forward(params: MdPolicyParams, obs: np.ndarray, m: np.ndarray) -> Tuple[np.ndarray, np.ndarray, MdCache]:
    """
    encode -> read -> write -> act on a vector or a batch.

    Returns:
        Tuple of (action output, updated message m', cache for policy_backward)
    """
    dims = params.dims
    obs_b, squeeze = _as_batch(obs, dims.obs_dim, "observation")
    m_b, m_squeeze = _as_batch(m, dims.memory_size, "memory")
    if m_squeeze != squeeze or m_b.shape[0] != obs_b.shape[0]:
        raise ConfigurationError(f"observation batch {obs_b.shape} and memory batch {m_b.shape} disagree")

    e, enc_cache = mlp_forward(dims.encoder_spec, params.enc, obs_b)
    cache = MdCache(dims=dims, obs=obs_b, m=m_b, enc_cache=enc_cache, e=e,
                    head_cache=None, m_prime=None, squeeze=squeeze)

    if dims.reads:
        cache.r, cache.k, cache.h, cache.u_k = _read_gate(params, e, m_b)
    if dims.writes:
        cache.m_prime, cache.c, cache.g, cache.f, cache.u_w = _write_gates(params, e, m_b)
    else:
        cache.m_prime = m_b.copy()

    parts = [e, cache.r, cache.m_prime] if dims.reads else [e, cache.m_prime]
    action, cache.head_cache = mlp_forward(dims.head_spec, params.act, np.concatenate(parts, axis=-1))
    return _squeeze(action, squeeze), _squeeze(cache.m_prime, squeeze), cache


def policy_backward(params: MdPolicyParams, cache: MdCache, d_action: np.ndarray,
                    d_mprime: Optional[np.ndarray] = None) -> Tuple[MdPolicyParams, np.ndarray]:
    """
    Backpropagate through the gated read/write graph.

    Args:
        params: The parameters used for the cached forward pass
        cache: Output of policy_forward
        d_action: Gradient with respect to the action output
        d_mprime: Optional gradient with respect to m' (added to the path
            through the action head)

    Returns:
        Tuple of (gradients as an MdPolicyParams bundle, gradient w.r.t. m)
    """
    dims = cache.dims
    if dims != params.dims:
        raise UsageError("policy cache was produced by a policy with different dimensions")
    E, H, M = dims.encoding_size, dims.context_size, dims.memory_size

    d_action = np.asarray(d_action, dtype=np.float64)
    if cache.squeeze and d_action.ndim == 1:
        d_action = d_action[None, :]
    head_grads, d_in = mlp_backward(cache.head_cache, d_action)

    d_e = d_in[:, :E].copy()
    offset = E
    d_r = None
    if dims.reads:
        d_r = d_in[:, offset:offset + M]
        offset += M
    d_mp = d_in[:, offset:offset + M]
    if d_mprime is not None:
        d_mprime = np.asarray(d_mprime, dtype=np.float64)
        d_mp = d_mp + (d_mprime[None, :] if d_mprime.ndim == 1 else d_mprime)

    d_m = np.zeros_like(cache.m)
    grads = {}

    if dims.writes:
        c, g, f = cache.c, cache.g, cache.f
        d_m += d_mp * f
        d_zc = d_mp * g * (1.0 - c * c)
        d_zg = d_mp * c * g * (1.0 - g)
        d_zf = d_mp * cache.m * f * (1.0 - f)
        for name, dz in (("c", d_zc), ("g", d_zg), ("f", d_zf)):
            grads[f"W_{name}"] = dz.T @ cache.u_w
            grads[f"b_{name}"] = dz.sum(axis=0)
        d_uw = d_zc @ params.W_c + d_zg @ params.W_g + d_zf @ params.W_f
        d_e += d_uw[:, :E]
        d_m += d_uw[:, E:]
    else:
        d_m += d_mp

    if dims.reads:
        k = cache.k
        d_m += d_r * k
        d_zk = d_r * cache.m * k * (1.0 - k)
        grads["W_k"] = d_zk.T @ cache.u_k
        grads["b_k"] = d_zk.sum(axis=0)
        d_uk = d_zk @ params.W_k
        d_e += d_uk[:, :E]
        if dims.uses_context:
            d_h = d_uk[:, E:E + H]
            d_m += d_uk[:, E + H:]
            grads["W_h"] = d_h.T @ cache.e
            d_e += d_h @ params.W_h
        else:
            d_m += d_uk[:, E:]

    enc_grads, _ = mlp_backward(cache.enc_cache, d_e)
    bundle = MdPolicyParams(dims=dims, enc=enc_grads, act=head_grads, **grads)
    return bundle, _squeeze(d_m, cache.squeeze)


def policy_step(params: MdPolicyParams, o: np.ndarray, m: np.ndarray) -> MdStepOutput:
    """
    One agent's turn: encode, read, write, act.

    The returned ``memory_snapshot`` is the message the agent read (the
    replay entry for this agent); the caller commits ``m_prime`` to the
    shared device before the next agent acts.
    """
    o = np.asarray(o, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if o.ndim != 1 or m.ndim != 1:
        raise ConfigurationError("policy_step takes a single observation and message vector")
    action, m_prime, cache = policy_forward(params, o, m)
    r = cache.r[0] if cache.r is not None else np.zeros(params.dims.memory_size)
    return MdStepOutput(
        e=cache.e[0], r=r, m_prime=m_prime, action=action, memory_snapshot=m.copy(),
        k=_squeeze(cache.k, True), h=_squeeze(cache.h, True),
        c=_squeeze(cache.c, True), g=_squeeze(cache.g, True), f=_squeeze(cache.f, True),
    )


def ablated_policy_step(variant: str, params: MdPolicyParams, o: np.ndarray, m: np.ndarray) -> MdStepOutput:
    """
    policy_step for an ablated policy; the variant must match the params.

    Raises:
        ConfigurationError: If the params were built for another variant
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"Variant '{variant}' is not valid. Must be one of: {', '.join(VARIANTS)}")
    if params.dims.variant != variant:
        raise ConfigurationError(f"Parameters were built for variant '{params.dims.variant}', not '{variant}'")
    return policy_step(params, o, m)


def with_variant(dims: PolicyDims, variant: str) -> PolicyDims:
    return replace(dims, variant=variant)
