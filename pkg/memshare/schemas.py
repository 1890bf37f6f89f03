"""
Pydantic schemas for memshare configuration, run manifests and reports.

Configuration is flat on disk: a run config is one JSON document whose keys
are the union of EnvConfig and TrainConfig fields.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Task tags (exact spelling used in config files and run directory names)
TASKS = {"CN", "PO-CN", "SyncCN", "SequentialCN", "SwappingCN", "Waterworld"}

# Tasks with a 5-way discrete move action; Waterworld is continuous
DISCRETE_TASKS = {"CN", "PO-CN", "SyncCN", "SequentialCN", "SwappingCN"}

# Tasks where observations are masked beyond the vision radius
PARTIAL_TASKS = {"PO-CN", "Waterworld"}

ALGORITHMS = {"MD-MADDPG", "MADDPG", "MA-MADDPG"}

VARIANTS = {"full", "no-context", "no-read", "no-write"}

ACTIVATIONS = {"relu", "tanh", "sigmoid", "linear"}

DEFAULT_HORIZON = 100
WATERWORLD_HORIZON = 1000


def _check_member(value: str, allowed: set, label: str) -> str:
    """
    Strict membership validator shared by the tag fields.

    Raises:
        ValueError: If value is not one of the allowed tags
    """
    if value not in allowed:
        valid = ", ".join(sorted(allowed))
        raise ValueError(f"{label} '{value}' is not valid. Must be one of: {valid}")
    return value


class EnvConfig(BaseModel):
    """Task selection, arena physics and reward constants."""

    model_config = ConfigDict(extra="forbid")

    task: str = Field(..., description="One of CN, PO-CN, SyncCN, SequentialCN, SwappingCN, Waterworld")
    n_agents: int = Field(default=2, ge=2, description="Number of agents (2-6 in the reported experiments)")
    horizon: Optional[int] = Field(default=None, gt=0, description="Episode length; 1000 for Waterworld, 100 otherwise")
    seed: int = Field(default=0, ge=0)

    # geometry
    agent_radius: float = Field(default=0.1, gt=0)
    landmark_radius: float = Field(default=0.05, gt=0)
    vision_radius: float = Field(default=0.5, gt=0, description="PO-CN and Waterworld only")
    spawn_extent: float = Field(default=0.9, gt=0, le=1.0, description="Entities spawn in [-extent, extent]^2")
    spawn_retries: int = Field(default=1000, gt=0)

    # physics
    damping: float = Field(default=0.75, ge=0, le=1)
    force_scale: float = Field(default=0.1, gt=0)
    max_speed: float = Field(default=1.0, gt=0)

    # Waterworld
    food_count: int = Field(default=5, ge=1)
    poison_count: int = Field(default=10, ge=0)
    food_radius: float = Field(default=0.08, gt=0)
    poison_radius: float = Field(default=0.05, gt=0)
    target_max_speed: float = Field(default=0.02, ge=0)
    target_jitter: float = Field(default=0.005, ge=0)
    capture_agents: int = Field(default=2, ge=1, description="Agents needed on a food target at once")
    n_sensors: int = Field(default=16, ge=1)

    # rewards
    collision_penalty: float = 1.0
    sync_reward: float = 2.0
    not_sync_penalty: float = 0.25
    shaping_coef: float = 0.01
    sequential_reward: float = 2.0
    overlap_penalty: float = 1.0
    food_reward: float = 10.0
    poison_penalty: float = 1.0

    @field_validator("task")
    @classmethod
    def validate_task(cls, v):
        return _check_member(v, TASKS, "Task")

    @model_validator(mode="after")
    def default_horizon(self):
        if self.horizon is None:
            self.horizon = WATERWORLD_HORIZON if self.task == "Waterworld" else DEFAULT_HORIZON
        if self.task == "Waterworld" and self.capture_agents > self.n_agents:
            raise ValueError(
                f"capture_agents ({self.capture_agents}) cannot exceed n_agents ({self.n_agents})"
            )
        return self

    @property
    def discrete(self) -> bool:
        return self.task in DISCRETE_TASKS

    @property
    def partial(self) -> bool:
        return self.task in PARTIAL_TASKS


class TrainConfig(BaseModel):
    """Algorithm choice, network sizes and optimisation schedule."""

    model_config = ConfigDict(extra="forbid")

    algorithm: str = Field(..., description="MD-MADDPG, MADDPG or MA-MADDPG")
    variant: str = Field(default="full", description="Memory ablation: full, no-context, no-read, no-write")
    seed: int = Field(default=0, ge=0)
    episodes: int = Field(default=60000, ge=0)

    gamma: float = Field(default=0.95, gt=0, lt=1)
    tau: float = Field(default=0.01, gt=0, le=1)
    lr_critic: float = Field(default=1e-3, gt=0)
    lr_actor: float = Field(default=1e-4, gt=0)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=1024, gt=0)
    update_every: int = Field(default=100, gt=0, description="Environment steps between update rounds")
    buffer_capacity: int = Field(default=1_000_000, gt=0)

    memory_size: int = Field(default=200, ge=0, description="M; 0 reduces MD-MADDPG to its memoryless core")
    encoding_size: int = Field(default=200, gt=0, description="E")
    context_size: int = Field(default=200, gt=0, description="H")
    encoder_hidden: int = Field(default=512, gt=0)
    action_hidden: int = Field(default=256, gt=0)
    baseline_hidden: List[int] = Field(default_factory=lambda: [512, 256])
    critic_hidden: List[int] = Field(default_factory=lambda: [1024, 512, 256])
    hidden_activation: str = Field(default="relu")

    gumbel_temperature: float = Field(default=1.0, gt=0)
    ou_theta: float = Field(default=0.15, ge=0)
    ou_sigma: float = Field(default=0.3, ge=0)
    noise_decay: bool = Field(default=True, description="Scale OU sigma linearly to 0 over noise_decay_fraction")
    noise_decay_fraction: float = Field(default=0.8, gt=0, le=1)

    eval_interval: int = Field(default=100, gt=0, description="Episodes between learning-curve evaluations")
    eval_episodes: int = Field(default=10, gt=0)

    @field_validator("algorithm")
    @classmethod
    def validate_algorithm(cls, v):
        return _check_member(v, ALGORITHMS, "Algorithm")

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, v):
        return _check_member(v, VARIANTS, "Variant")

    @field_validator("hidden_activation")
    @classmethod
    def validate_activation(cls, v):
        return _check_member(v, ACTIVATIONS, "Activation")

    @field_validator("baseline_hidden", "critic_hidden")
    @classmethod
    def validate_widths(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("hidden widths must be a non-empty list of positive integers")
        return v

    @model_validator(mode="after")
    def variant_needs_memory(self):
        if self.variant != "full" and self.algorithm != "MD-MADDPG":
            raise ValueError(f"Variant '{self.variant}' only applies to MD-MADDPG")
        return self

    @property
    def uses_memory(self) -> bool:
        return self.algorithm == "MD-MADDPG"


class RunManifest(BaseModel):
    """Written before a long computation starts and finalised when it ends."""

    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    code_version: str
    started_at: str
    finished_at: Optional[str] = None
    status: str = Field(default="running", description="running, completed or failed")
    artifacts: Dict[str, str] = Field(default_factory=dict)
    error: Optional[str] = None


class MetricSummary(BaseModel):
    mean: float
    std: float = Field(..., ge=0)


class MetricsReport(BaseModel):
    """Sample mean and standard deviation per metric over evaluation episodes."""

    task: str
    episodes: int = Field(..., ge=1)
    seed: int
    corruption_std: Optional[float] = None
    metrics: Dict[str, MetricSummary] = Field(default_factory=dict)


class GridRow(BaseModel):
    """One cell of an experiment grid."""

    axis: str
    value: str
    status: str = Field(default="ok", description="ok or failed")
    error: Optional[str] = None
    report: Optional[MetricsReport] = None
