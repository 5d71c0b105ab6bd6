from sqlmodel import SQLModel, Field
from sqlalchemy import Column, JSON
from datetime import datetime, timezone
from typing import Optional, List, Dict, Any, Literal
from enum import Enum

from pydantic import model_validator


# Enums for type safety
class LinkKind(str, Enum):
    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"


class BasisKind(str, Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"


class CorrelationKind(str, Enum):
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"


class ConstraintKind(str, Enum):
    UNRESTRICTED = "unrestricted"
    NULL_SPACE = "null_space"
    CONE = "cone"


class WeightRoute(str, Enum):
    AUTO = "auto"
    CLOSED_FORM = "closed_form"
    LEVEL_PROB = "level_prob"
    MONTE_CARLO = "monte_carlo"
    TUBE = "tube"


class LevelMethod(str, Enum):
    EXACT_SMALL_M = "exact_small_m"
    MONTE_CARLO = "monte_carlo"


class HypothesisKind(str, Enum):
    ORDER_CONE = "order_cone"
    EXPLICIT = "explicit"


class Command(str, Enum):
    FIT = "fit"
    TEST = "test"
    WEIGHTS = "weights"
    POWER = "power"
    SIMULATE = "simulate"


# Run registry
class ReportRecord(SQLModel, table=True):
    __tablename__ = "report_records"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    command: Command
    inputs_digest: str = Field(max_length=64, index=True)
    seed: int = Field(default=0)
    version: str = Field(max_length=32)
    payload: Dict[str, Any] = Field(default_factory=dict, sa_column=Column(JSON))
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


# Non-persistent schemas for configuration and reports


# Solver schemas
class SolverOptions(SQLModel, table=False):
    max_iter: int = Field(default=200, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    ridge: float = Field(default=0.0, ge=0)
    max_halvings: int = Field(default=30, ge=0)
    start: Optional[List[float]] = Field(default=None)


class QuadratureConfig(SQLModel, table=False):
    nodes: int = Field(default=64, ge=4)
    check_nodes: int = Field(default=32, ge=2)
    rel_tol: float = Field(default=1e-4, gt=0)

    @model_validator(mode="after")
    def check_refinement(self) -> "QuadratureConfig":
        if self.check_nodes >= self.nodes:
            raise ValueError("check_nodes must be smaller than nodes")
        return self


# Hypothesis schemas
class HypothesisConfig(SQLModel, table=False):
    kind: HypothesisKind = Field(default=HypothesisKind.ORDER_CONE)
    m: Optional[int] = Field(default=3, ge=2)
    covariates_per_group: int = Field(default=1, ge=0)
    constraint_basis: Optional[List[List[float]]] = Field(default=None)
    cone_generators: Optional[List[List[float]]] = Field(default=None)
    null_basis: Optional[List[List[float]]] = Field(default=None)

    @model_validator(mode="after")
    def check_explicit(self) -> "HypothesisConfig":
        if self.kind == HypothesisKind.EXPLICIT and (self.constraint_basis is None or self.cone_generators is None):
            raise ValueError("explicit hypothesis needs constraint_basis and cone_generators")
        return self


class ConeConfig(SQLModel, table=False):
    dim: int = Field(ge=1)
    generators: Optional[List[List[float]]] = Field(default=None)
    halfspaces: Optional[List[List[float]]] = Field(default=None)


# Test and weight schemas
class TestConfig(SQLModel, table=False):
    __test__ = False

    alpha: float = Field(default=0.05, gt=0, lt=1)
    weight_route: WeightRoute = Field(default=WeightRoute.AUTO)
    replicates: int = Field(default=100_000, ge=10_000)
    mc_seed: int = Field(default=0, ge=0)


class WeightsConfig(SQLModel, table=False):
    route: WeightRoute = Field(default=WeightRoute.CLOSED_FORM)
    phi: Optional[float] = Field(default=None)
    m: Optional[int] = Field(default=None, ge=2)
    q_diag: Optional[List[float]] = Field(default=None)
    method: LevelMethod = Field(default=LevelMethod.EXACT_SMALL_M)
    cone: Optional[ConeConfig] = Field(default=None)
    hypothesis_j: Literal["identity"] = Field(default="identity")
    replicates: int = Field(default=100_000, ge=10_000)


class PowerConfig(SQLModel, table=False):
    delta_grid: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    b1: float = Field(default=5.991)
    b2: float = Field(default=3.820)
    df: int = Field(default=2, ge=1)


# Simulation schemas
class SimulationSpec(SQLModel, table=False):
    n_subjects: int = Field(default=500, ge=2)
    n_times: int = Field(default=4, ge=1)
    groups: int = Field(default=3, ge=1)
    covariates_per_group: int = Field(default=1, ge=0)
    gamma: Optional[List[float]] = Field(default=None)
    link: LinkKind = Field(default=LinkKind.IDENTITY)
    correlation: CorrelationKind = Field(default=CorrelationKind.EXCHANGEABLE)
    rho: float = Field(default=0.3)
    noise_scale: float = Field(default=1.0, gt=0)
    covariate_scale: float = Field(default=1.0, gt=0)

    @property
    def n_parameters(self) -> int:
        return self.groups * (1 + self.covariates_per_group)


class EffectConfig(SQLModel, table=False):
    """Local alternative gamma0 + P u_star / sqrt(N)."""

    direction: List[float]
    scale: float = Field(default=1.0, ge=0)


class SimulationConfig(SimulationSpec, table=False):
    replicates: int = Field(default=2000)
    alphas: List[float] = Field(default_factory=lambda: [0.05])
    tail_points: List[float] = Field(default_factory=lambda: [1.0, 2.0, 3.820, 6.0])
    weight_route: WeightRoute = Field(default=WeightRoute.AUTO)
    basis: BasisKind = Field(default=BasisKind.EXCHANGEABLE)
    effect: Optional[EffectConfig] = Field(default=None)
    chunk_size: int = Field(default=50, ge=1)


# Dataset ingestion schema
class DatasetSchema(SQLModel, table=False):
    subject: str = Field(default="subject")
    time: str = Field(default="time")
    response: str = Field(default="y")
    covariates: Optional[List[str]] = Field(default=None)
    group: str = Field(default="group")


# Whole config file
class AppConfig(SQLModel, table=False):
    link: LinkKind = Field(default=LinkKind.IDENTITY)
    basis: BasisKind = Field(default=BasisKind.EXCHANGEABLE)
    hypothesis: HypothesisConfig = Field(default_factory=HypothesisConfig)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    test: TestConfig = Field(default_factory=TestConfig)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    power: PowerConfig = Field(default_factory=PowerConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    dataset: DatasetSchema = Field(default_factory=DatasetSchema)


class RunConfig(SQLModel, table=False):
    command: Command
    data_path: Optional[str] = Field(default=None)
    config_path: Optional[str] = Field(default=None)
    seed: int = Field(default=0, ge=0)
    output_path: Optional[str] = Field(default=None)
    parallelism: int = Field(default=1, ge=1)
    registry_url: Optional[str] = Field(default=None)
    overrides: Dict[str, Dict[str, Any]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_data_requirement(self) -> "RunConfig":
        if self.command in (Command.FIT, Command.TEST) and self.data_path is None:
            raise ValueError(f"command '{self.command.value}' requires a data path")
        return self


# Report schema
class Report(SQLModel, table=False):
    command: Command
    inputs_digest: str
    seed: int
    version: str
    payload: Dict[str, Any]
    timing: Dict[str, float] = Field(default_factory=dict)
