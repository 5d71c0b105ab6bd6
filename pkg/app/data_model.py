"""Balanced longitudinal datasets, link functions and working-correlation bases."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import polars as pl
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import expit, logit

from app.errors import BalanceError, CovarianceError, DimensionError, DuplicateError, ParseError
from app.models import BasisKind, CorrelationKind, DatasetSchema, LinkKind, SimulationSpec

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


class LinkFunction(BaseModel):
    """Inverse link h, its derivatives and the matching variance function."""

    model_config = ConfigDict(frozen=True)

    kind: LinkKind

    def evaluate(self, eta: np.ndarray) -> np.ndarray:
        match self.kind:
            case LinkKind.IDENTITY:
                return np.asarray(eta, dtype=float).copy()
            case LinkKind.LOG:
                return np.exp(eta)
            case LinkKind.LOGIT:
                return expit(eta)

    def derivative(self, eta: np.ndarray) -> np.ndarray:
        match self.kind:
            case LinkKind.IDENTITY:
                return np.ones_like(eta, dtype=float)
            case LinkKind.LOG:
                return np.exp(eta)
            case LinkKind.LOGIT:
                mu = expit(eta)
                return mu * (1.0 - mu)

    def second_derivative(self, eta: np.ndarray) -> np.ndarray:
        match self.kind:
            case LinkKind.IDENTITY:
                return np.zeros_like(eta, dtype=float)
            case LinkKind.LOG:
                return np.exp(eta)
            case LinkKind.LOGIT:
                mu = expit(eta)
                return mu * (1.0 - mu) * (1.0 - 2.0 * mu)

    def variance(self, mu: np.ndarray) -> np.ndarray:
        """Diagonal of A_i, dispersion fixed to one."""
        match self.kind:
            case LinkKind.IDENTITY:
                return np.ones_like(mu, dtype=float)
            case LinkKind.LOG:
                return np.asarray(mu, dtype=float).copy()
            case LinkKind.LOGIT:
                return mu * (1.0 - mu)

    def variance_derivative(self, mu: np.ndarray) -> np.ndarray:
        match self.kind:
            case LinkKind.IDENTITY:
                return np.zeros_like(mu, dtype=float)
            case LinkKind.LOG:
                return np.ones_like(mu, dtype=float)
            case LinkKind.LOGIT:
                return 1.0 - 2.0 * mu

    def link(self, mu: np.ndarray) -> np.ndarray:
        """Forward link g = h^-1, clipped into the valid mean range."""
        mu = np.asarray(mu, dtype=float)
        match self.kind:
            case LinkKind.IDENTITY:
                return mu.copy()
            case LinkKind.LOG:
                return np.log(np.clip(mu, 1e-6, None))
            case LinkKind.LOGIT:
                return logit(np.clip(mu, 1e-6, 1.0 - 1e-6))


class CorrelationBasis(BaseModel):
    """Working-correlation basis M_1..M_s with M_1 the identity."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: BasisKind
    matrices: np.ndarray

    @model_validator(mode="after")
    def check_matrices(self) -> "CorrelationBasis":
        stack = self.matrices
        if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
            raise DimensionError(f"basis must be an (s, n, n) stack, got shape {stack.shape}")
        if not np.array_equal(stack[0], np.eye(stack.shape[1])):
            raise DimensionError("first basis matrix must be the identity")
        for matrix in stack[1:]:
            if not np.array_equal(matrix, matrix.T) or not np.isin(matrix, (0.0, 1.0)).all():
                raise DimensionError("basis matrices must be symmetric 0/1 matrices")
        stack.setflags(write=False)
        return self

    @property
    def n_bases(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_times(self) -> int:
        return self.matrices.shape[1]


class LongitudinalDataset(BaseModel):
    """Responses Y (N x n) and covariates X (N x n x r) on a balanced design."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    responses: np.ndarray
    covariates: np.ndarray
    group_labels: Optional[np.ndarray] = None
    subject_ids: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None

    @model_validator(mode="before")
    @classmethod
    def coerce_arrays(cls, values: dict) -> dict:
        values = dict(values)
        values["responses"] = _frozen(values["responses"])
        values["covariates"] = _frozen(values["covariates"])
        for key in ("group_labels", "subject_ids"):
            if values.get(key) is not None:
                labels = np.array(values[key], dtype=np.int64)
                labels.setflags(write=False)
                values[key] = labels
        if values.get("times") is not None:
            values["times"] = _frozen(values["times"])
        return values

    @model_validator(mode="after")
    def check_shapes(self) -> "LongitudinalDataset":
        y, x = self.responses, self.covariates
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise DimensionError(f"responses {y.shape} and covariates {x.shape} do not align")
        n_subjects, n_times, n_covariates = x.shape
        if n_subjects < 2 or n_times < 1 or n_covariates < 1:
            raise DimensionError(f"need N >= 2, n >= 1, r >= 1; got N={n_subjects}, n={n_times}, r={n_covariates}")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise DimensionError("dataset contains non-finite values")
        for key in ("group_labels", "subject_ids"):
            labels = getattr(self, key)
            if labels is not None and labels.shape != (n_subjects,):
                raise DimensionError(f"{key} must have one entry per subject")
        if self.times is not None and self.times.shape != y.shape:
            raise DimensionError("times must match the responses shape")
        return self

    @property
    def n_subjects(self) -> int:
        return self.responses.shape[0]

    @property
    def n_times(self) -> int:
        return self.responses.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[2]


def make_link(kind: LinkKind | str) -> LinkFunction:
    return LinkFunction(kind=LinkKind(kind))


def make_basis(kind: BasisKind | str, n: int) -> CorrelationBasis:
    """Build the working-correlation basis for n time points."""
    kind = BasisKind(kind)
    if n < 1:
        raise DimensionError(f"n must be positive, got {n}")
    identity = np.eye(n)
    if kind == BasisKind.INDEPENDENCE:
        return CorrelationBasis(kind=kind, matrices=identity[np.newaxis].copy())
    if n < 2:
        raise DimensionError(f"{kind.value} basis needs n >= 2, got {n}")
    match kind:
        case BasisKind.EXCHANGEABLE:
            second = np.ones((n, n)) - identity
        case BasisKind.AR1:
            second = np.eye(n, k=1) + np.eye(n, k=-1)
        case _:
            raise DimensionError(f"unknown basis kind {kind}")
    return CorrelationBasis(kind=kind, matrices=np.stack([identity, second]))


def correlation_matrix(kind: CorrelationKind, rho: float, n: int) -> np.ndarray:
    """True within-subject correlation used by the simulator."""
    match kind:
        case CorrelationKind.EXCHANGEABLE:
            if not (n == 1 or -1.0 / (n - 1) < rho < 1.0):
                raise CovarianceError(f"exchangeable correlation {rho} is not positive definite for n={n}")
            return (1.0 - rho) * np.eye(n) + rho * np.ones((n, n))
        case CorrelationKind.AR1:
            if not abs(rho) < 1.0:
                raise CovarianceError(f"AR-1 correlation {rho} is not positive definite")
            lags = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
            return rho**lags


def group_design(labels: np.ndarray, x: np.ndarray, groups: int) -> np.ndarray:
    """Rows [e_t, e_t (x) x_ij]: mean block first, then per-group slopes."""
    n_subjects, n_times, p = x.shape
    design = np.zeros((n_subjects, n_times, groups * (1 + p)))
    rows = np.arange(n_subjects)
    design[rows, :, labels] = 1.0
    for k in range(p):
        design[rows, :, groups + labels * p + k] = x[:, :, k]
    return design


def simulate_dataset(spec: SimulationSpec, seed: int) -> LongitudinalDataset:
    """Y_i = h(X_i gamma) + correlated Gaussian noise, deterministic in seed."""
    r = spec.n_parameters
    gamma = np.zeros(r) if spec.gamma is None else np.asarray(spec.gamma, dtype=float)
    if gamma.shape != (r,):
        raise DimensionError(f"gamma has {gamma.size} entries, design has {r} parameters")
    corr = correlation_matrix(spec.correlation, spec.rho, spec.n_times)
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError as exc:
        logger.error(f"Cholesky of the requested correlation failed: {exc}")
        raise CovarianceError(f"requested correlation is not positive definite: {exc}") from exc

    rng = np.random.default_rng(seed)
    labels = np.arange(spec.n_subjects) % spec.groups
    x = spec.covariate_scale * rng.standard_normal((spec.n_subjects, spec.n_times, spec.covariates_per_group))
    noise = spec.noise_scale * rng.standard_normal((spec.n_subjects, spec.n_times)) @ chol.T

    design = group_design(labels, x, spec.groups)
    link = make_link(spec.link)
    responses = link.evaluate(design @ gamma) + noise
    times = np.tile(np.arange(1, spec.n_times + 1, dtype=float), (spec.n_subjects, 1))
    logger.debug(f"Simulated N={spec.n_subjects}, n={spec.n_times}, r={r} with seed {seed}")
    return LongitudinalDataset(
        responses=responses,
        covariates=design,
        group_labels=labels,
        subject_ids=np.arange(1, spec.n_subjects + 1),
        times=times,
    )


def _numeric_column(frame: pl.DataFrame, name: str) -> pl.Series:
    try:
        series = frame.get_column(name).str.strip_chars().cast(pl.Float64, strict=True)
    except pl.exceptions.PolarsError as exc:
        logger.error(f"Column '{name}' is not numeric: {exc}")
        raise ParseError(f"column '{name}' contains a non-numeric cell", {"column": name}) from exc
    if series.null_count() > 0:
        raise ParseError(f"column '{name}' has empty cells", {"column": name})
    return series


def load_dataset(path: Path | str, schema: Optional[DatasetSchema] = None) -> LongitudinalDataset:
    """Read a long-format CSV into a balanced dataset."""
    schema = schema or DatasetSchema()
    path = Path(path)
    try:
        raw = pl.read_csv(path, infer_schema_length=0)
    except (OSError, pl.exceptions.PolarsError) as exc:
        logger.error(f"Could not read {path}: {exc}")
        raise ParseError(f"could not read {path}: {exc}", {"path": str(path)}) from exc
    if raw.height == 0:
        raise ParseError(f"{path} holds no observations", {"path": str(path)})

    has_group = schema.group in raw.columns
    reserved = {schema.subject, schema.time, schema.response} | ({schema.group} if has_group else set())
    covariate_names = schema.covariates or [name for name in raw.columns if name not in reserved]
    missing = [name for name in [schema.subject, schema.time, schema.response, *covariate_names] if name not in raw.columns]
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", {"missing": missing})
    if not covariate_names:
        raise ParseError("no covariate columns found")

    columns = {"subject": _numeric_column(raw, schema.subject), "time": _numeric_column(raw, schema.time)}
    if (columns["subject"] % 1 != 0).any():
        raise ParseError(f"column '{schema.subject}' must hold integers", {"column": schema.subject})
    columns["y"] = _numeric_column(raw, schema.response)
    for index, name in enumerate(covariate_names):
        columns[f"x{index}"] = _numeric_column(raw, name)
    if has_group:
        columns["group"] = _numeric_column(raw, schema.group)
    frame = pl.DataFrame(columns).with_columns(pl.col("subject").cast(pl.Int64)).with_row_index("row")

    duplicated = frame.select("subject", "time").is_duplicated()
    if duplicated.any():
        first = frame.filter(duplicated).row(0, named=True)
        raise DuplicateError(
            f"duplicate observation for subject {first['subject']} at time {first['time']}",
            {"subject": first["subject"], "time": first["time"]},
        )

    counts = frame.group_by("subject", maintain_order=True).agg(
        pl.len().alias("count"), pl.col("time").sort().alias("schedule")
    )
    n_times = int(counts.get_column("count").max() or 0)
    short = counts.filter(pl.col("count") != n_times).get_column("subject").to_list()
    if short:
        raise BalanceError(
            f"subjects {short} do not have all {n_times} observations", {"subjects": short, "n_times": n_times}
        )

    reference = counts.get_column("schedule")[0].to_list()
    shifted = [
        subject
        for subject, schedule in zip(counts.get_column("subject").to_list(), counts.get_column("schedule").to_list())
        if schedule != reference
    ]
    if shifted:
        raise BalanceError(
            f"subjects {shifted} are not observed at times {reference}",
            {"subjects": shifted, "n_times": n_times, "times": reference},
        )

    ordered = frame.with_columns(pl.col("row").min().over("subject").alias("first_row")).sort(["first_row", "time"])
    n_subjects = counts.height
    covariate_keys = [f"x{index}" for index in range(len(covariate_names))]
    responses = ordered.get_column("y").to_numpy().reshape(n_subjects, n_times)
    covariates = ordered.select(covariate_keys).to_numpy().reshape(n_subjects, n_times, len(covariate_keys))
    group_labels = None
    if has_group:
        groups = ordered.get_column("group").to_numpy().reshape(n_subjects, n_times)
        if not (groups == groups[:, :1]).all():
            raise ParseError("group label varies within a subject", {"column": schema.group})
        group_labels = groups[:, 0].astype(np.int64)

    logger.info(f"Loaded {path.name}: N={n_subjects}, n={n_times}, r={len(covariate_keys)}")
    return LongitudinalDataset(
        responses=responses,
        covariates=covariates,
        group_labels=group_labels,
        subject_ids=ordered.get_column("subject").to_numpy().reshape(n_subjects, n_times)[:, 0],
        times=ordered.get_column("time").to_numpy().reshape(n_subjects, n_times),
    )


def write_dataset(dataset: LongitudinalDataset, path: Path | str) -> Path:
    """Write the dataset back to long-format CSV (inverse of load_dataset)."""
    path = Path(path)
    n_subjects, n_times, n_covariates = dataset.covariates.shape
    subject_ids = dataset.subject_ids if dataset.subject_ids is not None else np.arange(1, n_subjects + 1)
    times = (
        dataset.times if dataset.times is not None else np.tile(np.arange(1, n_times + 1, dtype=float), (n_subjects, 1))
    )
    columns: dict[str, np.ndarray] = {
        "subject": np.repeat(subject_ids, n_times),
        "time": times.reshape(-1),
        "y": dataset.responses.reshape(-1),
    }
    flat = dataset.covariates.reshape(n_subjects * n_times, n_covariates)
    for k in range(n_covariates):
        columns[f"x{k + 1}"] = flat[:, k]
    if dataset.group_labels is not None:
        columns["group"] = np.repeat(dataset.group_labels, n_times)
    pl.DataFrame(columns).write_csv(path)
    logger.info(f"Wrote dataset to {path}")
    return path
