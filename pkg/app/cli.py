"""Command-line entry point: fit, test, weights, power and simulate."""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence, get_args

import numpy as np
from pydantic import BaseModel, ValidationError

from app import database
from app.calibration import calibration_study
from app.cone_geometry import (
    CanonicalCone,
    HypothesisSpec,
    PolyhedralCone,
    canonicalize,
    cone_angle,
    hypothesis_from_matrices,
    order_cone,
)
from app.data_model import load_dataset, make_basis, make_link
from app.errors import ConeInferError, ConfigError, ParseError, with_provenance
from app.manifold import MAX_TUBE_DIM
from app.models import AppConfig, Command, HypothesisConfig, HypothesisKind, Report, RunConfig, TestConfig, WeightRoute
from app.qif_engine import fit_all
from app.reporting import build_report, error_document, format_power_table, inputs_digest, write_report
from app.services import RunRegistryService
from app.testing_power import PowerRow, reproduce_table1, run_test, select_weights
from app.tube_weights import (
    ChiBarWeights,
    level_probabilities,
    weights_closed_form_d2,
    weights_monte_carlo,
    weights_tube_for_cone,
)

logger = logging.getLogger(__name__)

JOBS_ENV = "CONE_INFER_JOBS"
REGISTRY_ENV = "CONE_INFER_DATABASE_URL"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

ROUTE_ALIASES = {
    "auto": WeightRoute.AUTO,
    "closed": WeightRoute.CLOSED_FORM,
    "level": WeightRoute.LEVEL_PROB,
    "tube": WeightRoute.TUBE,
    "mc": WeightRoute.MONTE_CARLO,
}


# Configuration loading
def _nested_model(annotation: Any) -> Optional[type[BaseModel]]:
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    for argument in get_args(annotation):
        found = _nested_model(argument)
        if found is not None:
            return found
    return None


def unknown_keys(payload: dict, model: type[BaseModel], prefix: str = "") -> list[str]:
    """Dotted paths of keys that no field of the model (or its nested models) accepts."""
    found = []
    for key, value in payload.items():
        path = f"{prefix}{key}"
        field = model.model_fields.get(key)
        if field is None:
            found.append(path)
            continue
        nested = _nested_model(field.annotation)
        if nested is not None and isinstance(value, dict):
            found.extend(unknown_keys(value, nested, f"{path}."))
    return found


def read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    source = Path(path)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        logger.error(f"Config file {source} does not exist")
        raise ConfigError(f"config file {source} does not exist", detail={"path": str(source)}) from exc
    except json.JSONDecodeError as exc:
        logger.error(f"Config file {source} is not valid JSON: {exc}")
        raise ConfigError(f"config file {source} is not valid JSON: {exc.msg}", detail={"line": exc.lineno}) from exc
    if not isinstance(payload, dict):
        raise ConfigError("config file must hold a JSON object")
    return payload


def merge_overrides(payload: dict, overrides: dict[str, dict[str, Any]]) -> dict:
    """Command-line values replace file values key by key inside each block."""
    merged = dict(payload)
    for block, values in overrides.items():
        merged[block] = {**merged.get(block, {}), **values}
    return merged


def parse_app_config(payload: dict) -> AppConfig:
    unknown = unknown_keys(payload, AppConfig)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}", unknown_keys=unknown)
    try:
        return AppConfig.model_validate(payload)
    except ValidationError as exc:
        problems = [f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in exc.errors()]
        logger.error(f"Invalid configuration: {problems}")
        raise ConfigError(f"invalid configuration: {'; '.join(problems)}", detail={"errors": problems}) from exc


def load_app_config(config: RunConfig) -> AppConfig:
    return parse_app_config(merge_overrides(read_config_file(config.config_path), config.overrides))


# Command implementations
def build_hypothesis(config: HypothesisConfig) -> HypothesisSpec:
    match config.kind:
        case HypothesisKind.ORDER_CONE:
            if config.m is None:
                raise ConfigError("order-cone hypothesis needs m")
            return order_cone(config.m, config.covariates_per_group)
        case HypothesisKind.EXPLICIT:
            return hypothesis_from_matrices(config.constraint_basis, config.cone_generators, config.null_basis)
        case _:
            raise ConfigError(f"unknown hypothesis kind {config.kind}")


def _identity_canonical(spec: HypothesisSpec) -> CanonicalCone:
    return canonicalize(spec, np.eye(spec.r))


def _weights_cone(config: AppConfig) -> PolyhedralCone:
    if config.weights.cone is not None:
        return PolyhedralCone.from_json(config.weights.cone.model_dump())
    return _identity_canonical(build_hypothesis(config.hypothesis)).intrinsic_cone()


def compute_weights(config: AppConfig, seed: int) -> ChiBarWeights:
    """Weights for the configured cone by the configured route; hypotheses are taken at J = I."""
    options = config.weights
    match options.route:
        case WeightRoute.CLOSED_FORM:
            phi = options.phi
            if phi is None:
                phi = cone_angle(_identity_canonical(build_hypothesis(config.hypothesis)))
            return weights_closed_form_d2(phi)
        case WeightRoute.LEVEL_PROB:
            m = options.m or config.hypothesis.m
            if m is None:
                raise ConfigError("level-probability weights need weights.m")
            q = np.ones(m) if options.q_diag is None else np.asarray(options.q_diag, dtype=float)
            return level_probabilities(m, q, options.method, options.replicates, seed)
        case WeightRoute.MONTE_CARLO:
            return weights_monte_carlo(_weights_cone(config), options.replicates, seed)
        case WeightRoute.TUBE:
            return weights_tube_for_cone(_weights_cone(config), config.quadrature)
        case WeightRoute.AUTO:
            if options.cone is not None:
                cone = _weights_cone(config)
                if cone.is_simplicial and cone.dim <= MAX_TUBE_DIM:
                    return weights_tube_for_cone(cone, config.quadrature)
                return weights_monte_carlo(cone, options.replicates, seed)
            spec = build_hypothesis(config.hypothesis)
            test = TestConfig(replicates=options.replicates, mc_seed=seed)
            return select_weights(
                WeightRoute.AUTO, spec, _identity_canonical(spec), np.eye(spec.r), test, config.quadrature
            )
        case _:
            raise ConfigError(f"unknown weight route {options.route}")


def _payload(command: Command, config: AppConfig, run_config: RunConfig) -> dict:
    match command:
        case Command.FIT | Command.TEST:
            assert run_config.data_path is not None
            data = load_dataset(run_config.data_path, config.dataset)
            link = make_link(config.link)
            basis = make_basis(config.basis, data.n_times)
            spec = build_hypothesis(config.hypothesis)
            if command == Command.FIT:
                return fit_all(data, link, basis, spec, config.solver).summary()
            result = run_test(
                data, link, basis, spec, config=config.test, solver=config.solver, quadrature=config.quadrature
            )
            return result.summary()
        case Command.WEIGHTS:
            return compute_weights(config, run_config.seed).to_dict()
        case Command.POWER:
            power = config.power
            rows = reproduce_table1(power.delta_grid, power.b1, power.b2, power.df)
            return {"b1": power.b1, "b2": power.b2, "df": power.df, "rows": [row.model_dump() for row in rows]}
        case Command.SIMULATE:
            simulation = config.simulation
            spec = None
            if config.hypothesis.kind == HypothesisKind.EXPLICIT:
                spec = build_hypothesis(config.hypothesis)
            summary = calibration_study(
                simulation,
                seed=run_config.seed,
                jobs=run_config.parallelism,
                spec=spec,
                solver=config.solver,
                test=config.test,
                quadrature=config.quadrature,
            )
            return summary.model_dump()
        case _:
            raise ConfigError(f"unknown command {command}")


def _origin_module(exc: BaseException) -> Optional[str]:
    """Innermost package module on the traceback."""
    origin = None
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("app."):
            origin = name
        tb = tb.tb_next
    return origin


def _read_data(path: Optional[str]) -> Optional[bytes]:
    if path is None:
        return None
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        logger.error(f"Could not read data file {path}: {exc}")
        raise ParseError(f"could not read data file {path}", {"path": path}) from exc


def run(config: RunConfig) -> Report:
    """Dispatch one command and write its report to output_path."""
    timing: dict[str, float] = {}
    try:
        started = time.perf_counter()
        app_config = load_app_config(config)
        data_bytes = _read_data(config.data_path)
        digest = inputs_digest(config.command, app_config.model_dump(mode="json"), config.seed, data_bytes)
        timing["load"] = time.perf_counter() - started

        started = time.perf_counter()
        payload = _payload(config.command, app_config, config)
        timing["compute"] = time.perf_counter() - started
    except ConeInferError as exc:
        module = _origin_module(exc)
        if module is not None:
            with_provenance(exc, module)
        raise
    logger.info(f"Command {config.command.value} finished in {timing['compute']:.3f}s")

    report = build_report(config.command, digest, config.seed, payload, timing)
    write_report(report, config.output_path)

    registry_url = config.registry_url or os.environ.get(REGISTRY_ENV)
    if registry_url:
        database.configure(registry_url)
        RunRegistryService.record(report)
    return report


# Argument parsing
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--data", help="long-format CSV dataset (fit, test)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="write the JSON report here instead of stdout")
    common.add_argument("--jobs", type=int, help=f"worker processes (default ${JOBS_ENV} or 1)")
    common.add_argument("--alpha", type=float)
    common.add_argument("--weights", choices=sorted(ROUTE_ALIASES), help="chi-bar weight route")
    common.add_argument("--delta-grid", help="comma-separated noncentralities for the power table")
    common.add_argument("--b1", type=float)
    common.add_argument("--b2", type=float)
    common.add_argument("--df", type=int)
    common.add_argument("--registry", help=f"database URL for the run registry (default ${REGISTRY_ENV})")
    common.add_argument("--table", action="store_true", help="write the power table as aligned text")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cone-infer", description="Cone-constrained inference for QIF models")
    subcommands = parser.add_subparsers(dest="command", required=True)
    for command in Command:
        subcommands.add_parser(command.value, parents=[common])
    return parser


def _delta_grid(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        logger.error(f"Bad --delta-grid value {text!r}")
        raise ConfigError(f"--delta-grid must be comma-separated numbers, got {text!r}") from exc


def cli_overrides(command: Command, args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    overrides: dict[str, dict[str, Any]] = {}

    def put(block: str, key: str, value: Any) -> None:
        if value is not None:
            overrides.setdefault(block, {})[key] = value

    route = None if args.weights is None else ROUTE_ALIASES[args.weights].value
    match command:
        case Command.WEIGHTS:
            put("weights", "route", route)
        case Command.SIMULATE:
            put("simulation", "weight_route", route)
            put("simulation", "alphas", None if args.alpha is None else [args.alpha])
        case _:
            put("test", "weight_route", route)
    put("test", "alpha", args.alpha)
    put("power", "delta_grid", None if args.delta_grid is None else _delta_grid(args.delta_grid))
    put("power", "b1", args.b1)
    put("power", "b2", args.b2)
    put("power", "df", args.df)
    return overrides


def _default_jobs() -> int:
    value = os.environ.get(JOBS_ENV)
    if value is None:
        return 1
    try:
        return int(value)
    except ValueError as exc:
        logger.error(f"{JOBS_ENV}={value!r} is not an integer")
        raise ConfigError(f"{JOBS_ENV} must be an integer, got {value!r}") from exc


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    command = Command(args.command)
    try:
        return RunConfig(
            command=command,
            data_path=args.data,
            config_path=args.config,
            seed=args.seed,
            output_path=args.out,
            parallelism=args.jobs if args.jobs is not None else _default_jobs(),
            registry_url=args.registry,
            overrides=cli_overrides(command, args),
        )
    except ValidationError as exc:
        problems = [f"{'.'.join(str(part) for part in error['loc']) or 'run'}: {error['msg']}" for error in exc.errors()]
        logger.error(f"Invalid command line: {problems}")
        raise ConfigError(f"invalid command line: {'; '.join(problems)}", detail={"errors": problems}) from exc


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr, force=True
    )
    logging.getLogger("sqlalchemy.engine.Engine").setLevel(logging.WARNING)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = run_config_from_args(args)
        report = run(config)
    except ConeInferError as exc:
        logger.error(f"{type(exc).__name__}: {exc.message}")
        sys.stdout.write(json.dumps(error_document(exc.to_dict()), indent=2, sort_keys=True) + "\n")
        return exc.exit_code

    table = config.command == Command.POWER and (args.table or config.output_path is not None)
    if config.output_path is None and not args.table:
        sys.stdout.write(write_report(report, None))
    if table:
        sys.stdout.write(format_power_table([PowerRow(**row) for row in report.payload["rows"]]))
    return 0
