"""Command line interface: dst sample|train|eval|classify|oracle."""

from __future__ import annotations

import argparse
from dataclasses import asdict
import json
import logging
import math
import os
from pathlib import Path
import sys
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .const import (
    DEFAULT_COVARIANCE_FLOOR,
    DEFAULT_E_TOL,
    DEFAULT_EM_TOL,
    DEFAULT_MAX_DISCRETE_PATHS,
    DEFAULT_MAX_EM_ITERS,
    DEFAULT_MAX_SWEEPS,
    DEFAULT_SEED,
    ENV_EM_TOL,
    ENV_SEED,
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    LOGGER,
)
from .diagnostics import dump_variational_state
from .documents import (
    decode_model,
    decode_topology,
    encode_model,
    encode_observations,
    load_dataset,
    read_document,
    write_document,
)
from .errors import DocumentError, DstError, NumericalError, UsageError
from .helpers import format_number
from .inference import fit_variational
from .learning import Dataset, EmConfig, classify, train
from .model import ObservationSet, offset_origin, sample_sequence
from .oracle import TinyLimits, exact_loglik_enumerate
from .topology import Topology


class _ArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so run_command owns the exit code."""

    def error(self, message: str):
        raise UsageError(message)


def _non_negative_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {raw}")
    return value


def _number(value: float) -> float | None:
    return format_number(value) if math.isfinite(value) else None


def _write_stdout(payload: Any):
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _env_value(name: str, convert, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return convert(raw)
    except ValueError as err:
        raise UsageError(f"environment variable {name}={raw!r} is invalid") from err


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    return _env_value(ENV_SEED, int, DEFAULT_SEED)


def _em_config(args: argparse.Namespace) -> EmConfig:
    em_tol = getattr(args, "em_tol", None)
    if em_tol is None:
        em_tol = _env_value(ENV_EM_TOL, float, DEFAULT_EM_TOL)
    return EmConfig(
        e_tol=args.e_tol,
        em_tol=em_tol,
        max_sweeps=args.max_sweeps,
        max_em_iters=getattr(args, "max_iters", DEFAULT_MAX_EM_ITERS),
        overrelax=getattr(args, "overrelax", False),
        covariance_floor=getattr(args, "floor", DEFAULT_COVARIANCE_FLOOR),
        seed=_seed(args),
    )


def _load_sequences(
    args: argparse.Namespace, topology: Topology
) -> List[Tuple[str, ObservationSet]]:
    sequences = load_dataset(args.data, topology)
    if getattr(args, "offset_origin", False):
        sequences = [(name, offset_origin(obs)) for name, obs in sequences]
    return sequences


def _sample(args: argparse.Namespace) -> int:
    model = decode_model(read_document(args.model))
    seed = _seed(args)
    if args.sequences is None:
        _, obs = sample_sequence(model, args.steps, seed)
        write_document(args.out, encode_observations(obs))
        written = [str(args.out)]
    else:
        written = []
        for index in range(args.sequences):
            _, obs = sample_sequence(model, args.steps, (seed, index))
            path = Path(args.out) / f"sequence_{index:04d}.json"
            write_document(path, encode_observations(obs))
            written.append(str(path))
    LOGGER.info("Sampled %d sequence(s) of %d steps", len(written), args.steps + 1)
    _write_stdout({"written": written})
    return EXIT_OK


def _train(args: argparse.Namespace) -> int:
    topology = decode_topology(read_document(args.topology))
    config = _em_config(args)
    data = Dataset([obs for _, obs in _load_sequences(args, topology)])

    model, report = train(topology, data, config)
    write_document(args.out, encode_model(model))

    report_document = {
        **asdict(report),
        "bound_per_iter": [_number(b) for b in report.bound_per_iter],
    }
    if args.report:
        write_document(args.report, report_document)

    if args.csv:
        lines = ["iter,bound"] + [
            f"{i},{format_number(b)}" for i, b in enumerate(report.bound_per_iter, start=1)
        ]
        sys.stdout.write("\n".join(lines) + "\n")
    else:
        _write_stdout(report_document)
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    model = decode_model(read_document(args.model))
    config = _em_config(args)
    sequences = _load_sequences(args, model.topology)

    bounds: Dict[str, float | None] = {}
    dumps: Dict[str, Any] = {}
    total = 0.0
    for index, (name, obs) in enumerate(sequences):
        state, _ = fit_variational(
            model, obs, config.e_tol, config.max_sweeps, (config.seed, index)
        )
        bounds[name] = _number(state.bound)
        total += state.bound
        if args.dump_state:
            dumps[name] = dump_variational_state(state)

    if args.dump_state:
        write_document(args.dump_state, dumps)
    _write_stdout({"sequences": bounds, "total": _number(total)})
    return EXIT_OK


def _classify(args: argparse.Namespace) -> int:
    model_paths = [path for path in args.models.split(",") if path]
    if not model_paths:
        raise UsageError("--models needs at least one model file")
    models = [decode_model(read_document(path)) for path in model_paths]
    config = _em_config(args)
    sequences = _load_sequences(args, models[0].topology)

    results = []
    for name, obs in sequences:
        result = classify(models, obs, config)
        results.append(
            {
                "sequence": name,
                "label": result.label,
                "model": model_paths[result.label],
                "tie": result.tie,
                "scores": [_number(score) for score in result.scores],
                "errors": {str(k): v for k, v in result.errors.items()},
            }
        )
    _write_stdout({"models": model_paths, "results": results})
    return EXIT_OK


def _oracle(args: argparse.Namespace) -> int:
    model = decode_model(read_document(args.model))
    limits = TinyLimits(max_total_discrete_paths=args.max_paths)
    sequences = _load_sequences(args, model.topology)

    logliks = {name: exact_loglik_enumerate(model, obs, limits) for name, obs in sequences}
    _write_stdout(
        {
            "sequences": {name: _number(value) for name, value in logliks.items()},
            "total": _number(sum(logliks.values())),
        }
    )
    return EXIT_OK


def _add_inference_arguments(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"Seed, default ${ENV_SEED} or {DEFAULT_SEED}.",
    )
    parser.add_argument(
        "--e-tol", type=float, default=DEFAULT_E_TOL, help="Mean field tolerance."
    )
    parser.add_argument("--max-sweeps", type=int, default=DEFAULT_MAX_SWEEPS)
    parser.add_argument(
        "--offset-origin",
        action="store_true",
        help="Translate every leaf so its first observed point is the origin.",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="dst", description="Dynamical Systems Trees")
    parser.add_argument(
        "--loglevel",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default="WARNING",
        help="Define loglevel, default is WARNING.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    sample = subparsers.add_parser("sample", help="Sample synthetic data from a model.")
    sample.add_argument("--model", required=True)
    sample.add_argument(
        "--steps", type=_non_negative_int, required=True, help="T, the last time index."
    )
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--out", required=True)
    sample.add_argument(
        "--sequences",
        type=_non_negative_int,
        default=None,
        help="Write this many sequences into the --out directory.",
    )
    sample.set_defaults(handler=_sample)

    train = subparsers.add_parser("train", help="Fit a model with variational EM.")
    train.add_argument("--topology", required=True)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    _add_inference_arguments(train)
    train.add_argument(
        "--em-tol",
        type=float,
        default=None,
        help=f"Relative EM tolerance, default ${ENV_EM_TOL} or {DEFAULT_EM_TOL}.",
    )
    train.add_argument("--max-iters", type=int, default=DEFAULT_MAX_EM_ITERS)
    train.add_argument("--overrelax", action="store_true")
    train.add_argument("--floor", type=float, default=DEFAULT_COVARIANCE_FLOOR)
    train.add_argument(
        "--csv", action="store_true", help="Print the bound trace as iter,bound."
    )
    train.add_argument("--report", default=None, help="Also write the fit report here.")
    train.set_defaults(handler=_train)

    evaluate = subparsers.add_parser(
        "eval", help="Print the converged bound per sequence."
    )
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--data", required=True)
    _add_inference_arguments(evaluate)
    evaluate.add_argument(
        "--dump-state",
        default=None,
        help="Write the variational state of every sequence here.",
    )
    evaluate.set_defaults(handler=_eval)

    classify_parser = subparsers.add_parser(
        "classify", help="Label sequences by the best bound."
    )
    classify_parser.add_argument(
        "--models", required=True, help="Comma separated model files."
    )
    classify_parser.add_argument("--data", required=True)
    _add_inference_arguments(classify_parser)
    classify_parser.set_defaults(handler=_classify)

    oracle = subparsers.add_parser("oracle", help="Exact log likelihood of a tiny model.")
    oracle.add_argument("--model", required=True)
    oracle.add_argument("--data", required=True)
    oracle.add_argument("--max-paths", type=int, default=DEFAULT_MAX_DISCRETE_PATHS)
    oracle.set_defaults(handler=_oracle)

    return parser


def _report_error(err: BaseException):
    payload = {"error": type(err).__name__, "message": str(err)}
    if isinstance(err, DocumentError):
        payload["message"] = err.message
        payload["path"] = err.path
    sys.stderr.write(json.dumps(payload) + "\n")


def run_command(argv: Sequence[str]) -> int:
    """Run one dst command and return its exit code."""
    try:
        args = build_parser().parse_args(list(argv))
    except UsageError as err:
        _report_error(err)
        return EXIT_USAGE
    except SystemExit as err:
        # --help
        return int(err.code or 0)

    logging.basicConfig(level=args.loglevel)
    try:
        return args.handler(args)
    except UsageError as err:
        _report_error(err)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError) as err:
        _report_error(err)
        return EXIT_NUMERICAL
    except (DstError, OSError, ValueError) as err:
        _report_error(err)
        return EXIT_DATA


def main():
    sys.exit(run_command(sys.argv[1:]))
