#!/usr/bin/env python3
# Command-line entry point: run configs, scaling experiments and audits of
# the mean-field particle simulator

import argparse
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, load_density, parse_config
from .densities import audit_assumptions
from .dynamics import evolve_micro
from .errors import ConfigParseError, ConfigValidationError, \
    IntegrationBlowupError, VlasimError
from .experiments import EXPERIMENTS, aggregate_runs, run_experiment, \
    write_result
from .kernels import KernelSpec
from .util import derive_seed, read_csv, read_json, write_json

logger = logging.getLogger("vlasim")

LOG_ENV_VAR = "VLASIM_LOG"


def enable_logging(info=False):
    """
    Enables logging.
    If info is True, print INFO messages in addition to WARNING and ERROR
    messages. Otherwise the level comes from VLASIM_LOG, WARNING by default.
    """
    invalid = None
    if info:
        level = logging.INFO
    else:
        name = os.environ.get(LOG_ENV_VAR, "WARNING").strip().upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            invalid = name
            level = logging.WARNING

    logging.basicConfig(
        stream=sys.stderr, level=level,
        format="%(name)s (%(levelname)s): %(message)s")
    logger.setLevel(level)

    if invalid:
        logger.warning(
            "Invalid %s value '%s', using WARNING", LOG_ENV_VAR, invalid)


def exit_with_error(message):
    """
    Print an error message to stderr and exit with the usage error status
    """
    print(message, file=sys.stderr)
    sys.exit(2)


class CustomArgumentParser(argparse.ArgumentParser):
    """
    Custom argument parser that prints the full help message
    when incorrect parameters are provided
    """
    def error(self, message):
        self.print_help(sys.stderr)
        args = {'prog': self.prog, 'message': message}
        self.exit(2, '%(prog)s: error: %(message)s\n' % args)


class WarningCollector(logging.Handler):
    """
    Keep the messages of WARNING and higher records for the manifest
    """
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.messages = []

    def emit(self, record):
        self.messages.append(record.getMessage())


class RunManifest(object):
    """
    Provenance of one invocation, written last into the output directory
    """
    __slots__ = (
        "command", "config_digest", "seed", "version", "started", "finished",
        "outputs", "warnings", "config", "threads", "status", "error"
    )

    def __init__(self, command, config_digest=None, seed=None, config=None,
                 threads=1):
        self.command = command
        self.config_digest = config_digest
        self.seed = seed
        self.version = __version__
        self.started = _timestamp()
        self.finished = None
        self.outputs = []
        self.warnings = []
        self.config = config
        self.threads = threads
        self.status = None
        self.error = None

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__slots__}

    def write(self, directory, status, warnings):
        self.status = status
        self.warnings = list(warnings)
        self.finished = _timestamp()
        write_json(Path(directory) / "manifest.json", self.to_dict())


def _timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _status_for_blowups(result, tolerance):
    fraction = result.blowup_fraction
    if fraction > tolerance:
        logger.error(
            "Blowup fraction %.3f exceeds the tolerance %.3f",
            fraction, tolerance
        )
        return 1
    if fraction > 0.0:
        logger.warning(
            "Blowup fraction %.3f is within the tolerance %.3f",
            fraction, tolerance
        )
    return 0


def _print_plan(bundle):
    cfg = bundle.experiment
    print("Experiment: {}".format(cfg.experiment))
    print("Config digest: {}".format(bundle.digest))
    if cfg.experiment == "simulate":
        count = cfg.particles or len(cfg.initial_state)
        print("Particles: {}, horizon: {}".format(count, cfg.horizon))
    elif cfg.experiment == "lemma3":
        print("Samples: {}, item: {}".format(
            cfg.lemma3["samples"], cfg.lemma3["item"]))
    elif cfg.experiment == "mf-compare":
        print("Probes: {} over N = {}".format(
            cfg.probe_count, ", ".join(str(n) for n in cfg.n_grid)))
    else:
        for n, runs in cfg.plan():
            print("N={} runs={}".format(n, runs))
    print(json.dumps(bundle.data, sort_keys=True, indent=2))


def _simulate(bundle, out_dir):
    cfg = bundle.experiment
    if cfg.initial_state is not None:
        X0 = np.array(cfg.initial_state, dtype=float)
    else:
        model = cfg.density_model()
        X0 = model.sample(
            derive_seed(cfg.seed, "initial", cfg.particles, 0), cfg.particles)

    spec = KernelSpec(
        alpha=cfg.alpha, sign=cfg.sign, cutoff_exponent=cfg.c,
        particle_count=len(X0)
    )
    record = evolve_micro(
        spec, X0, bundle.simulation, seed=cfg.seed,
        config_digest=bundle.digest
    )
    path = out_dir / "trajectory.bin"
    record.save(path)
    return [path, path.with_suffix(".json"), path.with_suffix(".csv")]


def dispatch(bundle, out_dir, threads=1, keep_trajectories=False,
             command=None):
    """
    Run a validated config bundle, write its outputs and the manifest.

    Returns the exit status: 0 on success and 1 when blowups exceed the
    configured tolerance. A run that raises still writes its manifest, with
    status "error" and the exception message.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    collector = WarningCollector()
    logger.addHandler(collector)

    manifest = RunManifest(
        command=command or bundle.experiment.experiment,
        config_digest=bundle.digest, seed=bundle.seed, config=bundle.data,
        threads=threads
    )
    cfg = bundle.experiment
    status = "error"

    try:
        if cfg.experiment == "simulate":
            try:
                manifest.outputs = _simulate(bundle, out_dir)
                status = 0
            except IntegrationBlowupError as exc:
                logger.error("Simulation diverged at t=%g", exc.time)
                status = 1
        else:
            keep_dir = None
            if keep_trajectories:
                keep_dir = out_dir / "trajectories"
                keep_dir.mkdir(exist_ok=True)
                manifest.outputs.append(keep_dir)

            result = run_experiment(
                cfg, threads=threads, keep_trajectories=keep_dir)
            write_result(result, out_dir)
            manifest.outputs += [
                path for path in (
                    out_dir / "result.json", out_dir / "runs.csv")
                if path.is_file()
            ]
            status = _status_for_blowups(result, cfg.blowup_tolerance)
    except BaseException as exc:
        manifest.error = "{}: {}".format(type(exc).__name__, exc)
        raise
    finally:
        logger.removeHandler(collector)
        manifest.write(out_dir, status, collector.messages)

    return status


def _build_parser():
    parser = CustomArgumentParser(
        description=(
            "Mean-field particle simulator and Monte-Carlo verification "
            "harness.\n"
            "\n"
            "Usage:\n"
            "\n"
            "Simulate the configured N-particle system\n"
            "$ vlasim simulate --config run.json --out results/\n"
            "\n"
            "Run a scaling experiment\n"
            "$ vlasim experiment thm1 --config thm1.json --out results/\n"
            "\n"
            "Re-aggregate stored runs\n"
            "$ vlasim stats results/\n"
            "\n"
            "Audit the configured initial density\n"
            "$ vlasim audit-density --config run.json\n"
            "\n"
            "Environment variables:\n"
            "\n"
            "VLASIM_LOG: log level name, such as DEBUG or INFO"
        ),
        formatter_class=argparse.RawTextHelpFormatter
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true",
        help="Print progress information")
    parser.add_argument(
        "-V", "--version", action="version",
        version="%(prog)s ({})".format(__version__)
    )

    subparsers = parser.add_subparsers(dest="subcommand")

    def add_run_arguments(subparser, config_required):
        subparser.add_argument(
            "--config", type=str, required=config_required,
            help="Path to the JSON run config")
        subparser.add_argument(
            "--out", type=str, default=None,
            help="Output directory")
        subparser.add_argument(
            "--seed", type=int, default=None,
            help="Master seed, overrides the config")
        subparser.add_argument(
            "--dry-run", action="store_true",
            help="Print the resolved plan without running anything")

    simulate = subparsers.add_parser(
        "simulate", help="Evolve one N-particle configuration")
    add_run_arguments(simulate, config_required=True)

    experiment = subparsers.add_parser(
        "experiment", help="Run a scaling experiment")
    experiment.add_argument("name", choices=EXPERIMENTS)
    add_run_arguments(experiment, config_required=False)
    experiment.add_argument(
        "--threads", type=int, default=None,
        help="Maximum number of worker processes")
    experiment.add_argument(
        "--keep-trajectories", action="store_true",
        help="Store the interacting trajectories of every run")

    stats = subparsers.add_parser(
        "stats", help="Re-aggregate the runs.csv of an experiment")
    stats.add_argument("directory", type=str)
    stats.add_argument(
        "--out", type=str, default=None,
        help="Output directory, the run directory by default")

    audit = subparsers.add_parser(
        "audit-density", help="Audit the decay assumptions of a density")
    audit.add_argument(
        "--config", type=str, default=None,
        help="Run config holding a 'density' section")
    audit.add_argument(
        "--samples", type=int, default=10000,
        help="Number of sampled audit points")
    audit.add_argument(
        "--seed", type=int, default=0, help="Seed of the audit sample")
    audit.add_argument(
        "--out", type=str, default=None,
        help="Directory to write audit.json into")

    return parser


def _load_bundle(args, experiment):
    overrides = {"experiment": experiment, "seed": args.seed}
    if args.config:
        return load_config(args.config, overrides=overrides)
    return parse_config("{}", overrides=overrides)


def _stats(args):
    directory = Path(args.directory)
    previous = read_json(directory / "result.json")
    result = aggregate_runs(
        previous["experiment"], read_csv(directory / "runs.csv"))

    out_dir = Path(args.out) if args.out else directory
    out_dir.mkdir(parents=True, exist_ok=True)
    write_result(result, out_dir)
    print("Wrote {}".format(out_dir / "result.json"))


def _audit_density(args):
    model = load_density(args.config)
    report = audit_assumptions(
        model, sample_budget=args.samples, seed=args.seed)

    summary = dict(report._asdict())
    summary["density"] = model.to_dict()
    for key in sorted(report._fields):
        print("{}: {}".format(key, getattr(report, key)))

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "audit.json", summary)


def main(args=None):
    """
    'vlasim' script entrypoint
    """
    parser = _build_parser()
    args = parser.parse_args(args)

    if not args.subcommand:
        parser.print_help()
        return

    enable_logging(args.verbose)

    try:
        if args.subcommand == "stats":
            _stats(args)
            return
        if args.subcommand == "audit-density":
            _audit_density(args)
            return

        experiment = (
            "simulate" if args.subcommand == "simulate" else args.name
        )
        bundle = _load_bundle(args, experiment)

        if args.dry_run:
            _print_plan(bundle)
            return

        if not args.out:
            parser.error("--out is required unless --dry-run is given")

        threads = getattr(args, "threads", None) or 1
        status = dispatch(
            bundle, args.out, threads=threads,
            keep_trajectories=getattr(args, "keep_trajectories", False),
            command=" ".join([args.subcommand] + (
                [args.name] if args.subcommand == "experiment" else []))
        )
    except ConfigParseError as exc:
        exit_with_error("Invalid config at line {}, column {}: {}".format(
            exc.line, exc.column, exc))
    except ConfigValidationError as exc:
        exit_with_error(
            "Invalid config field '{}': {}".format(exc.field, exc))
    except (VlasimError, OSError) as exc:
        exit_with_error("Error: {}".format(exc))

    if status != 0:
        sys.exit(status)


if __name__ == "__main__":
    main()
