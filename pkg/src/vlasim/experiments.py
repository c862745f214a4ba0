import logging
import math
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .chaos import Observable, GoodSetSpec, closest_approach, \
    deviation_track, good_bad_partition, lln_fluctuation, stopping_times, \
    thm1_thresholds, thm2_thresholds
from .densities import DensityModel
from .dynamics import SimulationConfig, evolve_micro
from .errors import ConfigValidationError, InputError, IntegrationBlowupError
from .kernels import KernelSpec
from .meanfield import ZeroFieldBackend, build_backend, \
    evolve_characteristic, lift_flow
from .util import derive_seed, run_parallel, write_csv, write_json

__all__ = (
    "EXPERIMENTS", "ExperimentConfig", "ScalingResult", "ExponentFit",
    "fit_exponent", "wilson_interval", "initial_configuration",
    "default_reference_count", "run_thm1", "run_thm2", "run_lemma3",
    "run_mf_compare", "run_min_dist", "run_experiment", "lln_scaling",
    "capture_probability_free_flight", "write_result", "aggregate_runs"
)

logger = logging.getLogger("vlasim")

EXPERIMENTS = ("thm1", "thm2", "lemma3", "mf-compare", "min-dist")

LEMMA3_ITEMS = ("i", "ii", "iii")


class ExponentFit(object):
    __slots__ = ("slope", "stderr", "intercept", "used", "excluded")

    def __init__(self, slope, stderr, intercept, used, excluded):
        self.slope = slope
        self.stderr = stderr
        self.intercept = intercept
        self.used = used
        self.excluded = excluded

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__slots__}


def fit_exponent(points):
    """
    Least-squares slope of ln(value) against ln(N)

    Rows with non-positive or non-finite values are excluded with a warning.

    :raises InputError: if fewer than three usable rows remain
    """
    points = [(float(n), float(value)) for n, value in points]
    used = [
        (n, value) for n, value in points
        if n > 0.0 and value > 0.0 and math.isfinite(value)
    ]
    excluded = len(points) - len(used)
    if excluded:
        logger.warning(
            "Excluded %d non-positive rows from the exponent fit", excluded
        )
    if len(used) < 3:
        raise InputError(
            "Exponent fits need at least 3 positive rows, got {}".format(
                len(used))
        )

    log_n = np.log([n for n, _ in used])
    log_value = np.log([value for _, value in used])
    if np.ptp(log_value) == 0.0:
        return ExponentFit(
            slope=0.0, stderr=0.0, intercept=float(log_value[0]),
            used=len(used), excluded=excluded
        )

    fit = stats.linregress(log_n, log_value)
    return ExponentFit(
        slope=float(fit.slope), stderr=float(fit.stderr),
        intercept=float(fit.intercept), used=len(used), excluded=excluded
    )


def wilson_interval(successes, trials, confidence=0.95):
    """
    Wilson score interval of a binomial proportion
    """
    if trials == 0:
        return None, None
    interval = stats.binomtest(int(successes), int(trials)).proportion_ci(
        confidence_level=confidence, method="wilson"
    )
    return float(interval.low), float(interval.high)


def default_reference_count(particle_count):
    return max(4096, 8 * int(particle_count))


class ExperimentConfig(object):
    """
    Fully resolved experiment parameters

    Built by 'config.parse_config'; every default is materialised so the
    manifest records exactly what ran.
    """
    __slots__ = (
        "experiment", "alpha", "sign", "c", "c1", "c2", "sigma", "n_grid",
        "ensemble_size", "horizon", "seed", "blowup_tolerance", "density",
        "backend", "simulation", "lemma3", "probe_count", "partition",
        "sigma_sensitivity", "particles", "initial_state", "exterior_probes"
    )

    def __init__(self, **kwargs):
        for name in self.__slots__:
            setattr(self, name, kwargs.get(name))

        if not isinstance(self.simulation, SimulationConfig):
            self.simulation = SimulationConfig.from_dict(
                self.simulation or {}, horizon=self.horizon
            )
        self.validate()

    def validate(self):
        """
        :raises ConfigValidationError: naming the offending field
        """
        if self.experiment not in EXPERIMENTS + ("simulate",):
            raise ConfigValidationError(
                "Unknown experiment '{}'".format(self.experiment),
                "experiment"
            )
        if not 1.0 < self.alpha <= 2.0:
            raise ConfigValidationError("alpha must lie in (1, 2]", "alpha")
        if self.sign not in (-1, 0, 1):
            raise ConfigValidationError("sign must be -1, 0 or 1", "sign")
        if not 0.0 < self.sigma < 0.5:
            raise ConfigValidationError("sigma must lie in (0, 1/2)", "sigma")
        if not 0.0 <= self.blowup_tolerance <= 1.0:
            raise ConfigValidationError(
                "blowup tolerance must lie in [0, 1]", "blowup_tolerance")

        if self.experiment == "simulate":
            return

        grid = list(self.n_grid)
        if len(grid) < 3 and self.experiment != "lemma3":
            raise ConfigValidationError(
                "N grid needs at least 3 points", "n_grid")
        if any(n < 2 for n in grid) or any(
                b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigValidationError(
                "N grid must be strictly increasing with N >= 2", "n_grid")
        if self.ensemble_size < 8 and self.experiment != "mf-compare":
            raise ConfigValidationError(
                "ensemble size must be at least 8", "ensemble_size")

        if self.experiment == "thm1" and self.mode == "ii" \
                and self.alpha > 4.0 / 3.0 + 1e-12:
            raise ConfigValidationError(
                "thm1 needs alpha <= 4/3 or alpha = 2", "alpha")
        if self.experiment == "thm2":
            if self.alpha > 4.0 / 3.0 + 1e-12:
                raise ConfigValidationError(
                    "thm2 needs alpha in (1, 4/3]", "alpha")
            if self.c1 < 2.0 / 3.0 - 1e-12:
                raise ConfigValidationError("c1 must be at least 2/3", "c1")
            if self.c2 < self.c1:
                raise ConfigValidationError(
                    "c2 must be at least c1 = {}".format(self.c1), "c2")
        if self.experiment == "lemma3" and \
                self.lemma3.get("item") not in LEMMA3_ITEMS:
            raise ConfigValidationError(
                "lemma3 item must be one of i, ii, iii", "lemma3.item")

    @property
    def mode(self):
        """
        thm1 mode: 'i' for alpha = 2, 'ii' otherwise
        """
        return "i" if self.alpha == 2.0 else "ii"

    def density_model(self):
        return DensityModel.from_dict(self.density)

    def kernel(self, particle_count, cutoff_exponent):
        return KernelSpec(
            alpha=self.alpha, sign=self.sign,
            cutoff_exponent=cutoff_exponent, particle_count=particle_count
        )

    def backend_for(self, model, spec, particle_count):
        options = dict(self.backend)
        kind = options.pop("kind")
        if options.get("reference_count") is None:
            options["reference_count"] = default_reference_count(
                particle_count)
        return build_backend(
            kind, model, spec, self.horizon, options,
            seed=derive_seed(self.seed, "backend", particle_count)
        )

    def plan(self):
        """
        Return the (N, runs) pairs the experiment will execute
        """
        return [(int(n), int(self.ensemble_size)) for n in self.n_grid]

    def to_dict(self):
        data = {name: getattr(self, name) for name in self.__slots__}
        data["simulation"] = self.simulation.to_dict()
        del data["simulation"]["horizon"]
        data["n_grid"] = list(self.n_grid)
        return data


class ScalingResult(object):
    """
    Per-N summary rows, the fitted log-log slope and the raw run rows
    """
    __slots__ = ("experiment", "statistic", "rows", "fit", "runs", "extra")

    def __init__(self, experiment, statistic, rows, runs, extra=None):
        self.experiment = experiment
        self.statistic = statistic
        self.rows = sorted(rows, key=lambda row: row["n"])
        self.runs = runs
        self.extra = dict(extra or {})

        points = [
            (row["n"], row[statistic]) for row in self.rows
            if row.get(statistic) is not None
        ]
        try:
            self.fit = fit_exponent(points)
        except InputError:
            logger.warning(
                "Fewer than 3 N values with positive %s, no slope fitted",
                statistic
            )
            self.fit = None

    @property
    def slope(self):
        return None if self.fit is None else self.fit.slope

    @property
    def blowup_fraction(self):
        total = sum(row["runs"] + row["blowups"] for row in self.rows)
        blowups = sum(row["blowups"] for row in self.rows)
        return blowups / float(total) if total else 0.0

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "statistic": self.statistic,
            "rows": self.rows,
            "fit": None if self.fit is None else self.fit.to_dict(),
            "blowup_fraction": self.blowup_fraction,
            "extra": self.extra,
            "runs": "runs.csv"
        }


def write_result(result, directory):
    """
    Write result.json and runs.csv into 'directory'
    """
    write_json(directory / "result.json", result.to_dict())
    if result.runs:
        fieldnames = sorted({key for row in result.runs for key in row})
        write_csv(directory / "runs.csv", fieldnames, result.runs)


def initial_configuration(cfg, model, particle_count, run):
    """
    i.i.d. initial data of one run, from its own seed stream
    """
    return model.sample(
        derive_seed(cfg.seed, "initial", particle_count, run), particle_count
    )


def _quantiles(values):
    if len(values) == 0:
        return None, None, None
    q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    return float(median), float(q25), float(q75)


def _summary_row(n, runs, statistic, exceed_key="exceeded"):
    completed = [run for run in runs if not run["blowup"]]
    blowups = len(runs) - len(completed)
    values = [run[statistic] for run in completed]
    median, q25, q75 = _quantiles(values)

    # Blowups count towards the exceedance numerator
    exceeded = sum(1 for run in completed if run.get(exceed_key)) + blowups
    low, high = wilson_interval(exceeded, len(runs))

    return {
        "n": n,
        "runs": len(completed),
        "blowups": blowups,
        statistic: median,
        "q25": q25,
        "q75": q75,
        "exceed_fraction": exceeded / float(len(runs)) if runs else None,
        "exceed_ci": [low, high]
    }


def _fraction_row(runs, key):
    hits = sum(1 for run in runs if run.get(key))
    low, high = wilson_interval(hits, len(runs))
    return {
        "fraction": hits / float(len(runs)) if runs else None,
        "ci": [low, high]
    }


def _keep(directory, record, n, run, label=None):
    """
    Save a run's trajectory when --keep-trajectories is set
    """
    if directory is None:
        return
    name = "n{}_run{}".format(n, run)
    if label:
        name += "_" + label
    record.save(Path(directory) / (name + ".bin"), summary=False)


def _thm1_run(cfg, model, n, run, backend, keep=None):
    spec = cfg.kernel(n, cfg.c)
    X0 = initial_configuration(cfg, model, n, run)
    row = {"n": n, "run": run, "blowup": False}
    mode_threshold = (
        n ** (-0.5 + cfg.sigma) if cfg.mode == "ii" else n ** (-2.0 / 9.0)
    )

    try:
        micro = evolve_micro(spec, X0, cfg.simulation, seed=run)
        lifted = lift_flow(backend, spec, X0, 0.0, cfg.horizon,
                           cfg.simulation)
    except IntegrationBlowupError as exc:
        logger.warning(
            "Run %d for N=%d diverged at t=%g", run, n, exc.time)
        row.update({"blowup": True, "exceeded": True,
                    "blowup_time": exc.time})
        return row

    _keep(keep, micro, n, run)

    report = deviation_track(
        micro, lifted, {"mode": mode_threshold}
    )
    thresholds = thm1_thresholds(n, cfg.sigma, cfg.alpha)

    partition = None
    if cfg.partition:
        good_spec = GoodSetSpec(
            "alpha-2" if cfg.mode == "i" else "alpha-le-4/3", n, cfg.sigma
        )
        partition = good_bad_partition(
            X0, backend, spec, good_spec, cfg.simulation, record=lifted
        )
        row["bad_count"] = len(partition.bad)

    stopping = stopping_times(report, thresholds, partition=partition)

    row.update({
        "max_sup": report.max_sup,
        "max_one": report.max_one,
        "exceeded": report.exceeds(mode_threshold),
        "tau_good": stopping.tau_good,
        "tau_bad": stopping.tau_bad,
        "min_pair_distance": micro.diagnostics["min_pair_distance"]
    })
    for sigma in cfg.sigma_sensitivity:
        row["exceeded_sigma_{}".format(sigma)] = report.exceeds(
            n ** (-0.5 + sigma))
    return row


def _thm2_run(cfg, model, n, run, backend, keep=None):
    spec1 = cfg.kernel(n, cfg.c1)
    spec2 = cfg.kernel(n, cfg.c2)
    # Both dynamics share the base step of the c1 kernel
    simulation = cfg.simulation.replace(
        dt0=cfg.simulation.resolved_dt0(spec1))

    X0 = initial_configuration(cfg, model, n, run)
    row = {"n": n, "run": run, "blowup": False}

    try:
        first = evolve_micro(spec1, X0, simulation, seed=run)
        second = evolve_micro(spec2, X0, simulation, seed=run)
    except IntegrationBlowupError as exc:
        logger.warning(
            "Run %d for N=%d diverged at t=%g", run, n, exc.time)
        row.update({"blowup": True, "exceeded": True,
                    "blowup_time": exc.time})
        return row

    _keep(keep, first, n, run, "c1")
    _keep(keep, second, n, run, "c2")

    threshold = n ** (-0.5 + cfg.sigma)
    report = deviation_track(first, second, {"threshold": threshold})
    stopping = stopping_times(
        report, thm2_thresholds(n, cfg.sigma),
        records=(first, second), spec=(spec1, spec2)
    )

    row.update({
        "max_sup": report.max_sup,
        "max_one": report.max_one,
        "exceeded": report.exceeds(threshold),
        "min_pair_distance": second.diagnostics["min_pair_distance"],
        "cutoff_engaged": second.diagnostics["cutoff_engaged"],
        "tau_dev1": stopping.tau_dev1,
        "tau_dev2": stopping.tau_dev2,
        "tau_col": stopping.tau_col
    })
    return row


def _min_dist_run(cfg, model, n, run, backend, keep=None):
    spec = cfg.kernel(n, cfg.c2)
    X0 = initial_configuration(cfg, model, n, run)
    row = {"n": n, "run": run, "blowup": False}

    try:
        record = evolve_micro(spec, X0, cfg.simulation, seed=run)
    except IntegrationBlowupError as exc:
        row.update({"blowup": True, "blowup_time": exc.time})
        return row

    _keep(keep, record, n, run)

    row.update({
        "min_pair_distance": record.diagnostics["min_pair_distance"],
        "cutoff_engaged": record.diagnostics["cutoff_engaged"]
    })
    return row


RUNNERS = {
    "thm1": _thm1_run,
    "thm2": _thm2_run,
    "min-dist": _min_dist_run
}


def _run_chunk(task):
    """
    Worker entry point: execute the runs of one chunk for one N
    """
    experiment, cfg, n, runs, backend, keep = task
    model = cfg.density_model()
    runner = RUNNERS[experiment]
    return [runner(cfg, model, n, run, backend, keep) for run in runs]


def _ensemble(cfg, experiment, threads, needs_backend, keep=None):
    """
    Execute every run of an ensemble experiment, in run-index order
    """
    model = cfg.density_model()
    threads = max(1, int(threads or 1))
    all_runs = {}

    for n, size in cfg.plan():
        backend = None
        if needs_backend:
            backend = cfg.backend_for(model, cfg.kernel(n, cfg.c), n)

        chunk_count = min(size, 2 * threads)
        chunks = [
            list(indices) for indices in np.array_split(
                np.arange(size), chunk_count)
            if len(indices)
        ]
        tasks = [
            (experiment, cfg, n, [int(run) for run in chunk], backend, keep)
            for chunk in chunks
        ]
        logger.info(
            "Running %s for N=%d: %d runs in %d chunks",
            experiment, n, size, len(tasks)
        )
        results = run_parallel(_run_chunk, tasks, threads=threads)
        all_runs[n] = sorted(
            (row for chunk in results for row in chunk),
            key=lambda row: row["run"]
        )

    return all_runs


def run_thm1(cfg, threads=1, keep_trajectories=None):
    """
    Deviation between the interacting flow and the lifted mean-field flow
    """
    if cfg.mode == "i":
        logger.warning(
            "thm1 mode (i) with alpha = 2 is exploratory, the "
            "substep cost grows quickly with N"
        )

    all_runs = _ensemble(
        cfg, "thm1", threads, needs_backend=True, keep=keep_trajectories)
    rows = [_summary_row(n, runs, "max_sup") for n, runs in all_runs.items()]

    sensitivity = {}
    for sigma in cfg.sigma_sensitivity:
        key = "exceeded_sigma_{}".format(sigma)
        sensitivity[str(sigma)] = {
            str(n): (
                sum(1 for run in runs if run.get(key) or run["blowup"])
                / float(len(runs))
            )
            for n, runs in all_runs.items()
        }

    extra = {"mode": cfg.mode, "sigma_sensitivity": sensitivity}
    if cfg.partition:
        extra["bad_fraction"] = {
            str(n): _fraction_row(
                [run for run in runs if not run["blowup"]], "bad_count")
            for n, runs in all_runs.items()
        }

    return ScalingResult(
        "thm1", "max_sup", rows,
        [run for runs in all_runs.values() for run in runs], extra
    )


def run_thm2(cfg, threads=1, keep_trajectories=None):
    """
    Deviation between the c1 and c2 regularized interacting flows
    """
    all_runs = _ensemble(
        cfg, "thm2", threads, needs_backend=False, keep=keep_trajectories)
    rows = [_summary_row(n, runs, "max_sup") for n, runs in all_runs.items()]

    engagement = {}
    min_distance = {}
    for n, runs in all_runs.items():
        completed = [run for run in runs if not run["blowup"]]
        engagement[str(n)] = _fraction_row(completed, "cutoff_engaged")
        median, q25, q75 = _quantiles(
            [run["min_pair_distance"] for run in completed])
        min_distance[str(n)] = {"median": median, "q25": q25, "q75": q75}

    return ScalingResult(
        "thm2", "max_sup", rows,
        [run for runs in all_runs.values() for run in runs],
        {"cutoff_engagement": engagement, "min_pair_distance": min_distance}
    )


def run_min_dist(cfg, threads=1, keep_trajectories=None):
    """
    Minimal pair distance statistics under the c2 dynamics
    """
    all_runs = _ensemble(
        cfg, "min-dist", threads, needs_backend=False,
        keep=keep_trajectories)

    rows = []
    for n, runs in all_runs.items():
        row = _summary_row(n, runs, "min_pair_distance",
                           exceed_key="cutoff_engaged")
        row["cutoff_radius"] = n ** (-cfg.c2)
        rows.append(row)

    return ScalingResult(
        "min-dist", "min_pair_distance", rows,
        [run for runs in all_runs.values() for run in runs]
    )


def capture_probability_free_flight(model, dx, horizon):
    """
    P(min over s in [0, T] of |q + v s| <= dx) for X = (q, v) ~ k_0 in free
    flight, with the target at rest at the origin

    Given |v|, the captured positions form a capsule of radius dx around a
    segment of length L = |v| T. Its Gaussian measure has a closed-form
    cylinder and hemisphere part plus a one-dimensional integral over the
    far cap; the result is averaged over the chi(3) law of |v|.
    """
    if model.family != "gaussian-product" or np.any(model.center != 0.0):
        raise InputError(
            "the free-flight oracle needs a centered gaussian-product model"
        )

    s = model.spatial_scale
    radial = stats.chi(df=3)
    normal = stats.norm(scale=s)
    disc = 1.0 - math.exp(-0.5 * dx * dx / (s * s))
    near_cap = 0.5 * radial.cdf(dx / s)

    def capsule(length):
        cylinder = (normal.cdf(length) - 0.5) * disc
        far_cap, _ = integrate.quad(
            lambda z: normal.pdf(z) * (
                1.0 - math.exp(-0.5 * (dx * dx - (z - length) ** 2)
                               / (s * s))),
            length, length + dx
        )
        return cylinder + near_cap + far_cap

    speed = stats.chi(df=3, scale=model.velocity_scale)
    probability, _ = integrate.quad(
        lambda u: capsule(u * horizon) * speed.pdf(u),
        0.0, speed.ppf(1.0 - 1e-12), limit=200
    )
    return probability


def _lemma3_paths(backend, spec, states, horizon, simulation, block=2048):
    """
    Characteristic paths of many phase points, a block at a time
    """
    paths = []
    for start in range(0, len(states), block):
        paths.append(evolve_characteristic(
            backend, spec, states[start:start + block], 0.0, horizon,
            simulation
        ))
    return paths[0].times, np.concatenate(
        [path.states for path in paths], axis=1)


def run_lemma3(cfg, threads=1):
    """
    Monte-Carlo collision probabilities of mean-field characteristics

    Item (ii) fixes the target Y and samples X; item (iii) samples both;
    item (i) adds a relative-speed bound and reports the ratio to
    dx^2 dv^4 (t2 - t1) + dx^3 max(dx, dv)^3.
    """
    options = cfg.lemma3
    item = options["item"]
    model = cfg.density_model()
    spec = KernelSpec.limit(cfg.alpha, cfg.sign, cfg.n_grid[-1])
    samples = int(options["samples"])

    if cfg.backend["kind"] == "zero-field":
        backend = ZeroFieldBackend()
    else:
        backend = cfg.backend_for(model, spec, cfg.n_grid[-1])

    sample = model.sample(derive_seed(cfg.seed, "lemma3", "x"), samples)
    if item == "iii":
        targets = model.sample(derive_seed(cfg.seed, "lemma3", "y"), samples)
    else:
        targets = np.broadcast_to(
            np.asarray(options["target"], dtype=float), (samples, 6))

    times, states = _lemma3_paths(
        backend, spec, np.concatenate([sample, targets]), cfg.horizon,
        cfg.simulation
    )
    x_path, y_path = states[:, :samples], states[:, samples:]
    dq = x_path[..., :3] - y_path[..., :3]
    dv = x_path[..., 3:] - y_path[..., 3:]

    windows = options["windows"] or [[0.0, cfg.horizon]]
    dv_grid = options["dv_grid"] if item == "i" else [math.inf]

    cells = []
    for t1, t2 in windows:
        mask = (times >= t1 - 1e-12) & (times <= t2 + 1e-12)
        _, distance, speed = closest_approach(
            times[mask], dq[mask], dv[mask])

        for dv_max in dv_grid:
            for dx in options["dx_grid"]:
                hits = int(np.count_nonzero(
                    (distance <= dx) & (speed <= dv_max)))
                low, high = wilson_interval(hits, samples)
                cell = {
                    "window": [t1, t2], "dx": dx,
                    "dv": None if math.isinf(dv_max) else dv_max,
                    "hits": hits, "samples": samples,
                    "probability": hits / float(samples),
                    "ci": [low, high], "one_sided": hits == 0
                }
                if item == "i":
                    shape = dx ** 2 * dv_max ** 4 * (t2 - t1) \
                        + dx ** 3 * max(dx, dv_max) ** 3
                    cell["bound_ratio"] = cell["probability"] / shape
                cells.append(cell)

    fits = {}
    for t1, t2 in windows:
        for dv_max in dv_grid:
            points = [
                (cell["dx"], cell["probability"]) for cell in cells
                if cell["window"] == [t1, t2] and not cell["one_sided"]
                and cell["dv"] == (None if math.isinf(dv_max) else dv_max)
            ]
            key = "{}-{}:{}".format(
                t1, t2, "inf" if math.isinf(dv_max) else dv_max)
            try:
                fits[key] = fit_exponent(points).to_dict()
            except InputError:
                fits[key] = None

    extra = {"item": item, "cells": cells, "fits": fits,
             "backend": backend.to_dict()}

    oracle_applicable = (
        item == "ii" and backend.kind == "zero-field"
        and model.family == "gaussian-product"
        and not np.any(model.center) and not np.any(options["target"])
    )
    if oracle_applicable:
        extra["oracle"] = [
            {"dx": dx, "probability": capture_probability_free_flight(
                model, dx, cfg.horizon)}
            for dx in options["dx_grid"]
        ]

    rows = [
        {"n": cell["dx"], "runs": samples, "blowups": 0,
         "probability": cell["probability"]}
        for cell in cells
        if cell["window"] == list(windows[0]) and cell["dv"] is None
    ] if item != "i" else []

    result = ScalingResult("lemma3", "probability", rows, [], extra)
    return result


def _support_distance(model, positions):
    """
    Distance from each position to the spatial support, zero for models
    with unbounded support
    """
    if model.family != "uniform-ball-spatial":
        return np.zeros(len(positions))
    return np.maximum(
        np.linalg.norm(positions - model.center, axis=1)
        - model.spatial_scale, 0.0
    )


def run_mf_compare(cfg, threads=1):
    """
    Gap between characteristics of the regularized and the limit kernel in
    one shared field

    The reference ensemble evolves once under the limit kernel; per N only
    the test kernel changes. Interior probes sample k_0, exterior probes
    come from the config and are reported separately.
    """
    model = cfg.density_model()
    limit = KernelSpec.limit(cfg.alpha, cfg.sign, cfg.n_grid[-1])
    backend = cfg.backend_for(model, limit, cfg.n_grid[-1])

    interior = model.sample(
        derive_seed(cfg.seed, "mf-probes"), int(cfg.probe_count))
    exterior = np.asarray(cfg.exterior_probes or [], dtype=float).reshape(
        -1, 6)
    probes = np.concatenate([interior, exterior])
    reference = lift_flow(
        backend, limit, probes, 0.0, cfg.horizon, cfg.simulation)

    # Probes all within one cut-off radius of the support
    if len(exterior):
        reach = float(_support_distance(model, exterior[:, :3]).max())
    else:
        reach = model.spatial_scale

    rows = []
    runs = []
    for n in cfg.n_grid:
        spec = cfg.kernel(int(n), cfg.c)
        regularized = lift_flow(
            backend, spec, probes, 0.0, cfg.horizon, cfg.simulation,
            times=reference.times
        )
        gaps = np.linalg.norm(
            regularized.states - reference.states, axis=-1).max(axis=0)
        inner_gaps = gaps[:len(interior)]
        outer_gaps = gaps[len(interior):]

        dominated = bool(spec.cutoff_radius() >= reach)
        if dominated:
            logger.warning(
                "Cut-off radius %g reaches every probe for N=%d, the gap "
                "is dominated by the cut-off interior",
                spec.cutoff_radius(), n
            )

        rows.append({
            "n": int(n), "runs": len(probes), "blowups": 0,
            "gap": float(inner_gaps.max()) if len(inner_gaps) else None,
            "median_gap": (
                float(np.median(inner_gaps)) if len(inner_gaps) else None),
            "exterior_gap": (
                float(outer_gaps.max()) if len(outer_gaps) else None),
            "cutoff_dominated": dominated
        })
        runs.extend(
            {"n": int(n), "probe": index, "gap": float(gap),
             "exterior": index >= len(interior), "blowup": False}
            for index, gap in enumerate(gaps)
        )

    return ScalingResult(
        "mf-compare", "gap", rows, runs,
        {"reference_slope": -2.0 * cfg.c, "backend": backend.to_dict()}
    )


def run_experiment(cfg, threads=1, keep_trajectories=None):
    """
    Run the experiment named by 'cfg', optionally saving the interacting
    trajectories of every run into 'keep_trajectories'
    """
    if cfg.experiment in RUNNERS:
        runner = {
            "thm1": run_thm1,
            "thm2": run_thm2,
            "min-dist": run_min_dist
        }[cfg.experiment]
        return runner(
            cfg, threads=threads, keep_trajectories=keep_trajectories)
    if keep_trajectories is not None:
        logger.warning(
            "%s keeps no interacting trajectories", cfg.experiment)

    runner = {"lemma3": run_lemma3, "mf-compare": run_mf_compare}[
        cfg.experiment]
    return runner(cfg, threads=threads)


# Statistic and exceedance column of ensemble experiments
AGGREGATES = {
    "thm1": ("max_sup", "exceeded"),
    "thm2": ("max_sup", "exceeded"),
    "min-dist": ("min_pair_distance", "cutoff_engaged")
}


def _parse_cell(value):
    if value in ("", None):
        return None
    if value in ("True", "False"):
        return value == "True"
    try:
        number = float(value)
    except ValueError:
        return value
    return int(number) if number.is_integer() and "." not in value \
        and "e" not in value.lower() else number


def aggregate_runs(experiment, runs):
    """
    Rebuild the per-N summary of stored run rows

    'runs' holds rows as read back from runs.csv, so every cell may still
    be a string.
    """
    if experiment not in AGGREGATES:
        raise InputError(
            "Only {} runs can be aggregated".format(
                ", ".join(sorted(AGGREGATES)))
        )
    statistic, exceed_key = AGGREGATES[experiment]

    parsed = [
        {key: _parse_cell(value) for key, value in row.items()}
        for row in runs
    ]
    grouped = {}
    for row in parsed:
        row["blowup"] = bool(row.get("blowup"))
        grouped.setdefault(int(row["n"]), []).append(row)

    rows = [
        _summary_row(n, sorted(group, key=lambda row: row["run"]),
                     statistic, exceed_key=exceed_key)
        for n, group in sorted(grouped.items())
    ]
    return ScalingResult(experiment, statistic, rows, parsed)


def lln_scaling(observable, model, n_grid, ensemble_size, seed):
    """
    Median LLN fluctuation per N and its fitted decay exponent
    """
    if not isinstance(observable, Observable):
        raise InputError("observable must be an Observable")

    expectation, exact = observable.expectation(model)
    rows = []
    for n in n_grid:
        result = lln_fluctuation(
            observable, model, n, ensemble_size, seed,
            expectation=expectation
        )
        rows.append({
            "n": int(n), "runs": int(ensemble_size), "blowups": 0,
            "median": result.median
        })

    return ScalingResult(
        "lln", "median", rows, [],
        {"observable": observable.to_dict(), "exact_expectation": exact}
    )
