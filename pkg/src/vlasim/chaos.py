import logging
import math
from collections import namedtuple

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline
from scipy.stats import wasserstein_distance

from .errors import InputError, RangeError
from .kernels import Envelope, force_magnitude
from .meanfield import lift_flow
from .util import derive_rng, derive_seed

__all__ = (
    "GOOD_SET_MODES", "OBSERVABLE_KINDS", "CollisionClassSpec",
    "PairWitness", "Separation", "GoodSetSpec", "Partition",
    "DeviationReport", "StoppingThresholds", "StoppingTimeReport",
    "ImpactReport", "Observable", "LlnResult", "closest_approach",
    "path_separation", "pair_separation", "classify_pair_mean_field",
    "classify_pair_micro", "good_bad_partition", "deviation_track",
    "thm1_thresholds", "thm2_thresholds", "collision_integrals",
    "stopping_times", "collision_impact", "lln_fluctuation", "bl_distance"
)

logger = logging.getLogger("vlasim")

GOOD_SET_MODES = ("alpha-2", "alpha-le-4/3")
OBSERVABLE_KINDS = ("constant", "half-space", "ball", "impact-envelope")

# Samples for observables without a closed-form expectation
FALLBACK_SAMPLE_SIZE = 1 << 20

GAUSS_NODES, GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)

PairWitness = namedtuple(
    "PairWitness", ("member", "t_min", "distance", "relative_speed")
)

Separation = namedtuple("Separation", ("times", "dq", "dv"))

Partition = namedtuple("Partition", ("good", "bad", "witnesses"))

ImpactReport = namedtuple(
    "ImpactReport",
    ("integral", "bound", "ratio", "t_min", "distance", "relative_speed")
)

LlnResult = namedtuple(
    "LlnResult", ("fluctuations", "median", "expectation", "exact")
)


class CollisionClassSpec(object):
    """
    Collision class: closest approach within the window in [r, R] with
    relative speed in [v, V] at that moment
    """
    __slots__ = ("r_min", "r_max", "v_min", "v_max", "window")

    def __init__(
            self, r_min=0.0, r_max=math.inf, v_min=0.0, v_max=math.inf,
            window=(0.0, math.inf)):
        r_min, r_max, v_min, v_max = (
            float(r_min), float(r_max), float(v_min), float(v_max)
        )
        t1, t2 = (float(window[0]), float(window[1]))

        if min(r_min, r_max, v_min, v_max) < 0.0:
            raise InputError("class bounds must be nonnegative")
        if r_min > r_max:
            raise InputError("r_min must not exceed r_max")
        if v_min > v_max:
            raise InputError("v_min must not exceed v_max")
        if t1 > t2:
            raise InputError("window start must not exceed its end")

        self.r_min = r_min
        self.r_max = r_max
        self.v_min = v_min
        self.v_max = v_max
        self.window = (t1, t2)

    def contains(self, distance, relative_speed):
        return (
            (self.r_min <= distance) & (distance <= self.r_max)
            & (self.v_min <= relative_speed)
            & (relative_speed <= self.v_max)
        )

    def to_dict(self):
        return {
            "r_min": self.r_min, "r_max": self.r_max,
            "v_min": self.v_min, "v_max": self.v_max,
            "window": list(self.window)
        }


def _window_indices(times, window):
    t1, t2 = window
    t2 = min(t2, times[-1]) if math.isinf(t2) else t2
    tolerance = 1e-12 * max(1.0, abs(times[-1]))

    if t1 < times[0] - tolerance or t2 > times[-1] + tolerance:
        raise RangeError(
            "Window [{}, {}] lies outside the grid [{}, {}]".format(
                t1, t2, times[0], times[-1])
        )
    indices = np.nonzero(
        (times >= t1 - tolerance) & (times <= t2 + tolerance))[0]
    if len(indices) == 0:
        raise RangeError("Window [{}, {}] holds no grid time".format(t1, t2))
    return indices


def closest_approach(times, dq, dv):
    """
    Locate the closest approach of separations on a time grid

    'dq' and 'dv' have shape (S, 3) or (S, P, 3). The discrete minimum of
    |dq|^2 is refined by the parabola through three neighboring grid points,
    which is exact for free flight. Ties go to the first grid time. Returns
    (t_min, distance, relative_speed), with the relative velocity linearly
    interpolated at t_min.
    """
    times = np.asarray(times, dtype=float)
    dq = np.asarray(dq, dtype=float)
    dv = np.asarray(dv, dtype=float)
    single = dq.ndim == 2
    if single:
        dq, dv = dq[:, np.newaxis], dv[:, np.newaxis]

    count = len(times)
    pairs = np.arange(dq.shape[1])
    d2 = np.einsum("spk,spk->sp", dq, dq)

    lowest = d2.min(axis=0)
    ties = d2 <= lowest + 1e-12 * np.maximum(lowest, 1e-300)
    k = np.argmax(ties, axis=0)

    t_min = times[k].copy()
    d2_min = d2[k, pairs].copy()

    if count >= 3:
        c = np.clip(k, 1, count - 2)
        x0, x1, x2 = times[c - 1], times[c], times[c + 1]
        y0, y1, y2 = d2[c - 1, pairs], d2[c, pairs], d2[c + 1, pairs]

        slope01 = (y1 - y0) / (x1 - x0)
        slope12 = (y2 - y1) / (x2 - x1)
        curvature = (slope12 - slope01) / (x2 - x0)

        with np.errstate(divide="ignore", invalid="ignore"):
            vertex = 0.5 * (x0 + x1) - slope01 / (2.0 * curvature)

        lower = times[np.maximum(k - 1, 0)]
        upper = times[np.minimum(k + 1, count - 1)]
        valid = (curvature > 0.0) & np.isfinite(vertex)
        vertex = np.where(valid, np.clip(vertex, lower, upper), t_min)

        refined = y0 + (vertex - x0) * (slope01 + curvature * (vertex - x1))
        better = valid & (refined < d2_min)
        t_min = np.where(better, vertex, t_min)
        d2_min = np.where(better, np.maximum(refined, 0.0), d2_min)

    # Relative velocity at t_min by linear interpolation
    upper_index = np.clip(np.searchsorted(times, t_min, side="right"),
                          1, max(count - 1, 1))
    lower_index = upper_index - 1
    if count >= 2:
        span = times[upper_index] - times[lower_index]
        weight = np.clip((t_min - times[lower_index]) / span, 0.0, 1.0)
        velocity = (
            (1.0 - weight)[:, np.newaxis] * dv[lower_index, pairs]
            + weight[:, np.newaxis] * dv[upper_index, pairs]
        )
    else:
        velocity = dv[0]
    speed = np.linalg.norm(velocity, axis=-1)
    distance = np.sqrt(d2_min)

    if single:
        return float(t_min[0]), float(distance[0]), float(speed[0])
    return t_min, distance, speed


def path_separation(path_y, path_z):
    """
    Separation of two characteristic paths (times, states of shape (S, 6))
    """
    times_y, states_y = path_y
    times_z, states_z = path_z
    if len(times_y) != len(times_z) or not np.allclose(
            times_y, times_z, rtol=0.0, atol=1e-12):
        raise InputError("paths must share their time grid")

    states_y = np.asarray(states_y, dtype=float)
    states_z = np.asarray(states_z, dtype=float)
    return Separation(
        times=np.asarray(times_y, dtype=float),
        dq=states_y[:, :3] - states_z[:, :3],
        dv=states_y[:, 3:] - states_z[:, 3:]
    )


def pair_separation(record, i, j):
    if i == j:
        raise InputError("a particle cannot collide with itself")
    return Separation(
        times=record.times,
        dq=record.positions(i) - record.positions(j),
        dv=record.velocities(i) - record.velocities(j)
    )


def _classify(separation, spec):
    indices = _window_indices(separation.times, spec.window)
    t_min, distance, speed = closest_approach(
        separation.times[indices], separation.dq[indices],
        separation.dv[indices]
    )
    return PairWitness(
        member=bool(spec.contains(distance, speed)),
        t_min=t_min, distance=distance, relative_speed=speed
    )


def classify_pair_mean_field(path_y, path_z, spec):
    """
    Decide whether the characteristic of Z lies in the collision class of Y

    Identical paths are never members.
    """
    separation = path_separation(path_y, path_z)
    if not np.any(separation.dq) and not np.any(separation.dv):
        return PairWitness(
            member=False, t_min=math.nan, distance=0.0, relative_speed=0.0
        )
    return _classify(separation, spec)


def classify_pair_micro(record, i, j, spec):
    """
    Collision class membership for two interacting particles of a record
    """
    return _classify(pair_separation(record, i, j), spec)


class GoodSetSpec(object):
    """
    Forbidden collision classes defining good and bad particles

    'alpha-2' uses the single class (6N^(-2/9-sigma), N^(-2/9)).
    'alpha-le-4/3' uses (6N^(-k sigma/2), N^(-1/2+k sigma/6+sigma/2)) for
    every integer k with 3/4 - sigma <= k sigma <= 1, together with
    (6N^(-1/2+sigma), N^(-5/18)).
    """
    __slots__ = ("mode", "sigma", "particle_count")

    def __init__(self, mode, particle_count, sigma=0.1):
        if mode not in GOOD_SET_MODES:
            raise InputError("Unknown good-set mode '{}'".format(mode))
        if not 0.0 < sigma < 0.5:
            raise InputError("sigma must lie in (0, 1/2)")
        if int(particle_count) < 2:
            raise InputError("particle count must be at least 2")

        self.mode = mode
        self.sigma = float(sigma)
        self.particle_count = int(particle_count)

    def classes(self):
        """
        Return the forbidden (radius, speed) pairs
        """
        n = float(self.particle_count)
        sigma = self.sigma

        if self.mode == "alpha-2":
            return [(6.0 * n ** (-2.0 / 9.0 - sigma), n ** (-2.0 / 9.0))]

        classes = []
        k = max(1, int(math.ceil((0.75 - sigma) / sigma - 1e-12)))
        while k * sigma <= 1.0 + 1e-12:
            classes.append((
                6.0 * n ** (-0.5 * k * sigma),
                n ** (-0.5 + k * sigma / 6.0 + 0.5 * sigma)
            ))
            k += 1
        classes.append((6.0 * n ** (-0.5 + sigma), n ** (-5.0 / 18.0)))
        return classes

    def to_dict(self):
        return {
            "mode": self.mode, "sigma": self.sigma,
            "particle_count": self.particle_count,
            "classes": [list(pair) for pair in self.classes()]
        }


def _pair_blocks(record, block_rows=16):
    """
    Yield (i, j, dq, dv) for all pairs i < j, a few rows of i at a time
    """
    states = record.states
    n = record.particle_count

    for start in range(0, n, block_rows):
        rows = np.arange(start, min(n, start + block_rows))
        i_index, j_index = np.meshgrid(rows, np.arange(n), indexing="ij")
        upper = j_index > i_index
        i_index, j_index = i_index[upper], j_index[upper]
        if len(i_index) == 0:
            continue

        yield (
            i_index, j_index,
            states[:, i_index, :3] - states[:, j_index, :3],
            states[:, i_index, 3:] - states[:, j_index, 3:]
        )


def good_bad_partition(X0, backend, spec, good_spec, cfg, record=None):
    """
    Split particles into good and bad ones

    Particle i is bad iff some j != i has a mean-field path whose closest
    approach to that of i over [0, T] lies in one of the forbidden classes.
    A lifted-flow record may be passed in to avoid recomputing it.
    """
    if record is None:
        record = lift_flow(backend, spec, X0, 0.0, cfg.horizon, cfg)

    n = record.particle_count
    classes = good_spec.classes()
    bad = np.zeros(n, dtype=bool)
    witnesses = []

    for i_index, j_index, dq, dv in _pair_blocks(record):
        t_min, distance, speed = closest_approach(record.times, dq, dv)

        forbidden = np.zeros(len(i_index), dtype=bool)
        for radius, velocity in classes:
            forbidden |= (distance <= radius) & (speed <= velocity)

        for pair in np.nonzero(forbidden)[0]:
            i, j = int(i_index[pair]), int(j_index[pair])
            bad[i] = bad[j] = True
            witnesses.append({
                "i": i, "j": j, "t_min": float(t_min[pair]),
                "distance": float(distance[pair]),
                "relative_speed": float(speed[pair])
            })

    good = [int(i) for i in np.nonzero(~bad)[0]]
    bad_list = [int(i) for i in np.nonzero(bad)[0]]
    logger.info(
        "Partitioned %d particles into %d good and %d bad",
        n, len(good), len(bad_list)
    )
    return Partition(good=good, bad=bad_list, witnesses=witnesses)


class DeviationReport(object):
    """
    Per-snapshot deviations between two records on a shared grid
    """
    __slots__ = (
        "times", "particle_deviation", "sup", "one", "running_sup",
        "running_one", "thresholds"
    )

    def __init__(self, times, particle_deviation, thresholds=None):
        self.times = np.asarray(times, dtype=float)
        self.particle_deviation = np.asarray(particle_deviation, dtype=float)
        self.sup = self.particle_deviation.max(axis=1)
        self.one = self.particle_deviation.sum(axis=1)
        self.running_sup = np.maximum.accumulate(self.sup)
        self.running_one = np.maximum.accumulate(self.one)
        self.thresholds = dict(thresholds or {})

    @property
    def max_sup(self):
        return float(self.running_sup[-1])

    @property
    def max_one(self):
        return float(self.running_one[-1])

    def exceeds(self, threshold):
        return bool(self.max_sup >= threshold)

    def first_crossing(self, values, threshold):
        return _first_crossing(self.times, values, threshold)

    def exceedances(self):
        return {
            name: self.exceeds(value)
            for name, value in self.thresholds.items()
        }

    def to_dict(self):
        return {
            "max_sup": self.max_sup,
            "max_one": self.max_one,
            "thresholds": self.thresholds,
            "exceedances": self.exceedances()
        }


def _first_crossing(times, values, threshold):
    crossed = np.nonzero(np.asarray(values) >= threshold)[0]
    if len(crossed) == 0:
        return None, None
    index = int(crossed[0])
    return float(times[index]), index


def deviation_track(A, B, thresholds=None):
    """
    Return per-snapshot |A - B|_inf and |A - B|_1 over the phase space

    'thresholds' maps names to deviation levels, for example
    {"n^(-1/2+sigma)": N**(-0.5 + sigma)}.
    """
    if A.particle_count != B.particle_count:
        raise InputError("records must have the same particle count")
    if len(A.times) != len(B.times) or not np.allclose(
            A.times, B.times, rtol=0.0,
            atol=1e-12 * max(1.0, abs(A.times[-1]))):
        raise InputError("records must share their snapshot grid")

    deviation = np.linalg.norm(A.states - B.states, axis=-1)
    return DeviationReport(A.times, deviation, thresholds)


class StoppingThresholds(object):
    """
    Threshold levels of the stopping times; unset levels are skipped
    """
    __slots__ = ("good", "bad", "dev1", "dev2", "col", "proximity")

    def __init__(
            self, good=None, bad=None, dev1=None, dev2=None, col=None,
            proximity=None):
        self.good = good
        self.bad = bad
        self.dev1 = dev1
        self.dev2 = dev2
        self.col = col
        self.proximity = proximity

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__slots__}


def thm1_thresholds(particle_count, sigma, alpha):
    """
    Good and bad deviation levels: N^(-1/2+sigma) for both when
    alpha <= 4/3; N^(-7/18+sigma) and N^(-2/9-sigma) when alpha = 2
    """
    n = float(particle_count)
    if alpha <= 4.0 / 3.0 + 1e-12:
        level = n ** (-0.5 + sigma)
        return StoppingThresholds(good=level, bad=level)
    return StoppingThresholds(
        good=n ** (-7.0 / 18.0 + sigma), bad=n ** (-2.0 / 9.0 - sigma)
    )


def thm2_thresholds(particle_count, sigma):
    """
    Levels N^(-1/2+3 sigma/5) for the sup deviation, N^(-sigma/2) for the
    1-norm deviation and N^(1/2-5 sigma/2) for the collision integral of
    pairs closer than 6N^(-1/2+sigma)
    """
    n = float(particle_count)
    return StoppingThresholds(
        dev1=n ** (-0.5 + 0.6 * sigma),
        dev2=n ** (-0.5 * sigma),
        col=n ** (0.5 - 2.5 * sigma),
        proximity=6.0 * n ** (-0.5 + sigma)
    )


def _segment_integrals(kernel, times, dq, dv, t_min):
    """
    Integrals of |f(dq(s))| over every grid segment for separations of
    shape (S, P, 3), interpolated with cubic Hermite splines

    Away from the closest approach an 8-point Gauss-Legendre rule is used.
    The segment holding t_min and its neighbours are integrated with
    'quad', with a breakpoint at t_min.
    """
    spline = CubicHermiteSpline(times, dq, dv, axis=0)
    half = 0.5 * np.diff(times)
    nodes = (
        0.5 * (times[:-1] + times[1:])[:, np.newaxis]
        + half[:, np.newaxis] * GAUSS_NODES
    )
    magnitude = force_magnitude(
        kernel, np.linalg.norm(spline(nodes), axis=-1))
    segments = np.einsum(
        "skp,k->sp", magnitude, GAUSS_WEIGHTS) * half[:, np.newaxis]

    last = len(times) - 2
    peaks = np.clip(np.searchsorted(times, t_min, side="right") - 1, 0, last)
    for pair, peak in enumerate(peaks):
        lower, upper = max(peak - 1, 0), min(peak + 1, last)
        local = CubicHermiteSpline(
            times[lower:upper + 2], dq[lower:upper + 2, pair],
            dv[lower:upper + 2, pair], axis=0
        )

        def integrand(s, local=local):
            return float(force_magnitude(kernel, np.linalg.norm(local(s))))

        for segment in range(lower, upper + 1):
            start, end = times[segment], times[segment + 1]
            points = [t_min[pair]] if start < t_min[pair] < end else None
            segments[segment, pair], _ = integrate.quad(
                integrand, start, end, points=points, limit=200,
                epsabs=1e-13, epsrel=1e-10
            )

    return segments


def collision_integrals(record, spec, proximity):
    """
    Cumulative integrals of |f(q_i - q_j)| along the record for every pair
    whose closest approach stays within 'proximity'

    The integrand follows the cubic Hermite interpolant of each separation,
    so fly-bys between two snapshots are resolved. Returns (pairs,
    cumulative integrals of shape (pairs, snapshots)).
    """
    pairs = []
    integrals = []
    times = record.times

    for i_index, j_index, dq, dv in _pair_blocks(record):
        t_min, distance, _ = closest_approach(times, dq, dv)
        flagged = np.nonzero(distance <= proximity)[0]
        if len(flagged) == 0:
            continue

        cumulative = np.zeros((len(times), len(flagged)))
        if len(times) >= 2:
            segments = _segment_integrals(
                spec, times, dq[:, flagged], dv[:, flagged], t_min[flagged]
            )
            cumulative[1:] = np.cumsum(segments, axis=0)
        pairs.append(np.stack([i_index[flagged], j_index[flagged]], axis=1))
        integrals.append(cumulative.T)

    if not pairs:
        return np.zeros((0, 2), dtype=int), np.zeros((0, len(times)))
    return np.concatenate(pairs), np.concatenate(integrals)


class StoppingTimeReport(object):
    """
    First snapshot times at which each threshold is reached; None means
    the threshold was never reached
    """
    __slots__ = (
        "tau_good", "tau_bad", "tau_dev1", "tau_dev2", "tau_col",
        "triggers", "thresholds"
    )

    def __init__(self, thresholds):
        self.tau_good = None
        self.tau_bad = None
        self.tau_dev1 = None
        self.tau_dev2 = None
        self.tau_col = None
        self.triggers = {}
        self.thresholds = thresholds

    @property
    def earliest(self):
        times = [
            value for value in (
                self.tau_good, self.tau_bad, self.tau_dev1, self.tau_dev2,
                self.tau_col)
            if value is not None
        ]
        return min(times) if times else None

    def to_dict(self):
        return {
            "tau_good": self.tau_good,
            "tau_bad": self.tau_bad,
            "tau_dev1": self.tau_dev1,
            "tau_dev2": self.tau_dev2,
            "tau_col": self.tau_col,
            "triggers": self.triggers,
            "thresholds": self.thresholds.to_dict()
        }


def stopping_times(
        report, thresholds, partition=None, records=(), spec=None):
    """
    Detect first crossings at snapshot resolution

    tau_good and tau_bad compare the largest deviation among good
    (respectively bad) particles against their levels and need a partition.
    tau_col integrates |f| over the records' close pairs; the earliest
    record to reach the level wins.
    """
    result = StoppingTimeReport(thresholds)
    deviation = report.particle_deviation

    if partition is not None:
        for name, members, level in (
                ("good", partition.good, thresholds.good),
                ("bad", partition.bad, thresholds.bad)):
            if level is None or not members:
                continue
            values = deviation[:, members]
            time, index = report.first_crossing(values.max(axis=1), level)
            if time is not None:
                setattr(result, "tau_" + name, time)
                result.triggers[name] = int(
                    members[int(np.argmax(values[index]))])

    if thresholds.dev1 is not None:
        time, index = report.first_crossing(report.sup, thresholds.dev1)
        if time is not None:
            result.tau_dev1 = time
            result.triggers["dev1"] = int(np.argmax(deviation[index]))

    if thresholds.dev2 is not None:
        time, _ = report.first_crossing(report.one, thresholds.dev2)
        result.tau_dev2 = time

    if thresholds.col is not None and records:
        if spec is None:
            raise InputError("collision stopping time needs kernel specs")
        specs = spec if isinstance(spec, (list, tuple)) else [spec] * len(
            records)

        for record, record_spec in zip(records, specs):
            pairs, cumulative = collision_integrals(
                record, record_spec, thresholds.proximity
            )
            if len(pairs) == 0:
                continue
            time, index = _first_crossing(
                record.times, cumulative.max(axis=0), thresholds.col
            )
            if time is not None and (
                    result.tau_col is None or time < result.tau_col):
                result.tau_col = time
                pair = pairs[int(np.argmax(cumulative[:, index]))]
                result.triggers["col"] = [int(pair[0]), int(pair[1])]

    return result


def collision_impact(separation, kernel, window=None):
    """
    Integrate the envelope |h(dq(s))| over a window and compare with the
    single-collision bound
    min(dr^-a, 1/(c^(a-1) dv), 1/(dr^(a-1) dv)) at the closest approach

    'kernel' is a KernelSpec (a = alpha, c = N^(-c)) or an Envelope. The
    separation is interpolated with cubic Hermite splines built from dq and
    its derivative dv.
    """
    times = separation.times
    if window is None:
        window = (times[0], times[-1])
    indices = _window_indices(times, window)
    if len(indices) < 2:
        raise RangeError("the window needs at least two grid times")

    times = times[indices]
    dq = separation.dq[indices]
    dv = separation.dv[indices]
    t_min, distance, speed = closest_approach(times, dq, dv)

    spline = CubicHermiteSpline(times, dq, dv, axis=0)

    def integrand(s):
        return float(force_magnitude(kernel, np.linalg.norm(spline(s))))

    breakpoints = [t_min] if times[0] < t_min < times[-1] else None
    integral, _ = integrate.quad(
        integrand, times[0], times[-1], points=breakpoints, limit=500,
        epsabs=1e-13, epsrel=1e-10
    )

    if isinstance(kernel, Envelope):
        exponent, cutoff = kernel.alpha_tilde, kernel.cutoff
    else:
        exponent, cutoff = kernel.alpha, kernel.cutoff_radius()

    with np.errstate(divide="ignore"):
        candidates = [
            distance ** -exponent if distance > 0.0 else math.inf,
            1.0 / (cutoff ** (exponent - 1.0) * speed)
            if cutoff > 0.0 and speed > 0.0 else math.inf,
            1.0 / (distance ** (exponent - 1.0) * speed)
            if distance > 0.0 and speed > 0.0 else math.inf
        ]
    bound = min(candidates)
    ratio = integral / bound if math.isfinite(bound) else 0.0

    return ImpactReport(
        integral=float(integral), bound=float(bound), ratio=float(ratio),
        t_min=t_min, distance=distance, relative_speed=speed
    )


class Observable(object):
    """
    Built-in test function h for the law of large numbers

    - constant: h = value
    - half-space: indicator of x[coordinate] <= threshold
    - ball: indicator of |q - center| <= radius (spatial ball)
    - impact-envelope: integral of the envelope along the straight path from
      x to a fixed reference path, over the window
    """
    __slots__ = ("kind", "params")

    def __init__(self, kind, **params):
        if kind not in OBSERVABLE_KINDS:
            raise InputError("Unknown observable '{}'".format(kind))
        self.kind = kind
        self.params = params

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        params = self.params

        if self.kind == "constant":
            return np.full(x.shape[:-1], float(params.get("value", 1.0)))
        if self.kind == "half-space":
            return (
                x[..., params.get("coordinate", 0)]
                <= params.get("threshold", 0.0)
            ).astype(float)
        if self.kind == "ball":
            center = np.asarray(params.get("center", (0.0, 0.0, 0.0)))
            distance = np.linalg.norm(x[..., :3] - center, axis=-1)
            return (distance <= params["radius"]).astype(float)

        return self._impact(x)

    def _impact(self, x, chunk=8192):
        """
        Free-flight impact of x on the reference point (q_ref, v_ref) over
        the window, by 64-node Gauss-Legendre quadrature
        """
        params = self.params
        envelope = params["envelope"]
        reference = np.asarray(params.get("reference", np.zeros(6)))
        t1, t2 = params.get("window", (0.0, 1.0))

        nodes, weights = np.polynomial.legendre.leggauss(64)
        s = t1 + 0.5 * (t2 - t1) * (nodes + 1.0)

        flat = x.reshape(-1, 6)
        result = np.empty(len(flat))
        for start in range(0, len(flat), chunk):
            block = flat[start:start + chunk]
            dq = block[:, np.newaxis, :3] - reference[:3]
            dv = block[:, np.newaxis, 3:] - reference[3:]
            path = dq + dv * s[:, np.newaxis]
            values = envelope.magnitude(np.linalg.norm(path, axis=-1))
            result[start:start + chunk] = 0.5 * (t2 - t1) * values @ weights

        return result.reshape(x.shape[:-1])

    def expectation(self, model):
        """
        Return (E[h], exact) under the model; observables without a closed
        form fall back to a large Monte-Carlo sample
        """
        params = self.params
        if self.kind == "constant":
            return float(params.get("value", 1.0)), True
        if self.kind == "half-space":
            return model.half_space_probability(
                params.get("coordinate", 0), params.get("threshold", 0.0)
            ), True
        if self.kind == "ball":
            center = np.asarray(params.get("center", (0.0, 0.0, 0.0)))
            if np.allclose(center, model.center, rtol=0.0, atol=1e-15):
                return float(model.enclosed_mass(params["radius"])), True

        logger.warning(
            "No closed-form expectation for the %s observable, using %d "
            "Monte-Carlo samples", self.kind, FALLBACK_SAMPLE_SIZE
        )
        sample = model.sample(
            derive_seed(0, "observable-expectation"), FALLBACK_SAMPLE_SIZE)
        return float(np.mean(self(sample))), False

    def to_dict(self):
        params = {
            key: (value.alpha_tilde if isinstance(value, Envelope) else value)
            for key, value in self.params.items()
        }
        return {"kind": self.kind, "params": params}


def lln_fluctuation(
        observable, model, particle_count, ensemble_size, seed,
        batch_size=256, expectation=None):
    """
    Monte-Carlo distribution of |(1/N) sum h(X_k) - E[h]| for N i.i.d.
    samples of the model

    Ensemble members are drawn in batches with their own seed streams.
    """
    n = int(particle_count)
    size = int(ensemble_size)
    if n < 1 or size < 1:
        raise InputError("particle count and ensemble size must be positive")

    exact = True
    if expectation is None:
        expectation, exact = observable.expectation(model)

    # Keep a batch under about a million phase points
    batch_size = max(1, min(int(batch_size), (1 << 20) // n))

    fluctuations = np.empty(size)
    for batch, start in enumerate(range(0, size, batch_size)):
        members = min(batch_size, size - start)
        sample = model.sample(
            derive_seed(seed, "lln", n, batch), members * n
        ).reshape(members, n, 6)
        means = observable(sample).mean(axis=1)
        fluctuations[start:start + members] = np.abs(means - expectation)

    return LlnResult(
        fluctuations=fluctuations, median=float(np.median(fluctuations)),
        expectation=float(expectation), exact=exact
    )


def bl_distance(sample_a, sample_b, projections=64, seed=0, directions=None):
    """
    Sliced Wasserstein-1 distance of two samples

    The maximum over unit directions of the exact one-dimensional W1 of the
    projected samples. Directions are drawn from 'seed'; explicit
    'directions' are used in addition. A lower bound of the full W1
    distance.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.ndim == 1:
        a = a[:, np.newaxis]
    if b.ndim == 1:
        b = b[:, np.newaxis]
    if len(a) == 0 or len(b) == 0:
        raise InputError("samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise InputError("samples must have the same dimension")

    dimension = a.shape[1]
    drawn = derive_rng((seed, "projections")).standard_normal(
        (int(projections), dimension))
    if directions is not None:
        drawn = np.concatenate(
            [np.reshape(directions, (-1, dimension)), drawn])
    norms = np.linalg.norm(drawn, axis=1)
    drawn = drawn[norms > 0.0] / norms[norms > 0.0, np.newaxis]

    if len(drawn) == 0:
        raise InputError("at least one projection direction is required")

    return max(
        wasserstein_distance(a @ direction, b @ direction)
        for direction in drawn
    )
