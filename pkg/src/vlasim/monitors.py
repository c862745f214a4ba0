import logging
import math
from collections import namedtuple

import numpy as np
from scipy import integrate

from .errors import InputError
from .kernels import force_magnitude
from .meanfield import evolve_characteristic, pullback_density

__all__ = (
    "PHASE_SETS", "DeltaCurve", "PartitionCounts", "DensityBound",
    "delta_monitor", "tau_estimate", "phase_partition_counts",
    "density_bound_monitor"
)

logger = logging.getLogger("vlasim")

PHASE_SETS = ("M1", "M2", "M3", "M4", "M5")

DeltaCurve = namedtuple(
    "DeltaCurve", ("times", "delta", "field_magnitudes", "probe_count")
)

PartitionCounts = namedtuple(
    "PartitionCounts", ("counts", "uncovered", "force_contributions")
)

DensityBound = namedtuple(
    "DensityBound",
    ("times", "estimate", "bound", "constant", "delta", "exceeded")
)


def delta_monitor(backend, spec, model, probe_count, horizon, cfg, seed):
    """
    Track Delta(t), the largest velocity change of probe characteristics

    Delta(t) = max over probes of sup_{s <= t} |v(s) - v(0)|. Finitely many
    probes only give a lower bound of the supremum over phase space. The
    field magnitude along every probe is kept for 'tau_estimate'.
    """
    if int(probe_count) < 1:
        raise InputError("at least one probe is required")

    probes = model.sample((seed, "delta-probes"), int(probe_count))
    path = evolve_characteristic(backend, spec, probes, 0.0, horizon, cfg)

    change = np.linalg.norm(
        path.states[..., 3:] - probes[np.newaxis, :, 3:], axis=-1
    )
    delta = np.maximum.accumulate(change.max(axis=1))

    magnitudes = np.stack([
        np.linalg.norm(backend.field(t, state[:, :3], spec), axis=-1)
        for t, state in zip(path.times, path.states)
    ])

    logger.info(
        "Delta(T) = %g over %d probe characteristics (a lower bound)",
        delta[-1], probe_count
    )
    return DeltaCurve(
        times=path.times, delta=delta, field_magnitudes=magnitudes,
        probe_count=int(probe_count)
    )


def tau_estimate(curve, t):
    """
    Return tau(t), the latest grid time s <= t from which the field
    accumulated along some probe over [s, t] still reaches Delta(t)/2

    Returns 0 when no start time accumulates that much and t when
    Delta(t) = 0.
    """
    times = curve.times
    tolerance = 1e-12 * max(1.0, abs(times[-1]))
    if t < times[0] - tolerance or t > times[-1] + tolerance:
        raise InputError("t lies outside the monitored interval")

    end = int(np.searchsorted(times, t + tolerance, side="right")) - 1
    delta = curve.delta[end]
    if delta <= 0.0:
        return float(t)

    # Integral over [s, t] for every grid s <= t, per probe
    forward = integrate.cumulative_trapezoid(
        curve.field_magnitudes[:end + 1], times[:end + 1], axis=0, initial=0.0
    )
    accumulated = (forward[-1] - forward).max(axis=1)

    reached = np.nonzero(accumulated >= 0.5 * delta * (1.0 - 1e-12))[0]
    if len(reached) == 0:
        return 0.0
    return float(times[reached[-1]])


def phase_partition_counts(z, sample, delta_t, k1, spec=None):
    """
    Count sample points in the five phase-space sets around z

    With dq = |q' - q_z| and dv = |v' - v_z|:
    M1: dq <= K1 D^-2; M2: dq >= D^-1/2;
    M3: K1 D^-2 <= dq <= min(D^-1/2, K1 D^(2/3) dv^(-8/3));
    M4: K1 D^-2 <= dq <= D^-1/2 and dv >= 2D; M5: the rest.
    With a kernel spec, the mean of |f(q' - q_z)| over the points of each
    set estimates its share of the force.
    """
    if not delta_t > 0.0 or not k1 > 0.0:
        raise InputError("Delta(t) and K1 must be positive")

    z = np.asarray(z, dtype=float)
    sample = np.asarray(sample, dtype=float)
    dq = np.linalg.norm(sample[:, :3] - z[:3], axis=1)
    dv = np.linalg.norm(sample[:, 3:] - z[3:], axis=1)

    inner = k1 * delta_t ** -2.0
    outer = delta_t ** -0.5
    with np.errstate(divide="ignore"):
        speed_limit = k1 * delta_t ** (2.0 / 3.0) * dv ** (-8.0 / 3.0)

    members = {
        "M1": dq <= inner,
        "M2": dq >= outer,
        "M3": (dq >= inner) & (dq <= np.minimum(outer, speed_limit)),
        "M4": (dq >= inner) & (dq <= outer) & (dv >= 2.0 * delta_t)
    }
    covered = members["M1"] | members["M2"] | members["M3"] | members["M4"]
    members["M5"] = ~covered

    counts = {name: int(np.count_nonzero(members[name]))
              for name in PHASE_SETS}
    uncovered = int(np.count_nonzero(
        ~(covered | members["M5"])
    ))

    contributions = {}
    if spec is not None:
        magnitude = force_magnitude(spec, dq)
        contributions = {
            name: float(np.sum(magnitude[members[name]]) / len(sample))
            for name in PHASE_SETS
        }

    return PartitionCounts(
        counts=counts, uncovered=uncovered,
        force_contributions=contributions
    )


def _velocity_grid(model, delta, points):
    half_width = 6.0 * model.velocity_scale + delta
    axis = np.linspace(-half_width, half_width, points)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3), axis


def _bound_profile(delta, decay_exponent):
    """
    Integral over v of (1 + max(0, |v| - Delta))^-(3+delta')
    """
    shell, _ = integrate.quad(
        lambda u: (u + delta) ** 2 * (1.0 + u) ** -(3.0 + decay_exponent),
        0.0, math.inf
    )
    return 4.0 * math.pi * (delta ** 3 / 3.0 + shell)


def density_bound_monitor(
        backend, spec, model, curve, cfg, spatial_probes=None,
        velocity_points=21, time_stride=1):
    """
    Estimate the spatial sup norm of k_t next to the Delta-derived bound

    The spatial density at each probe is the trapezoid quadrature of the
    pullback density over a velocity grid wide enough to hold the
    transported velocities. The bound C * integral of
    (1 + max(0, |v| - Delta(t)))^-(3+delta) dv has C fitted to the estimate
    at the first monitored time; later times where the estimate exceeds the
    bound are flagged in 'exceeded'.
    """
    if spatial_probes is None:
        offsets = 0.5 * model.spatial_scale * np.concatenate(
            [np.zeros((1, 3)), np.eye(3), -np.eye(3)])
        spatial_probes = model.center + offsets
    spatial_probes = np.asarray(spatial_probes, dtype=float)

    indices = np.arange(0, len(curve.times), int(time_stride))
    if indices[-1] != len(curve.times) - 1:
        indices = np.append(indices, len(curve.times) - 1)

    times, estimates, profiles = [], [], []
    for index in indices:
        t = float(curve.times[index])
        delta = float(curve.delta[index])
        velocities, axis = _velocity_grid(model, delta, velocity_points)

        best = 0.0
        for q in spatial_probes:
            points = np.concatenate(
                [np.broadcast_to(q, velocities.shape), velocities], axis=1)
            values = pullback_density(backend, spec, model, t, points, cfg)
            values = values.reshape((velocity_points,) * 3)
            spatial = integrate.trapezoid(
                integrate.trapezoid(
                    integrate.trapezoid(values, axis, axis=2), axis, axis=1),
                axis, axis=0)
            best = max(best, float(spatial))

        times.append(t)
        estimates.append(best)
        profiles.append(_bound_profile(delta, model.decay_exponent))

    estimates = np.array(estimates)
    profiles = np.array(profiles)
    constant = float(estimates[0] / profiles[0])
    bound = constant * profiles
    exceeded = estimates > bound * (1.0 + 1e-9)
    if np.any(exceeded):
        logger.warning(
            "Spatial density exceeds its Delta bound at %d of %d times, "
            "first at t = %g", np.count_nonzero(exceeded), len(times),
            times[int(np.argmax(exceeded))]
        )

    return DensityBound(
        times=np.array(times), estimate=estimates, bound=bound,
        constant=constant, delta=curve.delta[indices], exceeded=exceeded
    )
