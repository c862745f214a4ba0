import logging
import math
from collections import namedtuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.stats import linregress

from .dynamics import TrajectoryRecord
from .errors import ConfigurationError, InputError, \
    IntegrationBlowupError, RangeError, UnsupportedOperationError
from .kernels import cutoff_moment
from .util import derive_seed

__all__ = (
    "BACKEND_KINDS", "CharacteristicPath", "FlowProbe", "MeanFieldBackend",
    "ZeroFieldBackend", "ConstantFieldBackend", "RadialExactBackend",
    "EnsembleKdeBackend", "build_backend", "mean_field_force",
    "evolve_characteristic", "lift_flow", "evolve_vlasov",
    "pullback_density", "flow_lipschitz_probe", "free_flight_defect",
    "jacobian_determinant"
)

logger = logging.getLogger("vlasim")

BACKEND_KINDS = (
    "ensemble-kde", "radial-exact", "zero-field", "constant-field"
)

# Probe rows evaluated against the reference ensemble at once
FIELD_BLOCK_ROWS = 128

CharacteristicPath = namedtuple("CharacteristicPath", ("times", "states"))

FlowProbe = namedtuple(
    "FlowProbe", ("constant", "max_ratio", "times", "ratios")
)


class MeanFieldBackend(object):
    """
    Source of the mean field f * k~_t(q) seen by the characteristics

    'field' takes the test kernel separately from the dynamics that produced
    the backend, so regularized and limit kernels can share one reference
    evolution.
    """
    kind = None
    __slots__ = ()

    def time_range(self):
        """
        Return the (start, end) interval covered by the backend
        """
        return -math.inf, math.inf

    def check_coverage(self, t0, t1):
        start, end = self.time_range()
        tolerance = 1e-12 * max(1.0, abs(start), abs(end)) \
            if math.isfinite(end) else 0.0
        if min(t0, t1) < start - tolerance or max(t0, t1) > end + tolerance:
            raise RangeError(
                "Backend covers [{}, {}], requested [{}, {}]".format(
                    start, end, min(t0, t1), max(t0, t1))
            )

    def field(self, t, q, spec):
        raise NotImplementedError

    def density_gradient(self, t, q):
        return np.zeros_like(np.asarray(q, dtype=float))

    def to_dict(self):
        return {"kind": self.kind}


class ZeroFieldBackend(MeanFieldBackend):
    """
    Vanishing field; characteristics are free flights
    """
    kind = "zero-field"
    __slots__ = ()

    def field(self, t, q, spec):
        return np.zeros_like(np.asarray(q, dtype=float))


class ConstantFieldBackend(MeanFieldBackend):
    """
    Spatially and temporally constant external field
    """
    kind = "constant-field"
    __slots__ = ("vector",)

    def __init__(self, vector):
        vector = np.array(vector, dtype=float)
        if vector.shape != (3,) or not np.all(np.isfinite(vector)):
            raise InputError("constant field must be a finite 3-vector")
        vector.setflags(write=False)
        self.vector = vector

    def field(self, t, q, spec):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(self.vector, q.shape).copy()

    def to_dict(self):
        return {"kind": self.kind, "field": self.vector.tolist()}


def _check_coulomb(spec):
    if spec.alpha != 2.0:
        raise UnsupportedOperationError(
            "radial-exact fields need alpha = 2, got {}".format(spec.alpha)
        )


class RadialExactBackend(MeanFieldBackend):
    """
    Shell-theorem field a*q*m(|q|, t)/|q|^3 of a spherically symmetric
    spatial density

    m(r, 0) is the analytic enclosed mass of the model. For t > 0 the profile
    comes from a reference ensemble evolved under its own shell field, with
    the enclosed mass of a reference particle taken from its radial rank.
    A frozen backend keeps the t = 0 profile at all times.
    """
    kind = "radial-exact"
    __slots__ = (
        "model", "frozen", "times", "grid", "profiles", "density_slopes",
        "reference_count"
    )

    def __init__(
            self, model, spec, horizon=1.0, frozen=False,
            reference_count=4096, reference_steps=256, radial_bins=256,
            seed=0):
        _check_coulomb(spec)
        if not model.is_spherically_symmetric:
            raise ConfigurationError(
                "radial-exact needs a spherically symmetric spatial density"
            )

        self.model = model
        self.frozen = bool(frozen)
        self.reference_count = int(reference_count)

        if self.frozen:
            self.times = None
            self.grid = None
            self.profiles = None
            self.density_slopes = None
            return

        self._evolve_profile(
            spec, horizon, int(reference_steps), int(radial_bins), seed
        )

    def _evolve_profile(self, spec, horizon, steps, bins, seed):
        n = self.reference_count
        sample = self.model.sample(derive_seed(seed, "reference"), n)
        q = sample[:, :3] - self.model.center
        v = sample[:, 3:].copy()
        dt = horizon / steps

        def accelerate(q):
            r = np.linalg.norm(q, axis=1)
            ranks = np.empty(n)
            ranks[np.argsort(r, kind="stable")] = np.arange(n)
            mass = (ranks + 0.5) / n
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(r > 0.0, mass / r ** 3, 0.0)
            return spec.sign * scale[:, np.newaxis] * q

        logger.info(
            "Evolving radial reference profile of %d samples over %d steps",
            n, steps
        )

        radii = [np.sort(np.linalg.norm(q, axis=1))]
        acc = accelerate(q)
        for k in range(steps):
            v_half = v + 0.5 * dt * acc
            q = q + dt * v_half
            acc = accelerate(q)
            v = v_half + 0.5 * dt * acc
            if not np.all(np.isfinite(q)):
                raise IntegrationBlowupError(
                    "Radial reference profile diverged", time=(k + 1) * dt
                )
            radii.append(np.sort(np.linalg.norm(q, axis=1)))

        r_max = max(r[-1] for r in radii)
        self.times = np.linspace(0.0, horizon, steps + 1)
        self.grid = np.linspace(0.0, r_max, bins + 1)
        self.profiles = np.stack([
            np.searchsorted(r, self.grid, side="right") / float(n)
            for r in radii
        ])
        self.profiles[:, -1] = 1.0

        shell_volumes = 4.0 * math.pi / 3.0 * np.diff(self.grid ** 3)
        midpoints = 0.5 * (self.grid[1:] + self.grid[:-1])
        densities = np.diff(self.profiles, axis=1) / shell_volumes
        self.density_slopes = np.gradient(densities, midpoints, axis=1)

    def time_range(self):
        if self.frozen:
            return -math.inf, math.inf
        return float(self.times[0]), float(self.times[-1])

    def _interpolate(self, t, r, tables, grid, analytic):
        """
        Interpolate a radial table linearly in r and t; the first snapshot is
        replaced by the analytic t = 0 value
        """
        if self.frozen or t <= self.times[0]:
            return analytic(r)

        t = min(t, self.times[-1])
        index = int(np.searchsorted(self.times, t, side="left"))
        index = max(1, index)
        t_lo, t_hi = self.times[index - 1], self.times[index]
        weight = (t - t_lo) / (t_hi - t_lo)

        if index == 1:
            lower = analytic(r)
        else:
            lower = np.interp(r, grid, tables[index - 1], right=0.0)
        upper = np.interp(r, grid, tables[index], right=0.0)
        return (1.0 - weight) * lower + weight * upper

    def enclosed_mass(self, t, r):
        r = np.asarray(r, dtype=float)
        if self.frozen or t <= self.times[0]:
            return self.model.enclosed_mass(r)

        grid = self.grid
        profiles = self.profiles

        def analytic(r):
            return self.model.enclosed_mass(r)

        # Beyond the grid every sample is enclosed
        mass = self._interpolate(t, r, profiles, grid, analytic)
        return np.where(r >= grid[-1], 1.0, mass)

    def density_gradient(self, t, q):
        q = np.asarray(q, dtype=float)
        if self.frozen or t <= self.times[0]:
            return self.model.spatial_gradient(q)

        d = q - self.model.center
        r = np.linalg.norm(d, axis=-1)
        midpoints = 0.5 * (self.grid[1:] + self.grid[:-1])

        def analytic(r):
            # Radial slope of the t = 0 density
            probe = np.zeros(np.shape(r) + (3,))
            probe[..., 0] = r
            return self.model.spatial_gradient(
                probe + self.model.center)[..., 0]

        slope = self._interpolate(
            t, r, self.density_slopes, midpoints, analytic
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(r[..., np.newaxis] > 0.0,
                            d / r[..., np.newaxis], 0.0)
        return slope[..., np.newaxis] * unit

    def field(self, t, q, spec):
        _check_coulomb(spec)
        q = np.asarray(q, dtype=float)
        d = q - self.model.center
        r = np.linalg.norm(d, axis=-1)

        mass = self.enclosed_mass(t, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0.0, mass / r ** 3, 0.0)
        field = spec.sign * scale[..., np.newaxis] * d

        if spec.is_regularized:
            field = field + cutoff_moment(spec) * self.density_gradient(t, q)
        return field

    def to_dict(self):
        return {
            "kind": self.kind,
            "frozen": self.frozen,
            "reference_count": self.reference_count,
            "radial_bins": None if self.grid is None else len(self.grid) - 1
        }


def _softened_field(q, references, smoothing, alpha, sign):
    """
    (1/M) * sum_j a*d_j*(|d_j|^2 + eps^2)^(-(alpha+1)/2), d_j = q - q_j
    """
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 3)
    result = np.empty_like(flat)
    eps2 = smoothing ** 2

    for start in range(0, len(flat), FIELD_BLOCK_ROWS):
        d = flat[start:start + FIELD_BLOCK_ROWS, np.newaxis, :] - references
        r2 = np.einsum("ijk,ijk->ij", d, d)
        scale = (r2 + eps2) ** (-0.5 * (alpha + 1.0))
        result[start:start + FIELD_BLOCK_ROWS] = np.einsum(
            "ij,ijk->ik", scale, d) / len(references)

    return sign * result.reshape(q.shape)


def _plummer_gradient(q, references, smoothing):
    """
    Gradient of the Plummer kernel density estimate of the references
    """
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 3)
    result = np.empty_like(flat)
    eps2 = smoothing ** 2
    prefactor = -15.0 / (4.0 * math.pi * smoothing ** 5)

    for start in range(0, len(flat), FIELD_BLOCK_ROWS):
        d = flat[start:start + FIELD_BLOCK_ROWS, np.newaxis, :] - references
        r2 = np.einsum("ijk,ijk->ij", d, d)
        scale = (1.0 + r2 / eps2) ** -3.5
        result[start:start + FIELD_BLOCK_ROWS] = np.einsum(
            "ij,ijk->ik", scale, d) / len(references)

    return prefactor * result.reshape(q.shape)


def _plummer_density(q, references, smoothing):
    q = np.asarray(q, dtype=float)
    flat = q.reshape(-1, 3)
    result = np.empty(len(flat))
    prefactor = 3.0 / (4.0 * math.pi * smoothing ** 3)

    for start in range(0, len(flat), FIELD_BLOCK_ROWS):
        d = flat[start:start + FIELD_BLOCK_ROWS, np.newaxis, :] - references
        r2 = np.einsum("ijk,ijk->ij", d, d)
        result[start:start + FIELD_BLOCK_ROWS] = (
            (1.0 + r2 / smoothing ** 2) ** -2.5).mean(axis=1)

    return prefactor * result.reshape(q.shape[:-1])


class EnsembleKdeBackend(MeanFieldBackend):
    """
    Field of a self-consistently evolved reference ensemble, softened with
    a Plummer kernel of length 'smoothing'

    Reference positions between snapshots are cubic Hermite interpolants of
    the stored positions and velocities.
    """
    kind = "ensemble-kde"
    __slots__ = ("times", "positions", "velocities", "smoothing", "spline")

    def __init__(self, times, positions, velocities, smoothing):
        times = np.asarray(times, dtype=float)
        positions = np.asarray(positions, dtype=float)
        velocities = np.asarray(velocities, dtype=float)

        if len(times) < 2:
            raise InputError("ensemble-kde needs at least two snapshots")
        if positions.shape != velocities.shape or positions.ndim != 3:
            raise InputError("reference snapshots must have shape (S, M, 3)")
        if not smoothing > 0.0:
            raise InputError("smoothing length must be positive")

        self.times = times
        self.positions = positions
        self.velocities = velocities
        self.smoothing = float(smoothing)
        self.spline = CubicHermiteSpline(
            times, positions, velocities, axis=0
        )

    @property
    def reference_count(self):
        return self.positions.shape[1]

    def time_range(self):
        return float(self.times[0]), float(self.times[-1])

    def references(self, t):
        start, end = self.time_range()
        return self.spline(min(max(t, start), end))

    def spatial_density(self, t, q):
        return _plummer_density(q, self.references(t), self.smoothing)

    def density_gradient(self, t, q):
        return _plummer_gradient(q, self.references(t), self.smoothing)

    def field(self, t, q, spec):
        references = self.references(t)
        field = _softened_field(
            q, references, self.smoothing, spec.alpha, spec.sign
        )
        if spec.is_regularized:
            field = field + cutoff_moment(spec) * _plummer_gradient(
                q, references, self.smoothing
            )
        return field

    def total_momentum(self, index=-1):
        return self.velocities[index].sum(axis=0) / self.reference_count

    def to_dict(self):
        return {
            "kind": self.kind,
            "reference_count": self.reference_count,
            "smoothing": self.smoothing,
            "snapshot_count": len(self.times)
        }


def evolve_vlasov(
        model, spec, horizon, reference_count=4096, smoothing=None,
        reference_steps=256, snapshot_count=64, seed=0):
    """
    Evolve M reference samples of k_0 under their own softened field and
    return the resulting EnsembleKdeBackend

    The reference ensemble draws from the "reference" stream of 'seed', so
    test particles drawn from other streams stay independent of it.
    """
    if int(reference_count) < 2:
        raise InputError("reference ensemble needs at least two samples")
    reference_count = int(reference_count)
    if reference_count < 1000:
        logger.warning(
            "Reference ensemble of %d samples is small, the field estimate "
            "is noisy", reference_count
        )
    if smoothing is None:
        smoothing = reference_count ** (-1.0 / 6.0)

    steps = max(1, int(reference_steps))
    stride = max(1, int(math.ceil(steps / float(snapshot_count))))
    steps = int(math.ceil(steps / float(stride))) * stride
    dt = horizon / steps

    sample = model.sample(derive_seed(seed, "reference"), reference_count)
    q, v = sample[:, :3].copy(), sample[:, 3:].copy()

    def accelerate(q):
        acc = _softened_field(q, q, smoothing, spec.alpha, spec.sign)
        if spec.is_regularized:
            acc = acc + cutoff_moment(spec) * _plummer_gradient(
                q, q, smoothing)
        return acc

    logger.info(
        "Evolving %d reference samples over %d steps (smoothing %g)",
        reference_count, steps, smoothing
    )

    positions, velocities = [q.copy()], [v.copy()]
    acc = accelerate(q)
    for k in range(steps):
        v_half = v + 0.5 * dt * acc
        q = q + dt * v_half
        acc = accelerate(q)
        v = v_half + 0.5 * dt * acc

        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise IntegrationBlowupError(
                "Reference ensemble diverged", time=(k + 1) * dt
            )
        if (k + 1) % stride == 0:
            positions.append(q.copy())
            velocities.append(v.copy())

    times = np.linspace(0.0, horizon, steps // stride + 1)
    return EnsembleKdeBackend(
        times=times, positions=np.stack(positions),
        velocities=np.stack(velocities), smoothing=smoothing
    )


def build_backend(kind, model, spec, horizon, options=None, seed=0):
    """
    Build a backend from the 'backend' section of a run config
    """
    options = dict(options or {})

    if kind == "zero-field":
        return ZeroFieldBackend()
    if kind == "constant-field":
        return ConstantFieldBackend(options.get("field", (0.0, 0.0, 0.0)))
    if kind == "radial-exact":
        return RadialExactBackend(
            model=model, spec=spec, horizon=horizon,
            frozen=options.get("frozen", False),
            reference_count=options.get("reference_count") or 4096,
            reference_steps=options.get("reference_steps") or 256,
            radial_bins=options.get("radial_bins") or 256,
            seed=seed
        )
    if kind == "ensemble-kde":
        if options.get("frozen"):
            raise ConfigurationError(
                "Only radial-exact backends can be frozen"
            )
        return evolve_vlasov(
            model=model, spec=spec, horizon=horizon,
            reference_count=options.get("reference_count") or 4096,
            smoothing=options.get("smoothing"),
            reference_steps=options.get("reference_steps") or 256,
            seed=seed
        )

    raise ConfigurationError("Unknown backend kind '{}'".format(kind))


def mean_field_force(backend, spec, t, q):
    """
    Return the mean-field force at position(s) q and time t
    """
    backend.check_coverage(t, t)
    return backend.field(t, np.asarray(q, dtype=float), spec)


def _characteristic_step(backend, spec, integrator):
    def derivative(t, x):
        return np.concatenate(
            [x[..., 3:], backend.field(t, x[..., :3], spec)], axis=-1
        )

    def rk4(t, x, h):
        k1 = derivative(t, x)
        k2 = derivative(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = derivative(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = derivative(t + h, x + h * k3)
        return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def verlet(t, x, h):
        q, v = x[..., :3], x[..., 3:]
        v_half = v + 0.5 * h * backend.field(t, q, spec)
        q = q + h * v_half
        v = v_half + 0.5 * h * backend.field(t + h, q, spec)
        return np.concatenate([q, v], axis=-1)

    return rk4 if integrator == "rk4" else verlet


def evolve_characteristic(backend, spec, x0, t0, t1, cfg, times=None):
    """
    Integrate q' = v, v' = f * k~_t(q) from t0 to t1 (t1 < t0 integrates
    backwards)

    'x0' is one phase point (6,) or a batch (P, 6). Output times default to
    the integration grid; when 'times' is given it must run monotonically
    from t0 to t1 and the integrator takes at most the characteristic step
    between consecutive output times.

    :raises RangeError: if the backend does not cover the interval
    """
    x0 = np.array(x0, dtype=float)
    if x0.shape[-1] != 6 or x0.ndim not in (1, 2):
        raise InputError("phase points must have shape (6,) or (P, 6)")
    if not np.all(np.isfinite(x0)):
        raise InputError("phase points must be finite")

    backend.check_coverage(t0, t1)
    h_max = cfg.resolved_characteristic_step()

    if times is None:
        steps = int(math.ceil(abs(t1 - t0) / h_max - 1e-9))
        times = np.linspace(t0, t1, steps + 1) if steps else np.array([t0])
    else:
        times = np.array(times, dtype=float)
        tolerance = 1e-12 * max(1.0, abs(t0), abs(t1))
        if abs(times[0] - t0) > tolerance or abs(times[-1] - t1) > tolerance:
            raise InputError("output times must start at t0 and end at t1")
        times[0], times[-1] = t0, t1

    step = _characteristic_step(
        backend, spec, cfg.characteristic_integrator)

    states = [x0]
    x = x0
    for t_start, t_end in zip(times[:-1], times[1:]):
        substeps = max(1, int(math.ceil(abs(t_end - t_start) / h_max - 1e-9)))
        h = (t_end - t_start) / substeps
        for k in range(substeps):
            x = step(t_start + k * h, x, h)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowupError(
                "Characteristic diverged at t={:g}".format(t_end), time=t_end
            )
        states.append(x)

    return CharacteristicPath(times=np.array(times), states=np.stack(states))


def lift_flow(
        backend, spec, X0, t0, t1, cfg, times=None, seed=0,
        config_digest=None):
    """
    Apply the characteristic flow to every particle of X0

    The snapshot grid defaults to the microscopic schedule of 'cfg' over
    [t0, t1], so lifted and interacting records can be compared pointwise.
    """
    X0 = np.asarray(X0, dtype=float)
    if X0.ndim != 2 or X0.shape[1] != 6:
        raise InputError("a configuration must have shape (N, 6)")

    if times is None:
        if t1 > t0:
            times = cfg.replace(horizon=t1 - t0).schedule(spec, t0=t0)[3]
        elif t1 == t0:
            times = np.array([t0])

    path = evolve_characteristic(backend, spec, X0, t0, t1, cfg, times=times)
    states = path.states
    times = path.times
    if times[0] > times[-1]:
        times, states = times[::-1], states[::-1]

    return TrajectoryRecord(
        times=times, states=states, spec=spec, seed=seed,
        config_digest=config_digest,
        diagnostics={"backend": backend.to_dict(), "lifted": True}
    )


def pullback_density(backend, spec, model, t, x, cfg):
    """
    Return k_t(x) = k_0(phi_{0,t}(x)) by integrating the characteristic
    through x back to time 0
    """
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return model.evaluate(x)
    path = evolve_characteristic(backend, spec, x, t, 0.0, cfg)
    return model.evaluate(path.states[-1])


def flow_lipschitz_probe(backend, spec, X, Y, horizon, cfg):
    """
    Fit C with |phi_t(X) - phi_t(Y)| <= |X - Y| e^(C t) over probe pairs

    Returns the fitted constant, the largest ratio and the per-time maxima of
    the ratio.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    path = evolve_characteristic(
        backend, spec, np.concatenate([X, Y]), 0.0, horizon, cfg
    )
    n = len(X)
    gaps = np.linalg.norm(path.states[:, :n] - path.states[:, n:], axis=-1)
    ratios = (gaps / np.linalg.norm(X - Y, axis=-1)).max(axis=1)

    times = path.times
    positive = times > 0.0
    constant = float(np.max(
        np.maximum(np.log(ratios[positive]), 0.0) / times[positive]
    )) if np.any(positive) else 0.0

    return FlowProbe(
        constant=constant, max_ratio=float(ratios.max()), times=times,
        ratios=ratios
    )


def free_flight_defect(backend, spec, X, Y, lags, cfg, t0=0.0):
    """
    Measure how far pair separations deviate from free flight

    For each lag s the defect
    |dq(s) - dq(0) - dv(0) s| / (|dq(0)| + |dv(0)| s) is maximized over the
    pairs. Returns (defects, log-log slope in s).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    lags = np.sort(np.asarray(lags, dtype=float))
    if np.any(lags <= 0.0):
        raise InputError("lags must be positive")

    times = np.concatenate([[t0], t0 + lags])
    path = evolve_characteristic(
        backend, spec, np.concatenate([X, Y]), t0, times[-1], cfg,
        times=times
    )
    n = len(X)
    dq0 = X[:, :3] - Y[:, :3]
    dv0 = X[:, 3:] - Y[:, 3:]

    defects = []
    for lag, state in zip(lags, path.states[1:]):
        dq = state[:n, :3] - state[n:, :3]
        numerator = np.linalg.norm(dq - dq0 - dv0 * lag, axis=-1)
        denominator = np.linalg.norm(dq0, axis=-1) + np.linalg.norm(
            dv0, axis=-1) * lag
        defects.append(float(np.max(numerator / denominator)))
    defects = np.array(defects)

    positive = defects > 0.0
    if np.count_nonzero(positive) < 2:
        return defects, math.nan
    fit = linregress(np.log(lags[positive]), np.log(defects[positive]))
    return defects, float(fit.slope)


def jacobian_determinant(backend, spec, x, t0, t1, cfg, h=1e-5):
    """
    Central finite-difference Jacobian determinant of x -> phi_{t1,t0}(x)
    """
    x = np.asarray(x, dtype=float)
    offsets = h * np.eye(6)
    probes = np.concatenate([x + offsets, x - offsets])

    path = evolve_characteristic(backend, spec, probes, t0, t1, cfg)
    final = path.states[-1]
    jacobian = (final[:6] - final[6:]).T / (2.0 * h)

    return float(np.linalg.det(jacobian))
