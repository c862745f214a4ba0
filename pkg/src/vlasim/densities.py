import logging
import math
from collections import namedtuple

import numpy as np
from scipy import special, stats

from .errors import InputError
from .util import derive_rng

__all__ = (
    "DensityModel", "LipschitzSetSpec", "AuditReport", "FAMILIES",
    "audit_assumptions", "fit_decay_constant", "lipschitz_ratios",
    "in_lipschitz_set"
)

logger = logging.getLogger("vlasim")

FAMILIES = ("gaussian-product", "heavy-tail-velocity", "uniform-ball-spatial")

# Radii of the deterministic audit sweep, in units of |x|
AUDIT_SWEEP_RADII = np.logspace(-2.0, 8.0, 101)

AuditReport = namedtuple(
    "AuditReport", (
        "max_ratio_decay", "max_ratio_grad_decay", "kinetic_energy_estimate",
        "tail_growth", "compliant", "point_count"
    )
)


class _BallCoordinate(stats.rv_continuous):
    """
    One coordinate of a point uniformly distributed on the unit ball in R^3
    """
    def _pdf(self, x):
        return 0.75 * (1.0 - x * x)

    def _cdf(self, x):
        return 0.5 + 0.75 * x - 0.25 * x ** 3


_ball_coordinate = _BallCoordinate(a=-1.0, b=1.0, name="ball_coordinate")


class DensityModel(object):
    """
    Initial phase-space density k_0(q, v) = rho(q) * g(v)

    Spatial factors are a Gaussian or a uniform ball, both isotropic about
    'center'. Velocity factors are a Gaussian or the heavy-tailed law
    g(v) ~ (1 + |v|^2/s^2)^(-(4+delta')/2), a multivariate Student t with
    1 + delta' degrees of freedom.
    """
    __slots__ = (
        "family", "center", "spatial_scale", "velocity_scale",
        "tail_exponent", "decay_exponent", "decay_constant",
        "spatial_normalization", "velocity_normalization"
    )

    def __init__(
            self, family="gaussian-product", center=(0.0, 0.0, 0.0),
            spatial_scale=1.0, velocity_scale=1.0, tail_exponent=None,
            decay_exponent=0.5, decay_constant=None):
        if family not in FAMILIES:
            raise InputError(
                "Unknown density family '{}', expected one of {}".format(
                    family, ", ".join(FAMILIES))
            )
        center = np.array(center, dtype=float)
        if center.shape != (3,) or not np.all(np.isfinite(center)):
            raise InputError("density center must be a finite 3-vector")
        if not spatial_scale > 0.0 or not velocity_scale > 0.0:
            raise InputError("density scales must be positive")
        if not decay_exponent > 0.0:
            raise InputError("decay exponent must be positive")

        if family == "heavy-tail-velocity":
            if tail_exponent is None or not tail_exponent > 0.0:
                raise InputError(
                    "heavy-tail-velocity requires a positive tail exponent"
                )
            tail_exponent = float(tail_exponent)
        else:
            tail_exponent = None

        center.setflags(write=False)

        self.family = family
        self.center = center
        self.spatial_scale = float(spatial_scale)
        self.velocity_scale = float(velocity_scale)
        self.tail_exponent = tail_exponent
        self.decay_exponent = float(decay_exponent)

        if family == "uniform-ball-spatial":
            self.spatial_normalization = 3.0 / (
                4.0 * math.pi * self.spatial_scale ** 3
            )
        else:
            self.spatial_normalization = (
                2.0 * math.pi * self.spatial_scale ** 2) ** -1.5

        if family == "heavy-tail-velocity":
            dof = self.degrees_of_freedom
            self.velocity_normalization = math.exp(
                special.gammaln(0.5 * (dof + 3.0))
                - special.gammaln(0.5 * dof)
            ) / (math.pi ** 1.5 * self.velocity_scale ** 3)
        else:
            self.velocity_normalization = (
                2.0 * math.pi * self.velocity_scale ** 2) ** -1.5

        if decay_constant is None:
            self.decay_constant = None
            self.decay_constant = fit_decay_constant(self)
            logger.info(
                "Fitted decay constant C0=%g for %s density",
                self.decay_constant, family
            )
        else:
            if not decay_constant > 0.0:
                raise InputError("decay constant must be positive")
            self.decay_constant = float(decay_constant)

    @classmethod
    def from_dict(cls, data):
        """
        Create a DensityModel from the 'density' section of a run config
        """
        return cls(
            family=data.get("family", "gaussian-product"),
            center=data.get("center", (0.0, 0.0, 0.0)),
            spatial_scale=data.get("spatial_scale", 1.0),
            velocity_scale=data.get("velocity_scale", 1.0),
            tail_exponent=data.get("tail_exponent"),
            decay_exponent=data.get("decay_exponent", 0.5),
            decay_constant=data.get("decay_constant")
        )

    def to_dict(self):
        return {
            "family": self.family,
            "center": [float(x) for x in self.center],
            "spatial_scale": self.spatial_scale,
            "velocity_scale": self.velocity_scale,
            "tail_exponent": self.tail_exponent,
            "decay_exponent": self.decay_exponent,
            "decay_constant": self.decay_constant
        }

    @property
    def degrees_of_freedom(self):
        """
        Degrees of freedom of the heavy-tailed velocity law
        """
        if self.tail_exponent is None:
            return math.inf
        return 1.0 + self.tail_exponent

    @property
    def finite_kinetic_energy(self):
        return self.degrees_of_freedom > 2.0

    @property
    def is_spherically_symmetric(self):
        # Every built-in spatial factor is isotropic about 'center'
        return True

    @property
    def is_continuous(self):
        return self.family != "uniform-ball-spatial"

    @property
    def normalization(self):
        return self.spatial_normalization * self.velocity_normalization

    def spatial_density(self, q):
        """
        Spatial density rho(q) = integral of k_0(q, v) over v
        """
        d = np.asarray(q, dtype=float) - self.center
        r2 = np.einsum("...i,...i->...", d, d)

        if self.family == "uniform-ball-spatial":
            inside = r2 <= self.spatial_scale ** 2
            return np.where(inside, self.spatial_normalization, 0.0)

        return self.spatial_normalization * np.exp(
            -0.5 * r2 / self.spatial_scale ** 2
        )

    def spatial_gradient(self, q):
        """
        Gradient of rho. The uniform ball has zero gradient off its boundary
        sphere.
        """
        d = np.asarray(q, dtype=float) - self.center
        if self.family == "uniform-ball-spatial":
            return np.zeros_like(d)

        return -d / self.spatial_scale ** 2 * self.spatial_density(
            q)[..., np.newaxis]

    def velocity_density(self, v):
        v = np.asarray(v, dtype=float)
        w = np.einsum("...i,...i->...", v, v) / self.velocity_scale ** 2

        if self.family == "heavy-tail-velocity":
            return self.velocity_normalization * (1.0 + w) ** (
                -0.5 * (self.degrees_of_freedom + 3.0)
            )

        return self.velocity_normalization * np.exp(-0.5 * w)

    def velocity_gradient(self, v):
        v = np.asarray(v, dtype=float)
        scale2 = self.velocity_scale ** 2
        density = self.velocity_density(v)[..., np.newaxis]

        if self.family == "heavy-tail-velocity":
            w = np.einsum("...i,...i->...", v, v) / scale2
            factor = (self.degrees_of_freedom + 3.0) / (
                scale2 * (1.0 + w))
            return -factor[..., np.newaxis] * v * density

        return -v / scale2 * density

    def evaluate(self, x):
        """
        Evaluate k_0 at phase points of shape (..., 6)
        """
        x = np.asarray(x, dtype=float)
        return self.spatial_density(x[..., :3]) * self.velocity_density(
            x[..., 3:])

    def gradient(self, x):
        """
        Gradient of k_0 in R^6 at phase points of shape (..., 6)
        """
        x = np.asarray(x, dtype=float)
        q, v = x[..., :3], x[..., 3:]
        rho = self.spatial_density(q)[..., np.newaxis]
        g = self.velocity_density(v)[..., np.newaxis]

        return np.concatenate(
            [self.spatial_gradient(q) * g, rho * self.velocity_gradient(v)],
            axis=-1
        )

    def enclosed_mass(self, r):
        """
        Spatial mass m(r) inside the sphere of radius r about 'center'
        """
        r = np.asarray(r, dtype=float)
        if self.family == "uniform-ball-spatial":
            return np.minimum(1.0, (np.maximum(r, 0.0)
                                    / self.spatial_scale) ** 3)
        return stats.chi(df=3).cdf(r / self.spatial_scale)

    def spatial_sup(self):
        """
        Return the sup norm of the spatial density
        """
        return self.spatial_normalization

    def marginal(self, coordinate):
        """
        Return the frozen scipy distribution of one phase-space coordinate

        Coordinates 0-2 are positions, 3-5 velocities.
        """
        if coordinate not in range(6):
            raise InputError("coordinate must lie in 0..5")

        if coordinate < 3:
            loc = self.center[coordinate]
            if self.family == "uniform-ball-spatial":
                return _ball_coordinate(loc=loc, scale=self.spatial_scale)
            return stats.norm(loc=loc, scale=self.spatial_scale)

        if self.family == "heavy-tail-velocity":
            dof = self.degrees_of_freedom
            return stats.t(
                df=dof, scale=self.velocity_scale / math.sqrt(dof)
            )
        return stats.norm(scale=self.velocity_scale)

    def half_space_probability(self, coordinate, threshold):
        """
        Return P(x[coordinate] <= threshold)
        """
        return float(self.marginal(coordinate).cdf(threshold))

    def sample(self, seed, n):
        """
        Draw n i.i.d. phase points from k_0

        :seed: Seed accepted by 'util.derive_rng'
        :n: Sample size, at least 1
        """
        if int(n) < 1:
            raise InputError("sample size must be at least 1")
        n = int(n)
        rng = derive_rng(seed)

        if self.family == "uniform-ball-spatial":
            direction = rng.standard_normal((n, 3))
            direction /= np.linalg.norm(direction, axis=1)[:, np.newaxis]
            radius = self.spatial_scale * rng.random(n) ** (1.0 / 3.0)
            q = self.center + radius[:, np.newaxis] * direction
        else:
            q = self.center + self.spatial_scale * rng.standard_normal((n, 3))

        if self.family == "heavy-tail-velocity":
            dof = self.degrees_of_freedom
            v = stats.multivariate_t(
                loc=np.zeros(3),
                shape=np.eye(3) * self.velocity_scale ** 2 / dof,
                df=dof
            ).rvs(size=n, random_state=rng)
            v = np.reshape(v, (n, 3))
        else:
            v = self.velocity_scale * rng.standard_normal((n, 3))

        return np.concatenate([q, v], axis=1)

    def __repr__(self):
        return "DensityModel({})".format(
            ", ".join(
                "{}={!r}".format(key, value)
                for key, value in self.to_dict().items()
            )
        )


class LipschitzSetSpec(object):
    """
    Parameters of the probabilistic local-Lipschitz membership test
    """
    __slots__ = ("particle_count", "delta", "probe_budget")

    def __init__(self, particle_count, delta=0.5, probe_budget=256):
        if int(particle_count) < 1:
            raise InputError("particle count must be at least 1")
        if not delta > 0.0:
            raise InputError("delta must be positive")
        if int(probe_budget) < 2:
            raise InputError("probe budget must be at least 2")

        self.particle_count = int(particle_count)
        self.delta = float(delta)
        self.probe_budget = int(probe_budget)

    @property
    def probe_radius(self):
        return float(self.particle_count) ** (-1.0 / 3.0)

    @property
    def threshold(self):
        return float(self.particle_count) ** (0.5 * self.delta)


def _audit_points(model, sample_budget, seed):
    """
    Return the sampled audit points followed by a deterministic radial sweep
    along the coordinate axes and the phase-space diagonal
    """
    sample = model.sample(seed, sample_budget)

    directions = np.concatenate(
        [np.eye(6), -np.eye(6), np.full((1, 6), 1.0 / math.sqrt(6.0))]
    )
    sweep = (
        AUDIT_SWEEP_RADII[:, np.newaxis, np.newaxis]
        * directions[np.newaxis, :, :]
    ).reshape(-1, 6)
    sweep[:, :3] += model.center

    return sample, sweep


def _decay_ratios(model, points):
    norm = np.linalg.norm(points, axis=-1)
    decay = model.evaluate(points) * (1.0 + norm) ** (
        4.0 + model.decay_exponent)
    grad_decay = np.linalg.norm(model.gradient(points), axis=-1) * (
        1.0 + norm) ** (3.0 + model.decay_exponent)
    return decay, grad_decay


def fit_decay_constant(model, sample_budget=4096, seed=0):
    """
    Fit C0 as 1.05 times the largest audited decay ratio
    """
    sample, sweep = _audit_points(
        model, sample_budget, (seed, "decay-constant"))
    decay, grad_decay = _decay_ratios(
        model, np.concatenate([sample, sweep]))

    return 1.05 * float(max(decay.max(), grad_decay.max()))


def audit_assumptions(model, sample_budget=10000, seed=0):
    """
    Audit the decay and moment assumptions on k_0

    Reports the maxima of k_0(x)(1+|x|)^(4+delta)/C0 and
    |grad k_0(x)|(1+|x|)^(3+delta)/C0 over sampled points and a radial sweep
    out to |x| = 1e8, the Monte-Carlo kinetic energy integral of |v|^2 k_0,
    and whether the decay ratio still grows at the end of the sweep.
    """
    sample, sweep = _audit_points(model, sample_budget, (seed, "audit"))
    points = np.concatenate([sample, sweep])

    decay, grad_decay = _decay_ratios(model, points)
    decay /= model.decay_constant
    grad_decay /= model.decay_constant

    # Ratio along each sweep direction over its last decade
    sweep_decay = decay[len(sample):].reshape(len(AUDIT_SWEEP_RADII), -1)
    tail_growth = bool(np.any(sweep_decay[-1] > 1.01 * sweep_decay[-11]))

    kinetic = float(np.mean(np.sum(sample[:, 3:] ** 2, axis=1)))
    if not model.finite_kinetic_energy:
        logger.warning(
            "Kinetic energy of the %s density is infinite, the sampled "
            "estimate %g does not converge", model.family, kinetic
        )

    max_decay = float(decay.max())
    max_grad = float(grad_decay.max())
    compliant = max_decay <= 1.0 and max_grad <= 1.0 and not tail_growth

    if not compliant:
        logger.warning(
            "Density violates the decay assumptions: decay ratio %g, "
            "gradient ratio %g, tail growth %s",
            max_decay, max_grad, tail_growth
        )

    return AuditReport(
        max_ratio_decay=max_decay,
        max_ratio_grad_decay=max_grad,
        kinetic_energy_estimate=kinetic,
        tail_growth=tail_growth,
        compliant=compliant,
        point_count=len(points)
    )


def _probe_pairs(y, spec, seed):
    rng = derive_rng(seed)
    budget = spec.probe_budget

    direction = rng.standard_normal((2, budget, 6))
    direction /= np.linalg.norm(direction, axis=-1)[..., np.newaxis]
    radius = spec.probe_radius * rng.random((2, budget)) ** (1.0 / 6.0)

    probes = y + radius[..., np.newaxis] * direction
    return probes[0], probes[1]


def lipschitz_ratios(model, y, spec, seed):
    """
    Return |k_0(Z1) - k_0(Z2)| / (k_0(Z1)|Z1 - Z2|) over the probe pairs

    Pairs where both densities vanish give 0; a vanishing k_0(Z1) with a
    positive k_0(Z2) gives inf.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (6,):
        raise InputError("phase point must have shape (6,)")

    z1, z2 = _probe_pairs(y, spec, seed)
    k1 = model.evaluate(z1)
    k2 = model.evaluate(z2)
    numerator = np.abs(k1 - k2)
    denominator = k1 * np.linalg.norm(z1 - z2, axis=-1)

    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(numerator == 0.0, 0.0, numerator / denominator)

    return ratios


def in_lipschitz_set(model, y, spec, seed):
    """
    Probabilistic membership test for the local-Lipschitz set

    Returns False as soon as one probe pair violates
    |k_0(Z1) - k_0(Z2)| <= N^(delta/2) k_0(Z1)|Z1 - Z2|. Finitely many probes
    make this a necessary-condition test.
    """
    ratios = lipschitz_ratios(model, y, spec, seed)
    return bool(np.all(ratios <= spec.threshold))
