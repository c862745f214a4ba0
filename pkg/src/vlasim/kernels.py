import logging
import math
from collections import namedtuple

import numpy as np

from .errors import InputError, UnsupportedOperationError

__all__ = (
    "KernelSpec", "Envelope", "DominationWitness", "force", "force_field",
    "force_magnitude", "g_bound", "domination_holds", "particle_norms",
    "sup_norm", "one_norm", "pair_potential", "cutoff_moment"
)

logger = logging.getLogger("vlasim")


DominationWitness = namedtuple(
    "DominationWitness", ("holds", "lhs", "rhs", "admissible")
)


class KernelSpec(object):
    """
    KernelSpec describes the homogeneous pair force a*q/|q|^(alpha+1),
    optionally regularized inside the cut-off radius N^(-c) by a linear
    profile that matches the singular law on the cut-off sphere
    """
    __slots__ = ("alpha", "sign", "cutoff_exponent", "particle_count")

    def __init__(
            self, alpha, sign=1, cutoff_exponent=None, particle_count=1):
        """
        :alpha: Singularity exponent in (1, 2]
        :sign: +1 for repulsive, -1 for attractive and 0 to switch the
               interaction off
        :cutoff_exponent: Cut-off exponent c > 0. None selects the limit
                          kernel without any cut-off.
        :particle_count: Particle count N setting the cut-off radius
        """
        alpha = float(alpha)
        if not 1.0 < alpha <= 2.0:
            raise InputError(
                "alpha must lie in (1, 2], got {}".format(alpha)
            )
        if sign not in (-1, 0, 1):
            raise InputError("sign must be -1, 0 or +1, got {}".format(sign))
        if cutoff_exponent is not None:
            cutoff_exponent = float(cutoff_exponent)
            if not cutoff_exponent > 0.0 or math.isinf(cutoff_exponent):
                raise InputError(
                    "cutoff exponent must be a positive finite number, "
                    "got {}".format(cutoff_exponent)
                )
        if int(particle_count) < 1:
            raise InputError("particle count must be at least 1")

        self.alpha = alpha
        self.sign = int(sign)
        self.cutoff_exponent = cutoff_exponent
        self.particle_count = int(particle_count)

    @classmethod
    def limit(cls, alpha, sign=1, particle_count=1):
        """
        Return the kernel without cut-off
        """
        return cls(
            alpha=alpha, sign=sign, cutoff_exponent=None,
            particle_count=particle_count
        )

    @property
    def is_regularized(self):
        return self.cutoff_exponent is not None

    def cutoff_radius(self):
        """
        Return N^(-c), or 0 for the limit kernel
        """
        if not self.is_regularized:
            return 0.0
        return float(self.particle_count) ** (-self.cutoff_exponent)

    def cutoff_radius_squared(self):
        if not self.is_regularized:
            return 0.0
        return float(self.particle_count) ** (-2.0 * self.cutoff_exponent)

    def inner_slope(self):
        """
        Return N^((alpha+1)c), the slope of the linear branch
        """
        if not self.is_regularized:
            raise UnsupportedOperationError(
                "The limit kernel has no linear branch"
            )
        return float(self.particle_count) ** (
            (self.alpha + 1.0) * self.cutoff_exponent
        )

    def force_bound(self):
        """
        Return sup |f(q)| = N^(alpha*c), attained on the cut-off sphere
        """
        if not self.is_regularized:
            return math.inf
        return float(self.particle_count) ** (
            self.alpha * self.cutoff_exponent
        )

    def with_cutoff(self, cutoff_exponent):
        return KernelSpec(
            alpha=self.alpha, sign=self.sign,
            cutoff_exponent=cutoff_exponent,
            particle_count=self.particle_count
        )

    def with_particle_count(self, particle_count):
        return KernelSpec(
            alpha=self.alpha, sign=self.sign,
            cutoff_exponent=self.cutoff_exponent,
            particle_count=particle_count
        )

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "sign": self.sign,
            "cutoff_exponent": self.cutoff_exponent,
            "particle_count": self.particle_count
        }

    def __eq__(self, other):
        if not isinstance(other, KernelSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(sorted(self.to_dict().items())))

    def __repr__(self):
        return (
            "KernelSpec(alpha={}, sign={}, cutoff_exponent={}, "
            "particle_count={})".format(
                self.alpha, self.sign, self.cutoff_exponent,
                self.particle_count
            )
        )


class Envelope(object):
    """
    Radial envelope |h(q)| <= max(|q|, c_N)^(-alpha_tilde) used to bound the
    impact of a single collision
    """
    __slots__ = ("alpha_tilde", "cutoff")

    def __init__(self, alpha_tilde, cutoff=0.0):
        alpha_tilde = float(alpha_tilde)
        if not 1.0 < alpha_tilde <= 3.0:
            raise InputError(
                "envelope exponent must lie in (1, 3], got {}".format(
                    alpha_tilde)
            )
        if cutoff < 0.0:
            raise InputError("envelope cut-off must be nonnegative")
        self.alpha_tilde = alpha_tilde
        self.cutoff = float(cutoff)

    def magnitude(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.maximum(r, self.cutoff) ** (-self.alpha_tilde)


def force_field(spec, d):
    """
    Evaluate the pair force for displacements of shape (..., 3)

    The branch is selected on the squared norm; |q| = N^(-c) belongs to the
    linear branch.
    """
    d = np.asarray(d, dtype=float)
    r2 = np.einsum("...i,...i->...", d, d)

    with np.errstate(divide="ignore", invalid="ignore"):
        scale = r2 ** (-0.5 * (spec.alpha + 1.0))

    if spec.is_regularized:
        scale = np.where(
            r2 <= spec.cutoff_radius_squared(), spec.inner_slope(), scale
        )
    else:
        scale = np.where(r2 > 0.0, scale, 0.0)

    return spec.sign * scale[..., np.newaxis] * d


def force(spec, q):
    """
    Return the force vector f(q) for a single displacement q in R^3
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (3,):
        raise InputError("displacement must have shape (3,)")
    if not np.all(np.isfinite(q)):
        raise InputError("displacement must be finite, got {}".format(q))

    return force_field(spec, q)


def force_magnitude(kernel, r):
    """
    Return |f(q)| as a function of r = |q| for a KernelSpec or an Envelope
    """
    if isinstance(kernel, Envelope):
        return kernel.magnitude(r)

    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        outer = r ** (-kernel.alpha)
    if kernel.is_regularized:
        magnitude = np.where(
            r <= kernel.cutoff_radius(), kernel.inner_slope() * r, outer
        )
    else:
        magnitude = np.where(r > 0.0, outer, 0.0)

    return abs(kernel.sign) * magnitude


def g_bound(spec, q):
    """
    Return the local Lipschitz bound g(q) of the regularized kernel

    g(q) = alpha*N^(c(alpha+1)) for |q| <= 3N^(-c) and
    alpha*3^(alpha+1)/|q|^(alpha+1) otherwise.
    """
    if not spec.is_regularized:
        raise UnsupportedOperationError(
            "g is only defined for regularized kernels"
        )

    q = np.asarray(q, dtype=float)
    r = np.linalg.norm(q, axis=-1)
    with np.errstate(divide="ignore"):
        outer = spec.alpha * 3.0 ** (spec.alpha + 1.0) * r ** (
            -(spec.alpha + 1.0)
        )
    inner = spec.alpha * spec.inner_slope()

    return np.where(r <= 3.0 * spec.cutoff_radius(), inner, outer)


def domination_holds(spec, q, delta):
    """
    Check |f(q) - f(q + delta)| <= g(q)|delta| and report both sides

    The comparison allows a rounding slack of 1e-12 relative to |f(q)|.
    'admissible' flags whether |delta| <= max(2N^(-c), (2/3)|q|), the regime
    in which the inequality is guaranteed.
    """
    q = np.asarray(q, dtype=float)
    delta = np.asarray(delta, dtype=float)

    lhs = np.linalg.norm(
        force_field(spec, q) - force_field(spec, q + delta), axis=-1
    )
    delta_norm = np.linalg.norm(delta, axis=-1)
    rhs = g_bound(spec, q) * delta_norm

    slack = 1e-12 * np.linalg.norm(force_field(spec, q), axis=-1)
    holds = lhs <= rhs + slack

    admissible = delta_norm <= np.maximum(
        2.0 * spec.cutoff_radius(),
        2.0 / 3.0 * np.linalg.norm(q, axis=-1)
    )

    if np.ndim(holds) == 0:
        return DominationWitness(
            holds=bool(holds), lhs=float(lhs), rhs=float(rhs),
            admissible=bool(admissible)
        )

    return DominationWitness(
        holds=holds, lhs=lhs, rhs=rhs, admissible=admissible
    )


def particle_norms(X):
    """
    Return the per-particle Euclidean norms of configurations shaped
    (..., N, d)
    """
    X = np.asarray(X, dtype=float)
    if X.ndim < 2 or X.shape[-2] == 0:
        raise InputError("configuration must contain at least one particle")
    return np.linalg.norm(X, axis=-1)


def sup_norm(X):
    """
    |X|_inf: maximum over particles of the per-particle norm
    """
    return particle_norms(X).max(axis=-1)


def one_norm(X):
    """
    |X|_1: sum over particles of the per-particle norm
    """
    return particle_norms(X).sum(axis=-1)


def pair_potential(spec, r):
    """
    Pair potential U with f = -grad U

    Outside the cut-off U(r) = a/((alpha-1) r^(alpha-1)); inside it is the
    quadratic matching value and slope on the cut-off sphere.
    """
    r = np.asarray(r, dtype=float)
    alpha = spec.alpha

    with np.errstate(divide="ignore"):
        outer = r ** (1.0 - alpha) / (alpha - 1.0)

    if not spec.is_regularized:
        return spec.sign * outer

    r_c = spec.cutoff_radius()
    offset = r_c ** (1.0 - alpha) * (1.0 / (alpha - 1.0) + 0.5)
    inner = offset - 0.5 * spec.inner_slope() * r * r

    return spec.sign * np.where(r <= r_c, inner, outer)


def cutoff_moment(spec):
    """
    Return the coefficient kappa with (f_c - f_inf) * rho ~ kappa * grad(rho)

    kappa = -(4*pi*a/3) * (1/5 - 1/(4-alpha)) * r_c^(4-alpha). The next
    term of the expansion is of relative order (r_c/L)^2 where L is the
    length scale of rho.
    """
    if not spec.is_regularized:
        return 0.0

    alpha = spec.alpha
    return -(4.0 * math.pi * spec.sign / 3.0) * (
        0.2 - 1.0 / (4.0 - alpha)
    ) * spec.cutoff_radius() ** (4.0 - alpha)
