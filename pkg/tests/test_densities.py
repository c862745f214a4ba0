import math

import numpy as np
import pytest
from scipy import stats

from vlasim.densities import (DensityModel, LipschitzSetSpec,
                              audit_assumptions, in_lipschitz_set,
                              lipschitz_ratios)
from vlasim.errors import InputError


class TestDensityModel:
    def test_unknown_family(self):
        """
        Unknown density families are rejected
        """
        with pytest.raises(InputError):
            DensityModel(family="lognormal")

    def test_heavy_tail_needs_exponent(self):
        """
        The heavy-tailed velocity family needs a positive tail exponent
        """
        with pytest.raises(InputError):
            DensityModel(family="heavy-tail-velocity")

    def test_normalization(self, gaussian_model):
        """
        The Gaussian product density integrates to one: check the value at
        the origin
        """
        assert gaussian_model.evaluate(np.zeros(6)) == pytest.approx(
            (2.0 * math.pi) ** -3)

    def test_heavy_tail_normalization(self):
        """
        The heavy-tailed velocity density matches scipy's multivariate t
        """
        model = DensityModel(
            family="heavy-tail-velocity", tail_exponent=2.0,
            velocity_scale=1.5, decay_constant=1.0
        )
        dof = model.degrees_of_freedom
        reference = stats.multivariate_t(
            loc=np.zeros(3), shape=np.eye(3) * 1.5 ** 2 / dof, df=dof)

        for v in ([0.0, 0.0, 0.0], [1.0, -2.0, 0.5], [10.0, 0.0, 0.0]):
            assert model.velocity_density(np.array(v)) == pytest.approx(
                reference.pdf(v), rel=1e-10)

    def test_gradient(self, gaussian_model):
        """
        The analytic gradient agrees with central differences
        """
        x = np.array([0.3, -0.2, 0.1, 0.5, 0.4, -1.0])
        h = 1e-6
        numeric = np.array([
            (gaussian_model.evaluate(x + h * e)
             - gaussian_model.evaluate(x - h * e)) / (2.0 * h)
            for e in np.eye(6)
        ])

        np.testing.assert_allclose(
            gaussian_model.gradient(x), numeric, rtol=1e-6)

    def test_ball_is_not_continuous(self, ball_model):
        """
        The uniform ball has a flat density and zero gradient inside
        """
        assert not ball_model.is_continuous
        assert ball_model.spatial_density([0.2, 0.0, 0.0]) == pytest.approx(
            3.0 / (4.0 * math.pi))
        assert ball_model.spatial_density([1.2, 0.0, 0.0]) == 0.0
        np.testing.assert_array_equal(
            ball_model.spatial_gradient([0.2, 0.1, 0.0]), 0.0)

    def test_enclosed_mass(self, ball_model, gaussian_model):
        """
        m(r) is r^3 inside the unit ball and the chi(3) CDF for Gaussians
        """
        assert ball_model.enclosed_mass(0.5) == pytest.approx(0.125)
        assert ball_model.enclosed_mass(3.0) == 1.0
        assert gaussian_model.enclosed_mass(1.0) == pytest.approx(
            stats.chi(3).cdf(1.0))

    def test_round_trip_dict(self):
        """
        Models survive a round trip through their config section
        """
        model = DensityModel(
            family="heavy-tail-velocity", tail_exponent=1.5,
            center=(1.0, 0.0, 0.0), decay_constant=2.0
        )
        copy = DensityModel.from_dict(model.to_dict())

        assert copy.to_dict() == model.to_dict()


class TestSampling:
    @pytest.mark.parametrize("family,kwargs", [
        ("gaussian-product", {}),
        ("heavy-tail-velocity", {"tail_exponent": 2.5}),
        ("uniform-ball-spatial", {"spatial_scale": 2.0})
    ])
    def test_marginals_pass_ks(self, family, kwargs):
        """
        Every coordinate of a sample passes a KS test against its exact
        marginal
        """
        model = DensityModel(family=family, decay_constant=1.0, **kwargs)
        sample = model.sample(11, 20000)

        for coordinate in range(6):
            result = stats.kstest(
                sample[:, coordinate], model.marginal(coordinate).cdf)
            assert result.pvalue > 1e-4

    def test_deterministic(self, gaussian_model):
        """
        Equal seeds give equal samples, different seeds different ones
        """
        np.testing.assert_array_equal(
            gaussian_model.sample(5, 100), gaussian_model.sample(5, 100))
        assert not np.array_equal(
            gaussian_model.sample(5, 100), gaussian_model.sample(6, 100))

    def test_invalid_size(self, gaussian_model):
        """
        Empty samples are rejected
        """
        with pytest.raises(InputError):
            gaussian_model.sample(0, 0)

    def test_half_space_probability(self, gaussian_model):
        """
        Half-space probabilities follow the coordinate marginals
        """
        assert gaussian_model.half_space_probability(0, 0.0) == \
            pytest.approx(0.5)
        assert gaussian_model.half_space_probability(4, 1.0) == \
            pytest.approx(stats.norm.cdf(1.0))


class TestAudit:
    def test_fitted_model_is_compliant(self):
        """
        A model with a fitted decay constant passes its own audit
        """
        model = DensityModel(family="gaussian-product")
        report = audit_assumptions(model, sample_budget=2000)

        assert report.compliant
        assert report.max_ratio_decay <= 1.0
        assert report.max_ratio_grad_decay <= 1.0
        assert report.kinetic_energy_estimate == pytest.approx(3.0, rel=0.1)

    def test_noncompliant_heavy_tail(self):
        """
        A velocity tail (1+|v|)^-(4.1) violates (1+|x|)^-(4.5) decay: the
        audited ratio keeps growing along the velocity axes
        """
        model = DensityModel(
            family="heavy-tail-velocity", tail_exponent=0.1,
            decay_constant=1.0
        )
        report = audit_assumptions(model, sample_budget=1000)

        assert not report.compliant
        assert report.tail_growth
        assert report.max_ratio_decay > 1.0

    def test_infinite_kinetic_energy(self):
        """
        With delta' = 0.5 the sampled kinetic energy does not settle: the
        median sample mean of |v|^2 keeps growing with the sample size
        """
        model = DensityModel(
            family="heavy-tail-velocity", tail_exponent=0.5,
            decay_constant=1.0
        )
        assert not model.finite_kinetic_energy

        def median_energy(size):
            means = [
                np.mean(np.sum(model.sample((3, size, k), size)[:, 3:] ** 2,
                               axis=1))
                for k in range(15)
            ]
            return np.median(means)

        assert median_energy(100000) > 2.0 * median_energy(1000)


class TestLipschitzSet:
    def test_gaussian_far_tail_not_member(self):
        """
        Far in the Gaussian tail the relative slope exceeds N^(delta/2)
        """
        model = DensityModel(family="gaussian-product", decay_constant=1.0)
        spec = LipschitzSetSpec(particle_count=10000, delta=0.5)
        y = np.array([30.0, 0.0, 0.0, 0.0, 0.0, 0.0])

        assert not in_lipschitz_set(model, y, spec, seed=1)

    def test_gaussian_center_member(self):
        """
        At the center of a Gaussian the relative slope is small
        """
        model = DensityModel(family="gaussian-product", decay_constant=1.0)
        spec = LipschitzSetSpec(particle_count=10 ** 6, delta=0.5)

        assert in_lipschitz_set(model, np.zeros(6), spec, seed=1)

    def test_flat_ball_member(self):
        """
        Inside a uniform ball with very wide velocities the density is
        locally flat
        """
        model = DensityModel(
            family="uniform-ball-spatial", velocity_scale=1e6,
            decay_constant=1.0
        )
        spec = LipschitzSetSpec(particle_count=10 ** 6, delta=0.5)

        assert in_lipschitz_set(model, np.zeros(6), spec, seed=2)

    def test_ratios_shape(self, gaussian_model):
        """
        One ratio per probe pair
        """
        spec = LipschitzSetSpec(particle_count=100, probe_budget=32)
        ratios = lipschitz_ratios(gaussian_model, np.zeros(6), spec, seed=0)

        assert ratios.shape == (32,)
        assert np.all(ratios >= 0.0)

    def test_membership_grows_with_delta(self, gaussian_model):
        """
        A larger delta only relaxes the threshold, so membership never
        drops as delta grows
        """
        deltas = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0]

        for x in np.linspace(0.0, 30.0, 13):
            y = np.array([x, 0.0, 0.0, 0.0, 0.0, 0.0])
            members = [
                in_lipschitz_set(
                    gaussian_model, y,
                    LipschitzSetSpec(particle_count=10000, delta=delta),
                    seed=7)
                for delta in deltas
            ]
            assert members == sorted(members)

        far = np.array([30.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        assert not in_lipschitz_set(
            gaussian_model, far,
            LipschitzSetSpec(particle_count=10000, delta=0.1), seed=7)
        assert in_lipschitz_set(
            gaussian_model, far,
            LipschitzSetSpec(particle_count=10000, delta=4.0), seed=7)
