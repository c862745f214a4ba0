import math

import numpy as np
import pytest

from vlasim.densities import DensityModel
from vlasim.errors import ConfigurationError, InputError, RangeError, \
    UnsupportedOperationError
from vlasim.kernels import KernelSpec, force_field
from vlasim.meanfield import (ConstantFieldBackend, EnsembleKdeBackend,
                              RadialExactBackend, ZeroFieldBackend,
                              build_backend, evolve_characteristic,
                              evolve_vlasov, flow_lipschitz_probe,
                              free_flight_defect, jacobian_determinant,
                              lift_flow, mean_field_force,
                              pullback_density)


@pytest.fixture(scope="function")
def coulomb_limit():
    """
    Attractive alpha = 2 limit kernel
    """
    return KernelSpec.limit(2.0, sign=-1)


@pytest.fixture(scope="function")
def frozen_ball(ball_model, coulomb_limit):
    """
    Frozen shell-theorem field of the uniform unit ball
    """
    return RadialExactBackend(ball_model, coulomb_limit, frozen=True)


class TestSimpleBackends:
    def test_zero_field_is_free_flight(self, sim_config_factory):
        spec = KernelSpec.limit(1.5)
        x0 = np.array([1.0, 2.0, 3.0, 0.5, -1.0, 2.0])
        path = evolve_characteristic(
            ZeroFieldBackend(), spec, x0, 0.0, 2.0, sim_config_factory())

        np.testing.assert_allclose(
            path.states[-1, :3], x0[:3] + 2.0 * x0[3:], atol=1e-12)
        np.testing.assert_allclose(path.states[-1, 3:], x0[3:])
        assert path.times[-1] == 2.0

    def test_constant_field_parabola(self, sim_config_factory):
        """
        RK4 is exact for uniformly accelerated motion
        """
        spec = KernelSpec.limit(1.5)
        backend = ConstantFieldBackend([0.0, 0.0, -2.0])
        x0 = np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        path = evolve_characteristic(
            backend, spec, x0, 0.0, 1.0, sim_config_factory())

        np.testing.assert_allclose(
            path.states[-1], [1.0, 0.0, 0.0, 1.0, 0.0, -2.0], atol=1e-12)

    def test_backward_integration(self, sim_config_factory):
        spec = KernelSpec.limit(1.5)
        backend = ConstantFieldBackend([1.0, 0.5, 0.0])
        x0 = np.array([0.3, 0.2, 0.1, 0.0, 1.0, 0.0])
        cfg = sim_config_factory()

        forward = evolve_characteristic(backend, spec, x0, 0.0, 1.0, cfg)
        backward = evolve_characteristic(
            backend, spec, forward.states[-1], 1.0, 0.0, cfg)

        np.testing.assert_allclose(backward.states[-1], x0, atol=1e-12)

    def test_invalid_field(self):
        with pytest.raises(InputError):
            ConstantFieldBackend([1.0, 2.0])

    def test_invalid_phase_point(self, sim_config_factory):
        with pytest.raises(InputError):
            evolve_characteristic(
                ZeroFieldBackend(), KernelSpec.limit(1.5), np.zeros(5),
                0.0, 1.0, sim_config_factory())


class TestRadialExact:
    def test_needs_coulomb(self, ball_model):
        with pytest.raises(UnsupportedOperationError):
            RadialExactBackend(
                ball_model, KernelSpec.limit(1.5), frozen=True)

    def test_field_inside_ball(self, frozen_ball, coulomb_limit):
        """
        Inside a uniform ball the field is linear: -q / R^3
        """
        q = np.array([0.3, -0.2, 0.1])

        np.testing.assert_allclose(
            mean_field_force(frozen_ball, coulomb_limit, 0.0, q), -q)

    def test_field_outside_ball(self, frozen_ball, coulomb_limit):
        """
        Outside the ball the full mass acts from the center
        """
        q = np.array([0.0, 2.0, 0.0])

        np.testing.assert_allclose(
            frozen_ball.field(0.0, q, coulomb_limit), [0.0, -0.25, 0.0])

    def test_harmonic_oscillation(
            self, frozen_ball, coulomb_limit, sim_config_factory):
        """
        Characteristics inside the frozen ball oscillate with omega = 1
        """
        x0 = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
        path = evolve_characteristic(
            frozen_ball, coulomb_limit, x0, 0.0, 1.0,
            sim_config_factory()
        )

        np.testing.assert_allclose(
            path.states[-1, 0], 0.5 * math.cos(1.0), atol=1e-8)
        np.testing.assert_allclose(
            path.states[-1, 3], -0.5 * math.sin(1.0), atol=1e-8)

    def test_jacobian_is_one(
            self, frozen_ball, coulomb_limit, sim_config_factory):
        """
        The characteristic flow preserves phase-space volume
        """
        x = np.array([0.2, 0.1, -0.1, 0.3, 0.0, 0.2])

        assert jacobian_determinant(
            frozen_ball, coulomb_limit, x, 0.0, 1.0,
            sim_config_factory()) == pytest.approx(1.0, abs=1e-6)

    def test_flat_ball_has_no_gradient(self, frozen_ball):
        np.testing.assert_array_equal(
            frozen_ball.density_gradient(0.5, [0.1, 0.2, 0.3]), 0.0)

    def test_evolved_profile(self, gaussian_model):
        """
        The evolved enclosed mass stays a distribution function and starts
        at the analytic profile
        """
        spec = KernelSpec.limit(2.0, sign=1)
        backend = RadialExactBackend(
            gaussian_model, spec, horizon=0.5, reference_count=2000,
            reference_steps=32, radial_bins=64, seed=3
        )
        r = np.linspace(0.0, 20.0, 50)

        assert backend.time_range() == (0.0, 0.5)
        np.testing.assert_allclose(
            backend.enclosed_mass(0.0, r), gaussian_model.enclosed_mass(r))

        step = backend.times[1]
        assert backend.enclosed_mass(step, 1.0) == pytest.approx(
            float(gaussian_model.enclosed_mass(1.0)), abs=0.04)

        mass = backend.enclosed_mass(0.5, r)
        assert np.all(np.diff(mass) >= 0.0)
        assert mass[-1] == 1.0

        with pytest.raises(RangeError):
            mean_field_force(backend, spec, 0.7, np.ones(3))

    def test_field_matches_convolution(self, gaussian_model):
        """
        The regularized field equals the pair force averaged over the
        spatial density
        """
        spec = KernelSpec(alpha=2.0, sign=1, cutoff_exponent=0.5,
                          particle_count=400)
        backend = RadialExactBackend(gaussian_model, spec, frozen=True)
        points = np.array(
            [[0.5, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]])

        total = np.zeros_like(points)
        for chunk in range(4):
            sources = gaussian_model.sample(chunk, 500000)[:, :3]
            for i, q in enumerate(points):
                total[i] += force_field(spec, q - sources).sum(axis=0)

        np.testing.assert_allclose(
            backend.field(0.0, points, spec), total / 2e6, atol=0.01)


def _rms(values):
    return float(np.sqrt(np.mean(np.sum(values ** 2, axis=-1))))


class TestEnsembleKde:
    @pytest.fixture(scope="class")
    def backend(self):
        model = DensityModel(family="gaussian-product", decay_constant=1.0)
        spec = KernelSpec(alpha=1.5, sign=-1, cutoff_exponent=0.5,
                          particle_count=64)
        return evolve_vlasov(
            model, spec, horizon=0.5, reference_count=256,
            reference_steps=16, snapshot_count=8, seed=1
        )

    def test_snapshots(self, backend):
        assert backend.reference_count == 256
        assert backend.time_range() == (0.0, 0.5)
        assert len(backend.times) == 9
        assert backend.smoothing == pytest.approx(256 ** (-1.0 / 6.0))

    def test_momentum_conservation(self, backend):
        """
        The softened self-consistent field conserves total momentum
        """
        np.testing.assert_allclose(
            backend.total_momentum(-1), backend.total_momentum(0),
            atol=1e-10)

    def test_references_interpolate_snapshots(self, backend):
        np.testing.assert_allclose(
            backend.references(backend.times[3]), backend.positions[3],
            atol=1e-12)

    def test_far_field(self, backend):
        """
        Far away the field approaches that of a unit point mass
        """
        spec = KernelSpec.limit(1.5, sign=-1)
        q = np.array([100.0, 0.0, 0.0])
        center = backend.references(0.0).mean(axis=0)
        d = q - center

        np.testing.assert_allclose(
            backend.field(0.0, q, spec),
            -d / np.linalg.norm(d) ** 2.5, rtol=0.05, atol=1e-7)

    def test_coverage(self, backend, sim_config_factory):
        spec = KernelSpec.limit(1.5, sign=-1)

        with pytest.raises(RangeError):
            evolve_characteristic(
                backend, spec, np.zeros(6), 0.0, 1.0, sim_config_factory())

    def test_converges_to_shell_field(self, gaussian_model):
        """
        With smoothing M^(-1/6) the error against the exact Coulomb field
        shrinks as the reference ensemble grows
        """
        spec = KernelSpec.limit(2.0, sign=1)
        exact = RadialExactBackend(gaussian_model, spec, frozen=True)
        points = np.random.default_rng(5).standard_normal((50, 3))
        target = exact.field(0.0, points, spec)

        errors = []
        for count in (1024, 8192, 65536):
            q = gaussian_model.sample(count, count)[:, :3]
            backend = EnsembleKdeBackend(
                times=[0.0, 1.0], positions=np.stack([q, q]),
                velocities=np.zeros((2, count, 3)),
                smoothing=count ** (-1.0 / 6.0)
            )
            errors.append(_rms(backend.field(0.0, points, spec) - target))

        assert errors[0] > errors[1] > errors[2]

    def test_mass_in_ball_matches_pullback(
            self, gaussian_model, sim_config_factory):
        """
        The share of references inside the unit ball agrees with the mass
        of the pulled-back density k_t(x) = k_0(phi_{t,0}(x))
        """
        spec = KernelSpec.limit(2.0, sign=-1)
        backend = evolve_vlasov(
            gaussian_model, spec, horizon=0.5, reference_count=2048,
            reference_steps=16, snapshot_count=16, seed=4
        )
        cfg = sim_config_factory(
            horizon=0.5, characteristic_step=0.125,
            characteristic_integrator="velocity-verlet"
        )
        share = float(np.mean(
            np.linalg.norm(backend.positions[-1], axis=1) < 1.0))

        nodes, weights = np.polynomial.legendre.leggauss(6)
        radii, weights = 0.5 * (nodes + 1.0), 0.5 * weights
        axis = np.linspace(-5.0, 5.0, 9)
        velocities = np.stack(
            np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        cell = (axis[1] - axis[0]) ** 3

        # Positions r*e on every coordinate axis, one velocity grid each
        positions = (
            np.eye(3)[:, np.newaxis, :] * radii[np.newaxis, :, np.newaxis]
        ).reshape(-1, 3)
        x = np.concatenate([
            np.repeat(positions, len(velocities), axis=0),
            np.tile(velocities, (len(positions), 1))
        ], axis=1)

        k = pullback_density(backend, spec, gaussian_model, 0.5, x, cfg)
        rho = cell * k.reshape(3, len(radii), -1).sum(axis=-1).mean(axis=0)
        mass = float(np.sum(weights * 4.0 * math.pi * radii ** 2 * rho))

        assert mass == pytest.approx(share, abs=0.04)
        assert mass < float(gaussian_model.enclosed_mass(1.0))


class TestBuildBackend:
    def test_kinds(self, ball_model, coulomb_limit):
        assert build_backend(
            "zero-field", ball_model, coulomb_limit, 1.0).kind == "zero-field"
        constant = build_backend(
            "constant-field", ball_model, coulomb_limit, 1.0,
            options={"field": [1.0, 0.0, 0.0]})
        assert constant.to_dict() == {
            "kind": "constant-field", "field": [1.0, 0.0, 0.0]}
        frozen = build_backend(
            "radial-exact", ball_model, coulomb_limit, 1.0,
            options={"frozen": True})
        assert frozen.frozen

    def test_invalid(self, ball_model, coulomb_limit):
        with pytest.raises(ConfigurationError):
            build_backend("spectral", ball_model, coulomb_limit, 1.0)
        with pytest.raises(ConfigurationError):
            build_backend(
                "ensemble-kde", ball_model, coulomb_limit, 1.0,
                options={"frozen": True})


class TestLiftFlow:
    def test_grid_matches_micro_schedule(self, sim_config_factory):
        """
        Lifted records share the snapshot grid of the interacting dynamics
        """
        spec = KernelSpec(alpha=1.2, sign=0, cutoff_exponent=0.5,
                          particle_count=4)
        cfg = sim_config_factory(dt0=0.01)
        X0 = np.random.default_rng(1).standard_normal((4, 6))

        record = lift_flow(ZeroFieldBackend(), spec, X0, 0.0, 1.0, cfg)

        np.testing.assert_allclose(record.times, cfg.schedule(spec)[3])
        np.testing.assert_allclose(
            record.final[:, :3], X0[:, :3] + X0[:, 3:], atol=1e-12)
        assert record.diagnostics["lifted"]

    def test_backward_lift(self, sim_config_factory):
        spec = KernelSpec.limit(1.5)
        X0 = np.zeros((2, 6))
        X0[:, 3] = 1.0

        record = lift_flow(
            ZeroFieldBackend(), spec, X0, 1.0, 0.0, sim_config_factory(),
            times=np.linspace(1.0, 0.0, 5))

        assert record.times[0] == 0.0
        assert record.times[-1] == 1.0
        np.testing.assert_allclose(record.initial[:, 0], -1.0, atol=1e-12)


class TestFlowDiagnostics:
    def test_pullback_density(self, gaussian_model, sim_config_factory):
        """
        Under free flight k_t(q, v) = k_0(q - t v, v)
        """
        spec = KernelSpec.limit(1.5)
        x = np.array([0.5, 0.0, 0.2, 1.0, -0.5, 0.0])
        shifted = x.copy()
        shifted[:3] -= 0.7 * x[3:]

        assert float(pullback_density(
            ZeroFieldBackend(), spec, gaussian_model, 0.7, x,
            sim_config_factory())) == pytest.approx(
                float(gaussian_model.evaluate(shifted)), rel=1e-10)

    def test_free_flight_defect_vanishes(self, sim_config_factory):
        """
        A uniform field moves every pair in the same way
        """
        spec = KernelSpec.limit(1.5)
        rng = np.random.default_rng(2)
        X, Y = rng.standard_normal((2, 10, 6))

        defects, _ = free_flight_defect(
            ConstantFieldBackend([0.0, 1.0, 0.0]), spec, X, Y,
            [0.1, 0.2, 0.4], sim_config_factory()
        )

        np.testing.assert_allclose(defects, 0.0, atol=1e-12)

    def test_free_flight_defect_quadratic(
            self, frozen_ball, coulomb_limit, sim_config_factory):
        """
        In the linear field of the ball pair separations bend
        quadratically in the lag
        """
        X = np.array([[0.1, 0.0, 0.0, 0.1, 0.0, 0.0]])
        Y = np.array([[0.0, 0.1, 0.0, 0.0, 0.0, 0.1]])

        defects, slope = free_flight_defect(
            frozen_ball, coulomb_limit, X, Y, [0.01, 0.02, 0.04],
            sim_config_factory()
        )

        assert np.all(defects > 0.0)
        assert slope == pytest.approx(2.0, abs=0.1)

    def test_flow_lipschitz_probe(self, sim_config_factory):
        spec = KernelSpec.limit(1.5)
        X = np.array([[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
        Y = np.array([[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]])

        probe = flow_lipschitz_probe(
            ZeroFieldBackend(), spec, X, Y, 1.0, sim_config_factory())

        assert probe.ratios[0] == pytest.approx(1.0)
        assert probe.max_ratio == pytest.approx(math.sqrt(2.0))
        assert probe.constant >= 0.0
