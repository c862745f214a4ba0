import math

import numpy as np
import pytest

from vlasim.densities import DensityModel
from vlasim.errors import InputError
from vlasim.kernels import KernelSpec
from vlasim.meanfield import ConstantFieldBackend, ZeroFieldBackend
from vlasim.monitors import (PHASE_SETS, DeltaCurve, delta_monitor,
                             density_bound_monitor, phase_partition_counts,
                             tau_estimate)


class TestDeltaMonitor:
    def test_constant_field(self, gaussian_model, sim_config_factory):
        """
        A uniform field of strength 2 changes every velocity by 2t
        """
        curve = delta_monitor(
            ConstantFieldBackend([0.0, 2.0, 0.0]), KernelSpec.limit(1.5),
            gaussian_model, probe_count=8, horizon=1.0,
            cfg=sim_config_factory(), seed=0
        )

        np.testing.assert_allclose(curve.delta, 2.0 * curve.times,
                                   atol=1e-12)
        np.testing.assert_allclose(curve.field_magnitudes, 2.0)
        assert curve.probe_count == 8

    def test_tau_is_half_time(self, gaussian_model, sim_config_factory):
        """
        Under a constant field the field accumulated over [t/2, t] already
        reaches Delta(t)/2
        """
        curve = delta_monitor(
            ConstantFieldBackend([2.0, 0.0, 0.0]), KernelSpec.limit(1.5),
            gaussian_model, probe_count=4, horizon=1.0,
            cfg=sim_config_factory(), seed=1
        )

        assert tau_estimate(curve, 1.0) == pytest.approx(0.5)
        assert tau_estimate(curve, 0.5) == pytest.approx(0.25)
        assert tau_estimate(curve, 0.0) == 0.0

    def test_zero_field(self, gaussian_model, sim_config_factory):
        curve = delta_monitor(
            ZeroFieldBackend(), KernelSpec.limit(1.5), gaussian_model,
            probe_count=4, horizon=1.0, cfg=sim_config_factory(), seed=2
        )

        np.testing.assert_array_equal(curve.delta, 0.0)
        assert tau_estimate(curve, 0.75) == 0.75

    def test_outside_interval(self, gaussian_model, sim_config_factory):
        curve = delta_monitor(
            ZeroFieldBackend(), KernelSpec.limit(1.5), gaussian_model,
            probe_count=1, horizon=1.0, cfg=sim_config_factory(), seed=3
        )

        with pytest.raises(InputError):
            tau_estimate(curve, 1.5)

    def test_needs_probes(self, gaussian_model, sim_config_factory):
        with pytest.raises(InputError):
            delta_monitor(
                ZeroFieldBackend(), KernelSpec.limit(1.5), gaussian_model,
                probe_count=0, horizon=1.0, cfg=sim_config_factory(), seed=0
            )


class TestPhasePartition:
    def test_sets(self):
        """
        With Delta = 1 and K1 = 0.1 the sets are separated at |dq| = 0.1
        and |dq| = 1
        """
        sample = np.array([
            [0.05, 0.0, 0.0, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0, 3.0, 0.0, 0.0],
            [0.5, 0.0, 0.0, 0.01, 0.0, 0.0],
            [0.5, 0.0, 0.0, 1.0, 0.0, 0.0]
        ])

        result = phase_partition_counts(np.zeros(6), sample, 1.0, 0.1)

        assert result.counts == {"M1": 1, "M2": 1, "M3": 1, "M4": 1, "M5": 1}
        assert result.uncovered == 0
        assert result.force_contributions == {}

    def test_random_sample_is_covered(self, gaussian_model):
        sample = gaussian_model.sample(4, 5000)
        spec = KernelSpec(alpha=1.2, cutoff_exponent=0.5, particle_count=100)

        result = phase_partition_counts(
            np.zeros(6), sample, 2.0, 1.0, spec=spec)

        assert result.uncovered == 0
        assert sum(result.counts.values()) >= len(sample)
        assert set(result.force_contributions) == set(PHASE_SETS)
        assert all(value >= 0.0
                   for value in result.force_contributions.values())

    def test_invalid(self):
        with pytest.raises(InputError):
            phase_partition_counts(np.zeros(6), np.zeros((1, 6)), 0.0, 1.0)


class TestDensityBound:
    def test_bound_dominates_estimate(
            self, gaussian_model, sim_config_factory):
        """
        The fitted bound dominates the estimate; at t = 0 the estimate is
        the spatial density at the center
        """
        spec = KernelSpec.limit(1.5)
        backend = ConstantFieldBackend([0.5, 0.0, 0.0])
        cfg = sim_config_factory(horizon=0.5, characteristic_step=0.05)
        curve = delta_monitor(
            backend, spec, gaussian_model, probe_count=4, horizon=0.5,
            cfg=cfg, seed=0
        )

        result = density_bound_monitor(
            backend, spec, gaussian_model, curve, cfg, velocity_points=13,
            time_stride=5
        )

        assert len(result.times) == 3
        assert result.estimate[0] == pytest.approx(
            (2.0 * math.pi) ** -1.5, rel=1e-3)
        assert result.bound[0] == pytest.approx(result.estimate[0], rel=1e-12)
        assert np.all(result.bound >= result.estimate * (1.0 - 1e-12))
        assert not np.any(result.exceeded)
        assert result.constant > 0.0
        np.testing.assert_allclose(result.delta, 0.5 * result.times,
                                   atol=1e-12)

    def test_understated_delta_is_flagged(self, sim_config_factory, caplog):
        """
        A Delta curve that stays at zero while the field carries mass
        towards the probe no longer bounds the spatial density
        """
        model = DensityModel(
            family="gaussian-product", velocity_scale=0.1,
            decay_constant=1.0
        )
        spec = KernelSpec.limit(1.5)
        backend = ConstantFieldBackend([0.3, 0.0, 0.0])
        cfg = sim_config_factory(horizon=1.0, characteristic_step=0.05)
        times = np.array([0.0, 0.5, 1.0])
        curve = DeltaCurve(
            times=times, delta=np.zeros(3),
            field_magnitudes=np.full((3, 1), 0.3), probe_count=1
        )

        result = density_bound_monitor(
            backend, spec, model, curve, cfg,
            spatial_probes=[[1.0, 0.0, 0.0]]
        )

        # Spatial density at x = 1 before the blob drifts towards it
        assert result.estimate[0] == pytest.approx(
            (2.0 * math.pi) ** -1.5 * math.exp(-0.5), rel=1e-3)
        np.testing.assert_allclose(result.bound, result.bound[0])
        np.testing.assert_array_equal(result.exceeded, [False, True, True])
        assert result.estimate[2] > 1.1 * result.bound[2]
        assert "exceeds its Delta bound at 2 of 3 times" in caplog.text
