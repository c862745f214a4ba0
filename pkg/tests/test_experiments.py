import math

import numpy as np
import pytest
from scipy import stats

from vlasim.chaos import Observable
from vlasim.densities import DensityModel
from vlasim.errors import ConfigValidationError, InputError
from vlasim.experiments import (ScalingResult, aggregate_runs,
                                capture_probability_free_flight,
                                fit_exponent, lln_scaling, run_experiment,
                                run_lemma3, run_mf_compare, run_min_dist,
                                run_thm1, run_thm2, wilson_interval,
                                write_result)
from vlasim.util import read_csv, read_json

GAUSSIAN = {"family": "gaussian-product", "decay_constant": 1.0}


class TestFitExponent:
    def test_power_law(self):
        """
        An exact power law is fitted with zero standard error
        """
        fit = fit_exponent([(n, 3.0 * n ** -0.5) for n in (64, 128, 256)])

        assert fit.slope == pytest.approx(-0.5)
        assert fit.stderr == pytest.approx(0.0, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(3.0))
        assert fit.used == 3
        assert fit.excluded == 0

    def test_constant_values(self):
        fit = fit_exponent([(16, 0.2), (32, 0.2), (64, 0.2)])

        assert fit.slope == 0.0
        assert fit.stderr == 0.0

    def test_excludes_non_positive(self):
        """
        Zero rows are dropped and counted
        """
        fit = fit_exponent(
            [(8, 0.0), (16, 1.0), (32, 0.5), (64, 0.25)])

        assert fit.slope == pytest.approx(-1.0)
        assert fit.excluded == 1

    def test_too_few_rows(self):
        with pytest.raises(InputError):
            fit_exponent([(16, 1.0), (32, 0.0), (64, 0.5)])


class TestWilsonInterval:
    def test_no_trials(self):
        assert wilson_interval(0, 0) == (None, None)

    def test_contains_proportion(self):
        low, high = wilson_interval(5, 10)

        assert low < 0.5 < high
        assert 0.0 < low and high < 1.0

    def test_no_successes(self):
        """
        The Wilson interval of 0/n starts at 0 but is not degenerate
        """
        low, high = wilson_interval(0, 20)

        assert low == pytest.approx(0.0, abs=1e-12)
        assert high > 0.0


class TestScalingResult:
    def test_rows_sorted_and_fitted(self):
        rows = [
            {"n": n, "runs": 8, "blowups": 0, "max_sup": n ** -0.25}
            for n in (256, 64, 128)
        ]
        result = ScalingResult("thm1", "max_sup", rows, [])

        assert [row["n"] for row in result.rows] == [64, 128, 256]
        assert result.slope == pytest.approx(-0.25)

    def test_blowup_fraction(self):
        """
        Blowups are a fraction of all attempted runs
        """
        rows = [
            {"n": 16, "runs": 6, "blowups": 2, "max_sup": 0.1},
            {"n": 32, "runs": 8, "blowups": 0, "max_sup": 0.1}
        ]
        result = ScalingResult("thm1", "max_sup", rows, [])

        assert result.blowup_fraction == pytest.approx(2.0 / 16.0)
        # Only two rows: no slope
        assert result.fit is None
        assert result.to_dict()["fit"] is None

    def test_write_result(self, tmp_path):
        rows = [{"n": n, "runs": 1, "blowups": 0, "gap": 1.0 / n}
                for n in (2, 4, 8)]
        runs = [{"n": 2, "run": 0, "gap": 0.5}, {"n": 4, "probe": 1}]
        write_result(
            ScalingResult("mf-compare", "gap", rows, runs), tmp_path)

        result = read_json(tmp_path / "result.json")
        assert result["runs"] == "runs.csv"
        assert result["fit"]["slope"] == pytest.approx(-1.0)

        stored = read_csv(tmp_path / "runs.csv")
        assert list(stored[0]) == ["gap", "n", "probe", "run"]
        assert stored[1]["gap"] == ""


class TestThm2:
    def test_equal_cutoffs_do_not_deviate(self, experiment_factory):
        """
        With c1 = c2 both dynamics are the same and never deviate
        """
        cfg = experiment_factory(
            experiment="thm2", c1=2.0 / 3.0, c2=2.0 / 3.0,
            n_grid=[4, 8, 16], ensemble_size=8, horizon=0.1,
            density=GAUSSIAN
        )
        result = run_thm2(cfg)

        assert len(result.runs) == 24
        for row in result.rows:
            assert row["runs"] == 8
            assert row["blowups"] == 0
            assert row["max_sup"] == 0.0
            assert row["exceed_fraction"] == 0.0
        # Zero deviations leave nothing to fit
        assert result.fit is None
        assert set(result.extra) == {
            "cutoff_engagement", "min_pair_distance"}

    def test_c2_below_c1(self, experiment_factory):
        with pytest.raises(ConfigValidationError) as exc:
            experiment_factory(experiment="thm2", c1=1.0, c2=0.8)

        assert exc.value.field == "c2"


class TestThm1:
    def test_free_flight(self, experiment_factory):
        """
        Without interaction the particle and lifted flows are both free
        flight and agree up to rounding
        """
        cfg = experiment_factory(
            experiment="thm1", sign=0, n_grid=[4, 8, 16], ensemble_size=8,
            horizon=0.1, density=GAUSSIAN, backend={"kind": "zero-field"}
        )
        result = run_thm1(cfg)

        assert result.extra["mode"] == "ii"
        for row in result.rows:
            assert row["blowups"] == 0
            assert row["max_sup"] < 1e-10
            assert row["exceed_fraction"] == 0.0

        assert set(result.extra["sigma_sensitivity"]) == {
            "0.05", "0.1", "0.2"}
        assert set(result.extra["bad_fraction"]) == {"4", "8", "16"}
        # Nothing deviates, so no stopping time fires
        assert all(run["tau_good"] is None for run in result.runs)

    def test_bad_share_does_not_grow(self, experiment_factory):
        """
        The share of bad particles at each N stays inside the two-sided
        binomial band of the next smaller N
        """
        cfg = experiment_factory(
            experiment="thm1", sign=0, n_grid=[16, 32, 64],
            ensemble_size=16, horizon=0.5, density=GAUSSIAN,
            backend={"kind": "zero-field"}
        )
        result = run_thm1(cfg)

        counts = []
        for n in (16, 32, 64):
            runs = [run for run in result.runs if run["n"] == n]
            counts.append(
                (sum(run["bad_count"] for run in runs), len(runs) * n))

        assert counts[0][0] > 0
        for (bad, total), (larger_bad, larger_total) in zip(
                counts, counts[1:]):
            _, high = wilson_interval(bad, total)
            assert larger_bad / float(larger_total) <= high

    def test_alpha_range(self, experiment_factory):
        """
        Between 4/3 and 2 no mode applies
        """
        with pytest.raises(ConfigValidationError) as exc:
            experiment_factory(experiment="thm1", alpha=1.5)

        assert exc.value.field == "alpha"


class TestMinDist:
    @pytest.fixture(scope="function")
    def cfg(self, experiment_factory):
        return experiment_factory(
            experiment="min-dist", n_grid=[4, 8, 16], ensemble_size=8,
            horizon=0.1, density=GAUSSIAN
        )

    def test_rows(self, cfg):
        result = run_min_dist(cfg)

        for row in result.rows:
            assert row["min_pair_distance"] > 0.0
            assert row["q25"] <= row["min_pair_distance"] <= row["q75"]
            assert row["cutoff_radius"] == pytest.approx(row["n"] ** -2.0)
        assert result.fit is not None

    def test_threads_do_not_change_results(self, cfg):
        """
        Seeds follow the run index, not the worker
        """
        serial = run_experiment(cfg, threads=1)
        parallel = run_experiment(cfg, threads=2)

        assert serial.runs == parallel.runs
        assert serial.rows == parallel.rows

    def test_keep_trajectories(self, cfg, tmp_path):
        run_min_dist(cfg, keep_trajectories=tmp_path)

        assert (tmp_path / "n4_run0.bin").is_file()
        assert (tmp_path / "n16_run7.bin").is_file()

    def test_aggregate_stored_runs(self, cfg, tmp_path):
        """
        Re-aggregating runs.csv reproduces the stored summary
        """
        result = run_min_dist(cfg)
        write_result(result, tmp_path)

        rebuilt = aggregate_runs("min-dist", read_csv(tmp_path / "runs.csv"))

        assert len(rebuilt.rows) == 3
        for stored, row in zip(result.rows, rebuilt.rows):
            assert row["n"] == stored["n"]
            assert row["min_pair_distance"] == pytest.approx(
                stored["min_pair_distance"])
            assert row["exceed_fraction"] == stored["exceed_fraction"]

    def test_aggregate_unsupported(self):
        with pytest.raises(InputError):
            aggregate_runs("lemma3", [])


class TestCaptureProbability:
    def test_zero_horizon_is_ball_mass(self, gaussian_model):
        """
        Without motion a point is captured iff it starts inside the ball
        """
        assert capture_probability_free_flight(
            gaussian_model, 0.5, 0.0) == pytest.approx(
                stats.chi(3).cdf(0.5), rel=1e-6)

    def test_grows_with_horizon(self, gaussian_model):
        values = [
            capture_probability_free_flight(gaussian_model, 0.3, horizon)
            for horizon in (0.0, 0.5, 1.0, 2.0)
        ]

        assert values == sorted(values)
        assert values[-1] < 1.0

    def test_needs_centered_gaussian(self):
        model = DensityModel(
            family="heavy-tail-velocity", tail_exponent=1.0,
            decay_constant=1.0
        )

        with pytest.raises(InputError):
            capture_probability_free_flight(model, 0.1, 1.0)


class TestLemma3:
    def test_matches_free_flight_oracle(self, experiment_factory):
        """
        Without a field the Monte-Carlo capture probability agrees with
        the closed-form value
        """
        samples = 20000
        cfg = experiment_factory(
            experiment="lemma3", n_grid=[64], horizon=1.0,
            density=GAUSSIAN, simulation={"characteristic_step": 0.1},
            lemma3={"item": "ii", "samples": samples,
                    "dx_grid": [0.25, 0.5, 1.0]}
        )
        result = run_lemma3(cfg)

        oracle = result.extra["oracle"]
        assert [entry["dx"] for entry in oracle] == [0.25, 0.5, 1.0]
        for cell, entry in zip(result.extra["cells"], oracle):
            p = entry["probability"]
            assert cell["probability"] == pytest.approx(
                p, abs=4.0 * math.sqrt(p * (1.0 - p) / samples) + 2e-3)
            low, high = cell["ci"]
            assert low <= cell["probability"] <= high

        assert [row["n"] for row in result.rows] == [0.25, 0.5, 1.0]
        assert result.extra["fits"]["0.0-1.0:inf"] is not None
        assert result.slope > 0.0

    def test_item_i_bound_ratio(self, experiment_factory):
        """
        Item (i) reports one cell per (dv, dx) pair with its bound ratio
        and no scaling rows
        """
        cfg = experiment_factory(
            experiment="lemma3", n_grid=[64], horizon=0.5,
            density=GAUSSIAN, simulation={"characteristic_step": 0.1},
            lemma3={"item": "i", "samples": 2000, "dx_grid": [0.2, 0.4],
                    "dv_grid": [1.0, 2.0]}
        )
        result = run_lemma3(cfg)

        cells = result.extra["cells"]
        assert len(cells) == 4
        assert all("bound_ratio" in cell for cell in cells)
        assert "oracle" not in result.extra
        assert result.rows == []

    def test_unknown_item(self, experiment_factory):
        with pytest.raises(ConfigValidationError) as exc:
            experiment_factory(experiment="lemma3", lemma3={"item": "iv"})

        assert exc.value.field == "lemma3.item"


class TestMfCompare:
    def test_flat_ball_has_no_gap(self, experiment_factory):
        """
        A flat ball has no density gradient, so the regularized and the
        limit characteristics coincide inside and outside the support
        """
        cfg = experiment_factory(
            experiment="mf-compare", alpha=2.0, n_grid=[8, 16, 32],
            horizon=0.5, probe_count=8,
            backend={"kind": "radial-exact", "frozen": True},
            simulation={"characteristic_step": 0.05},
            exterior_probes=[[3.0, 0.0, 0.0, 0.0, 0.0, 0.0]]
        )
        result = run_mf_compare(cfg)

        for row in result.rows:
            assert row["runs"] == 9
            assert row["gap"] == pytest.approx(0.0, abs=1e-12)
            assert row["exterior_gap"] == pytest.approx(0.0, abs=1e-12)
            assert not row["cutoff_dominated"]
        assert result.extra["reference_slope"] == pytest.approx(-4.0 / 3.0)
        assert sum(run["exterior"] for run in result.runs) == 3

    def test_gaussian_gap_follows_cutoff(self, experiment_factory):
        """
        For a smooth density the gap is linear in the cut-off correction,
        which shrinks like N^(-2c)
        """
        cfg = experiment_factory(
            experiment="mf-compare", alpha=2.0, n_grid=[64, 128, 256],
            horizon=0.5, probe_count=16, density=GAUSSIAN,
            backend={"kind": "radial-exact", "frozen": True},
            simulation={"characteristic_step": 0.05}
        )
        result = run_mf_compare(cfg)

        assert all(row["gap"] > 0.0 for row in result.rows)
        assert result.slope == pytest.approx(
            result.extra["reference_slope"], abs=0.15)


class TestLlnScaling:
    def test_half_space_rate(self, gaussian_model):
        """
        Fluctuations of an indicator mean decay like N^(-1/2)
        """
        result = lln_scaling(
            Observable("half-space"), gaussian_model,
            [64, 256, 1024, 4096], 400, seed=3
        )

        assert result.statistic == "median"
        assert result.extra["exact_expectation"]
        assert result.slope == pytest.approx(-0.5, abs=0.15)

    def test_needs_observable(self, gaussian_model):
        with pytest.raises(InputError):
            lln_scaling(np.mean, gaussian_model, [4, 8, 16], 8, seed=0)
