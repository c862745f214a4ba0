import json

import numpy as np
import pytest

from vlasim.cli import main
from vlasim.config import parse_config
from vlasim.densities import DensityModel
from vlasim.dynamics import SimulationConfig
from vlasim.kernels import KernelSpec


@pytest.fixture(scope="function", autouse=True)
def env_vars(monkeypatch):
    """
    Clear environment variables to prevent user's env vars from
    interfering with tests
    """
    monkeypatch.delenv("VLASIM_LOG", raising=False)


@pytest.fixture(scope="function")
def gaussian_model():
    """
    Standard Gaussian phase-space density with a fixed decay constant
    """
    return DensityModel(
        family="gaussian-product", decay_constant=1.0
    )


@pytest.fixture(scope="function")
def ball_model():
    """
    Uniform unit ball in space with Gaussian velocities
    """
    return DensityModel(
        family="uniform-ball-spatial", spatial_scale=1.0,
        velocity_scale=1.0, decay_constant=1.0
    )


@pytest.fixture(scope="function")
def kernel_factory():
    """
    Factory function for creating kernel specs
    """
    def func(alpha=1.2, sign=1, c=2.0 / 3.0, n=64):
        return KernelSpec(
            alpha=alpha, sign=sign, cutoff_exponent=c, particle_count=n
        )

    return func


@pytest.fixture(scope="function")
def sim_config_factory():
    """
    Factory function for creating simulation configs
    """
    def func(**kwargs):
        kwargs.setdefault("horizon", 1.0)
        return SimulationConfig(**kwargs)

    return func


@pytest.fixture(scope="function")
def config_factory(tmp_path):
    """
    Factory function writing JSON run configs into the temporary directory
    """
    count = [0]

    def func(data, name=None, raw=None):
        count[0] += 1
        path = tmp_path / (name or "config_{}.json".format(count[0]))
        path.write_text(raw if raw is not None else json.dumps(data))
        return path

    return func


@pytest.fixture(scope="function")
def two_body():
    """
    Two particles approaching head-on along the x axis
    """
    return np.array([
        [-0.5, 0.0, 0.0, 0.5, 0.0, 0.0],
        [0.5, 0.0, 0.0, -0.5, 0.0, 0.0]
    ])


@pytest.fixture(scope="function")
def cli(monkeypatch, capsys):
    """
    Run vlasim with the given arguments and environment variables
    and return the output
    """
    def func(args, env=None, include_stderr=False, expect_exit=False):
        if not env:
            env = {}

        system_exit = False
        exit_code = None

        with monkeypatch.context() as monkeypatch_ctx:
            # Monkeypatch environments values for the duration
            # of the CLI call
            for name, val in env.items():
                monkeypatch_ctx.setenv(name, val)

            try:
                main(args)
            except SystemExit as exc:
                if expect_exit:
                    system_exit = True
                    exit_code = exc.code
                else:
                    raise

        if expect_exit:
            assert system_exit, \
                "Expected command to exit, but command succeeded instead"

        stdout, stderr = capsys.readouterr()
        output = stdout + stderr if include_stderr else stdout

        if expect_exit:
            return output, exit_code
        return output

    return func


@pytest.fixture(scope="function")
def experiment_factory():
    """
    Factory function parsing a run config into an ExperimentConfig
    """
    def func(**data):
        return parse_config(json.dumps(data)).experiment

    return func
