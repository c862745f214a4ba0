import copy
import json
import logging
from collections import namedtuple

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from .densities import DensityModel
from .dynamics import SimulationConfig
from .errors import ConfigParseError, ConfigValidationError, InputError, \
    VlasimError
from .experiments import EXPERIMENTS, ExperimentConfig, LEMMA3_ITEMS
from .meanfield import BACKEND_KINDS
from .util import digest

__all__ = (
    "ConfigBundle", "parse_config", "load_config", "load_density",
    "DEFAULT_N_GRID", "CONFIG_SCHEMA"
)

logger = logging.getLogger("vlasim")

DEFAULT_N_GRID = [64, 128, 256, 512, 1024]

# JSON Schema "number" and "integer" never match true/false
NUMBER = {"type": "number"}
INTEGER = {"type": "integer"}
BOOLEAN = {"type": "boolean"}
OPTIONAL_NUMBER = {"type": ["number", "null"]}
OPTIONAL_INTEGER = {"type": ["integer", "null"]}
NUMBER_LIST = {"type": "array", "items": NUMBER}
PHASE_POINT = {
    "type": "array", "items": NUMBER, "minItems": 6, "maxItems": 6
}


def _section(properties):
    return {
        "type": "object",
        "properties": properties,
        "additionalProperties": False
    }


SIMULATION_SCHEMA = _section({
    "dt0": OPTIONAL_NUMBER,
    "snapshot_stride": OPTIONAL_INTEGER,
    "snapshot_count": INTEGER,
    "substep_trigger_factor": NUMBER,
    "max_substep_depth": INTEGER,
    "integrator": {"type": "string"},
    "characteristic_integrator": {"type": "string"},
    "characteristic_step": OPTIONAL_NUMBER,
    "cell_list": BOOLEAN,
    "far_field_cutoff": OPTIONAL_NUMBER
})

DENSITY_SCHEMA = _section({
    "family": {"type": "string"},
    "center": NUMBER_LIST,
    "spatial_scale": NUMBER,
    "velocity_scale": NUMBER,
    "tail_exponent": OPTIONAL_NUMBER,
    "decay_exponent": NUMBER,
    "decay_constant": OPTIONAL_NUMBER
})

BACKEND_SCHEMA = _section({
    "kind": {"enum": list(BACKEND_KINDS)},
    "reference_count": OPTIONAL_INTEGER,
    "smoothing": OPTIONAL_NUMBER,
    "frozen": BOOLEAN,
    "reference_steps": INTEGER,
    "radial_bins": INTEGER,
    "field": {
        "type": "array", "items": NUMBER, "minItems": 3, "maxItems": 3
    }
})

LEMMA3_SCHEMA = _section({
    "item": {"enum": list(LEMMA3_ITEMS)},
    "dx_grid": NUMBER_LIST,
    "dv_grid": NUMBER_LIST,
    "windows": {"type": ["array", "null"]},
    "samples": INTEGER,
    "target": PHASE_POINT
})

CONFIG_SCHEMA = dict(
    _section({
        "experiment": {"enum": list(EXPERIMENTS + ("simulate",))},
        "alpha": NUMBER,
        "sign": INTEGER,
        "c": OPTIONAL_NUMBER,
        "c1": OPTIONAL_NUMBER,
        "c2": OPTIONAL_NUMBER,
        "sigma": NUMBER,
        "n_grid": {"type": "array", "items": INTEGER},
        "ensemble_size": INTEGER,
        "horizon": NUMBER,
        "seed": INTEGER,
        "blowup_tolerance": NUMBER,
        "particles": OPTIONAL_INTEGER,
        "initial_state": {
            "type": ["array", "null"], "items": PHASE_POINT
        },
        "probe_count": INTEGER,
        "exterior_probes": {"type": "array", "items": PHASE_POINT},
        "partition": BOOLEAN,
        "sigma_sensitivity": NUMBER_LIST,
        "simulation": SIMULATION_SCHEMA,
        "density": DENSITY_SCHEMA,
        "backend": BACKEND_SCHEMA,
        "lemma3": LEMMA3_SCHEMA
    }),
    required=["experiment"]
)

SECTIONS = ("simulation", "density", "backend", "lemma3")

CONFIG_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)
DENSITY_VALIDATOR = Draft202012Validator(DENSITY_SCHEMA)


class ConfigBundle(namedtuple(
        "ConfigBundle", ("experiment", "simulation", "data", "digest"))):
    """
    Validated configuration with every default materialised

    'data' is the resolved JSON object recorded in the manifest and
    'digest' the SHA-256 of its canonical serialisation.
    """
    __slots__ = ()

    @property
    def seed(self):
        return self.experiment.seed


def _error_field(error, prefix=()):
    """
    Dotted name of the config field a schema error points at

    List indices are dropped so that an invalid N grid entry reports
    'n_grid'.
    """
    path = list(prefix)
    for part in error.absolute_path:
        if not isinstance(part, str):
            break
        path.append(part)

    if error.validator == "additionalProperties":
        known = error.schema.get("properties", {})
        path.append(sorted(
            key for key in error.instance if key not in known)[0])
    elif error.validator == "required":
        path.append(next(
            key for key in error.validator_value
            if key not in error.instance))

    return ".".join(path)


def _validate(validator, data, prefix=()):
    error = best_match(validator.iter_errors(data))
    if error is not None:
        field = _error_field(error, prefix=prefix)
        raise ConfigValidationError(
            "Invalid value for '{}': {}".format(field, error.message),
            field
        )


def _default_c(experiment, alpha, sigma):
    if experiment == "thm1":
        return 2.0 / 3.0 if alpha != 2.0 else 7.0 / 18.0 - sigma
    if experiment == "mf-compare":
        return 2.0 / 3.0
    return None


def _default_backend_kind(experiment, alpha):
    if experiment == "lemma3":
        return "zero-field"
    if alpha == 2.0:
        return "radial-exact"
    return "ensemble-kde"


def _default_density(alpha):
    if alpha == 2.0:
        return {
            "family": "uniform-ball-spatial",
            "center": [0.0, 0.0, 0.0],
            "spatial_scale": 1.0,
            "velocity_scale": 1.0,
            "tail_exponent": None,
            "decay_exponent": 0.5,
            "decay_constant": None
        }
    return {
        "family": "gaussian-product",
        "center": [0.0, 0.0, 0.0],
        "spatial_scale": 1.0,
        "velocity_scale": 1.0,
        "tail_exponent": None,
        "decay_exponent": 0.5,
        "decay_constant": None
    }


def _resolve(data):
    """
    Fill in every default of a raw config object
    """
    experiment = data["experiment"]
    alpha = float(data.get("alpha", 1.2))
    sigma = float(data.get("sigma", 0.1))
    horizon = float(data.get("horizon", 1.0))
    is_mode_i = experiment == "thm1" and alpha == 2.0

    resolved = {
        "experiment": experiment,
        "alpha": alpha,
        "sign": 1,
        "c": _default_c(experiment, alpha, sigma),
        "c1": 2.0 / 3.0 if experiment == "thm2" else None,
        "c2": 2.0 if experiment in ("thm2", "min-dist") else None,
        "sigma": sigma,
        "n_grid": [16, 32, 64] if is_mode_i else list(DEFAULT_N_GRID),
        "ensemble_size": 64,
        "horizon": horizon,
        "seed": 0,
        "blowup_tolerance": 0.05,
        "particles": None,
        "initial_state": None,
        "probe_count": 64,
        "exterior_probes": [],
        "partition": True,
        "sigma_sensitivity": [0.05, 0.1, 0.2]
    }
    resolved.update({
        key: copy.deepcopy(value) for key, value in data.items()
        if key not in SECTIONS
    })

    simulation = SimulationConfig(horizon=horizon).to_dict()
    del simulation["horizon"]
    simulation.update(data.get("simulation", {}))

    density = _default_density(alpha)
    density.update(data.get("density", {}))

    backend = {
        "kind": _default_backend_kind(experiment, alpha),
        "reference_count": None,
        "smoothing": None,
        "frozen": False,
        "reference_steps": 256,
        "radial_bins": 256,
        "field": [0.0, 0.0, 0.0]
    }
    backend.update(data.get("backend", {}))

    lemma3 = {
        "item": "ii",
        "dx_grid": [0.05, 0.089, 0.158, 0.281, 0.5],
        "dv_grid": [0.5, 1.0, 2.0, 4.0],
        "windows": None,
        "samples": 10000,
        "target": [0.0] * 6
    }
    lemma3.update(data.get("lemma3", {}))

    resolved.update({
        "simulation": simulation,
        "density": density,
        "backend": backend,
        "lemma3": lemma3
    })
    return resolved


def _validate_sections(resolved):
    backend = resolved["backend"]
    if backend["kind"] == "radial-exact" and resolved["alpha"] != 2.0:
        raise ConfigValidationError(
            "radial-exact backends need alpha = 2", "backend.kind")
    if backend["frozen"] and backend["kind"] != "radial-exact":
        raise ConfigValidationError(
            "Only radial-exact backends can be frozen", "backend.frozen")

    experiment = resolved["experiment"]
    if experiment == "simulate":
        state = resolved["initial_state"]
        if state is None and resolved["particles"] is None:
            raise ConfigValidationError(
                "simulate needs 'particles' or 'initial_state'", "particles")
        if resolved["particles"] is not None and resolved["particles"] < 1:
            raise ConfigValidationError(
                "particles must be at least 1", "particles")

    for section, build in (
            ("simulation", lambda data: SimulationConfig(
                horizon=resolved["horizon"], **data)),
            ("density", DensityModel.from_dict)):
        try:
            build(resolved[section])
        except InputError as exc:
            raise ConfigValidationError(str(exc), section)


def parse_config(text, overrides=None):
    """
    Parse and validate a JSON run config

    :param overrides: Top-level values taking precedence over the file,
                      such as a command-line seed

    :raises ConfigParseError: for malformed JSON, with line and column
    :raises ConfigValidationError: naming the offending field
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(
            "Invalid JSON: {}".format(exc.msg),
            line=exc.lineno, column=exc.colno
        )

    if not isinstance(data, dict):
        raise ConfigValidationError(
            "A run config must be a JSON object", "")

    data.update({
        key: value for key, value in (overrides or {}).items()
        if value is not None
    })

    _validate(CONFIG_VALIDATOR, data)

    resolved = _resolve(data)
    _validate_sections(resolved)

    try:
        experiment = ExperimentConfig(**resolved)
    except ConfigValidationError:
        raise
    except (InputError, VlasimError) as exc:
        raise ConfigValidationError(str(exc), "simulation")

    logger.info(
        "Resolved %s config with seed %d", resolved["experiment"],
        resolved["seed"]
    )
    return ConfigBundle(
        experiment=experiment, simulation=experiment.simulation,
        data=resolved, digest=digest(resolved)
    )


def load_config(path, overrides=None):
    """
    Read and parse the run config at 'path'
    """
    with open(str(path), "r") as file_:
        return parse_config(file_.read(), overrides=overrides)


def load_density(path=None):
    """
    Build the DensityModel of a config's 'density' section, ignoring the
    rest of the file. Without a path the default Gaussian model is used.
    """
    data = {}
    if path is not None:
        with open(str(path), "r") as file_:
            text = file_.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParseError(
                "Invalid JSON: {}".format(exc.msg),
                line=exc.lineno, column=exc.colno
            )
        if not isinstance(data, dict):
            raise ConfigValidationError(
                "A run config must be a JSON object", "")
        data = data.get("density", {})

    _validate(DENSITY_VALIDATOR, data, prefix=("density",))
    try:
        return DensityModel.from_dict(data)
    except InputError as exc:
        raise ConfigValidationError(str(exc), "density")
