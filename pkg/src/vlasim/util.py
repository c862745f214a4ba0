import csv
import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = (
    "derive_seed", "derive_rng", "canonical_json", "digest", "to_jsonable",
    "write_json", "read_json", "write_csv", "read_csv", "write_trajectory",
    "read_trajectory", "run_parallel"
)

logger = logging.getLogger("vlasim")

TRAJECTORY_MAGIC = b"VLTR"
TRAJECTORY_STRUCT_HEADER = "<4sQQdqddQ"


def _seed_key(key):
    """
    Map a seed key to a 32-bit integer. Strings are hashed so that stream
    tags such as "reference" stay stable across interpreter runs.
    """
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise InputError("seed keys must be nonnegative")
        return int(key)
    if isinstance(key, str):
        return int.from_bytes(
            hashlib.sha256(key.encode("utf-8")).digest()[:4], "little"
        )
    raise InputError("Unsupported seed key {!r}".format(key))


def derive_seed(master, *keys):
    """
    Derive an independent SeedSequence from a master seed and a path of
    keys (run index, N, stream tag...)
    """
    if isinstance(master, np.random.SeedSequence):
        keys = tuple(master.spawn_key) + tuple(
            _seed_key(key) for key in keys)
        return np.random.SeedSequence(master.entropy, spawn_key=keys)

    return np.random.SeedSequence(
        _seed_key(master), spawn_key=tuple(_seed_key(key) for key in keys)
    )


def derive_rng(seed):
    """
    Return a numpy Generator for an int, a SeedSequence, a
    (master, *keys) tuple or an existing Generator
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        master, keys = seed[0], seed[1:]
        return np.random.default_rng(derive_seed(master, *keys))
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)

    return np.random.default_rng(derive_seed(seed))


def to_jsonable(obj):
    """
    Convert numpy values and containers into plain JSON types. Non-finite
    floats become None.
    """
    if isinstance(obj, dict):
        return {str(key): to_jsonable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(value) for value in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)

    return obj


def canonical_json(obj):
    return json.dumps(
        to_jsonable(obj), sort_keys=True, separators=(",", ":")
    )


def digest(obj):
    """
    Return the SHA-256 hex digest of the canonical serialization
    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path, obj):
    with open(str(path), "w") as file_:
        json.dump(to_jsonable(obj), file_, sort_keys=True, indent=2)
        file_.write("\n")


def read_json(path):
    with open(str(path), "r") as file_:
        return json.load(file_)


def write_csv(path, fieldnames, rows):
    """
    Write a list of dicts as CSV with a header row
    """
    with open(str(path), "w", newline="") as file_:
        writer = csv.DictWriter(
            file_, fieldnames=fieldnames, lineterminator="\n"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({
                key: ("" if row.get(key) is None else row.get(key))
                for key in fieldnames
            })


def read_csv(path):
    with open(str(path), "r", newline="") as file_:
        return list(csv.DictReader(file_))


def write_trajectory(
        path, times, states, alpha, sign, cutoff_exponent, dt0, seed):
    """
    Write snapshots into the little-endian trajectory binary format

    The header is followed by one float64 time and N*6 float64 values per
    snapshot. The limit kernel is stored with c = NaN.
    """
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[2] != 6:
        raise InputError("states must have shape (snapshots, N, 6)")
    if len(times) != len(states):
        raise InputError("times and states must have the same length")

    snapshot_count, particle_count = states.shape[0], states.shape[1]
    header = struct.pack(
        TRAJECTORY_STRUCT_HEADER,
        TRAJECTORY_MAGIC, particle_count, snapshot_count, float(alpha),
        int(sign),
        math.nan if cutoff_exponent is None else float(cutoff_exponent),
        float(dt0), int(seed)
    )

    blocks = np.concatenate(
        [times[:, np.newaxis], states.reshape(snapshot_count, -1)], axis=1
    )

    with open(str(path), "wb") as file_:
        file_.write(header)
        file_.write(blocks.astype("<f8").tobytes())


def read_trajectory(path):
    """
    Read a trajectory binary and return (header, times, states)
    """
    with open(str(path), "rb") as file_:
        data = file_.read()

    header_size = struct.calcsize(TRAJECTORY_STRUCT_HEADER)
    if len(data) < header_size:
        raise SyntaxError("Truncated trajectory header")

    (magic, particle_count, snapshot_count, alpha, sign, cutoff_exponent,
     dt0, seed) = struct.unpack(TRAJECTORY_STRUCT_HEADER, data[:header_size])

    if magic != TRAJECTORY_MAGIC:
        raise SyntaxError("Invalid file magic number")

    row_size = 1 + 6 * particle_count
    blocks = np.frombuffer(data[header_size:], dtype="<f8")
    if blocks.size != snapshot_count * row_size:
        raise SyntaxError(
            "Trajectory body has {} values, expected {}".format(
                blocks.size, snapshot_count * row_size)
        )
    blocks = blocks.reshape(snapshot_count, row_size).astype(float)

    header = {
        "particle_count": particle_count,
        "snapshot_count": snapshot_count,
        "alpha": alpha,
        "sign": sign,
        "cutoff_exponent": (
            None if math.isnan(cutoff_exponent) else cutoff_exponent
        ),
        "dt0": dt0,
        "seed": seed
    }

    return (
        header, blocks[:, 0].copy(),
        blocks[:, 1:].reshape(snapshot_count, particle_count, 6)
    )


def run_parallel(func, tasks, threads=1):
    """
    Apply 'func' to every task and return the results in task order

    With more than one worker the tasks run in a process pool; the result
    order never depends on the worker count.
    """
    tasks = list(tasks)
    if threads is None or threads <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]

    logger.info("Running %d tasks on %d workers", len(tasks), threads)
    with ProcessPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, tasks))
