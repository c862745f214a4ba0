import logging
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import InputError, IntegrationBlowupError, RangeError
from .kernels import KernelSpec, force_field, pair_potential
from .util import read_json, read_trajectory, write_csv, write_json, \
    write_trajectory

__all__ = (
    "INTEGRATORS", "SimulationConfig", "TrajectoryRecord", "NeighborIndex",
    "default_dt0", "micro_force", "micro_accelerations",
    "min_pair_distance", "substep_depth", "kinetic_energy",
    "potential_energy", "total_energy", "total_momentum", "evolve_micro"
)

logger = logging.getLogger("vlasim")

INTEGRATORS = ("velocity-verlet", "rk4")

# Rows of the (rows, N, 3) displacement block evaluated at once
FORCE_BLOCK_ROWS = 256


def default_dt0(spec, horizon):
    """
    Return min(T/256, 0.05 N^(-c)), or T/256 for the limit kernel
    """
    dt0 = horizon / 256.0
    if spec.is_regularized:
        dt0 = min(dt0, 0.05 * spec.cutoff_radius())
    return dt0


class SimulationConfig(object):
    """
    Step schedule and integrator settings shared by the microscopic and the
    characteristic flows
    """
    __slots__ = (
        "horizon", "dt0", "snapshot_stride", "snapshot_count",
        "substep_trigger_factor", "max_substep_depth", "integrator",
        "characteristic_integrator", "characteristic_step", "cell_list",
        "far_field_cutoff"
    )

    def __init__(
            self, horizon=1.0, dt0=None, snapshot_stride=None,
            snapshot_count=64, substep_trigger_factor=4.0,
            max_substep_depth=12, integrator="velocity-verlet",
            characteristic_integrator="rk4", characteristic_step=None,
            cell_list=False, far_field_cutoff=None):
        """
        :horizon: Length T of the simulated time interval
        :dt0: Base step. None selects 'default_dt0' for the kernel in use.
        :snapshot_stride: Base steps per stored snapshot. None picks the
                          stride giving about 'snapshot_count' snapshots.
        :substep_trigger_factor: Substepping starts once the minimum pair
                                 distance drops below this many cut-off
                                 radii
        :max_substep_depth: Maximum number of step halvings
        :characteristic_step: Largest step of the characteristic
                              integrator, T/256 by default
        :far_field_cutoff: Optional truncation radius of the pair sum.
                           None keeps the exact far field.
        """
        if not horizon > 0.0 or math.isinf(horizon):
            raise InputError("horizon must be positive and finite")
        if dt0 is not None and not dt0 > 0.0:
            raise InputError("dt0 must be positive")
        if snapshot_stride is not None and int(snapshot_stride) < 1:
            raise InputError("snapshot stride must be at least 1")
        if int(snapshot_count) < 1:
            raise InputError("snapshot count must be at least 1")
        if not substep_trigger_factor >= 0.0:
            raise InputError("substep trigger factor must be nonnegative")
        if int(max_substep_depth) < 0:
            raise InputError("max substep depth must be nonnegative")
        if integrator not in INTEGRATORS:
            raise InputError("Unknown integrator '{}'".format(integrator))
        if characteristic_integrator not in INTEGRATORS:
            raise InputError(
                "Unknown characteristic integrator '{}'".format(
                    characteristic_integrator)
            )
        if characteristic_step is not None and not characteristic_step > 0:
            raise InputError("characteristic step must be positive")
        if far_field_cutoff is not None and not far_field_cutoff > 0.0:
            raise InputError("far field cutoff must be positive")

        self.horizon = float(horizon)
        self.dt0 = None if dt0 is None else float(dt0)
        self.snapshot_stride = (
            None if snapshot_stride is None else int(snapshot_stride)
        )
        self.snapshot_count = int(snapshot_count)
        self.substep_trigger_factor = float(substep_trigger_factor)
        self.max_substep_depth = int(max_substep_depth)
        self.integrator = integrator
        self.characteristic_integrator = characteristic_integrator
        self.characteristic_step = (
            None if characteristic_step is None else float(characteristic_step)
        )
        self.cell_list = bool(cell_list)
        self.far_field_cutoff = (
            None if far_field_cutoff is None else float(far_field_cutoff)
        )

    @classmethod
    def from_dict(cls, data, horizon=1.0):
        return cls(horizon=horizon, **data)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__slots__}

    def replace(self, **kwargs):
        """
        Return a copy with the given fields replaced
        """
        data = self.to_dict()
        data.update(kwargs)
        return SimulationConfig(**data)

    def resolved_dt0(self, spec):
        if self.dt0 is not None:
            return self.dt0
        return default_dt0(spec, self.horizon)

    def resolved_characteristic_step(self):
        if self.characteristic_step is not None:
            return self.characteristic_step
        return self.horizon / 256.0

    def schedule(self, spec, t0=0.0):
        """
        Return (step count, step, snapshot stride, snapshot times)

        The step count is rounded up to a multiple of the stride and the step
        shrunk to land exactly on t0 + T. Snapshot times only depend on the
        step count, so flows sharing a schedule share the snapshot grid.
        """
        dt0 = self.resolved_dt0(spec)
        step_count = max(1, int(math.ceil(self.horizon / dt0 - 1e-9)))

        stride = self.snapshot_stride
        if stride is None:
            stride = max(
                1, int(math.ceil(step_count / float(self.snapshot_count)))
            )
        step_count = int(math.ceil(step_count / float(stride))) * stride

        times = t0 + np.linspace(0.0, self.horizon, step_count // stride + 1)
        return step_count, self.horizon / step_count, stride, times


class TrajectoryRecord(object):
    """
    Snapshots of a configuration flow on an increasing time grid
    """
    __slots__ = ("times", "states", "spec", "seed", "config_digest",
                 "diagnostics")

    def __init__(
            self, times, states, spec, seed=0, config_digest=None,
            diagnostics=None):
        """
        :times: Increasing snapshot times
        :states: Array of shape (snapshots, N, 6)
        :spec: KernelSpec of the producing dynamics
        :seed: Seed of the run that produced the record
        :config_digest: Digest of the producing configuration
        """
        times = np.array(times, dtype=float)
        states = np.array(states, dtype=float)

        if times.ndim != 1 or len(times) == 0:
            raise InputError("a trajectory needs at least one snapshot")
        if np.any(np.diff(times) <= 0.0):
            raise InputError("snapshot times must be strictly increasing")
        if states.ndim != 3 or states.shape[2] != 6:
            raise InputError("states must have shape (snapshots, N, 6)")
        if states.shape[0] != len(times):
            raise InputError("one state per snapshot time is required")

        times.setflags(write=False)
        states.setflags(write=False)

        self.times = times
        self.states = states
        self.spec = spec
        self.seed = int(seed)
        self.config_digest = config_digest
        self.diagnostics = dict(diagnostics or {})

    @property
    def particle_count(self):
        return self.states.shape[1]

    @property
    def initial(self):
        return self.states[0]

    @property
    def final(self):
        return self.states[-1]

    def positions(self, i):
        """
        Return the position path (snapshots, 3) of particle 'i'
        """
        return self.states[:, i, :3]

    def velocities(self, i):
        return self.states[:, i, 3:]

    def window_indices(self, t1, t2):
        """
        Return the snapshot indices inside [t1, t2]
        """
        tolerance = 1e-12 * max(1.0, abs(self.times[-1]))
        if t1 > t2:
            raise InputError("window start lies after its end")
        if t1 < self.times[0] - tolerance or t2 > self.times[-1] + tolerance:
            raise RangeError(
                "Window [{}, {}] lies outside the record [{}, {}]".format(
                    t1, t2, self.times[0], self.times[-1])
            )

        return np.nonzero(
            (self.times >= t1 - tolerance) & (self.times <= t2 + tolerance)
        )[0]

    def summary_rows(self):
        """
        Per-snapshot energy, momentum and minimum pair distance
        """
        rows = []
        for time, state in zip(self.times, self.states):
            momentum = total_momentum(state)
            kinetic = kinetic_energy(state)
            potential = potential_energy(self.spec, state)
            rows.append({
                "time": float(time),
                "kinetic_energy": kinetic,
                "potential_energy": potential,
                "total_energy": kinetic + potential,
                "momentum_x": float(momentum[0]),
                "momentum_y": float(momentum[1]),
                "momentum_z": float(momentum[2]),
                "min_pair_distance": min_pair_distance(state[:, :3])
            })
        return rows

    def save(self, path, summary=True):
        """
        Write the binary trajectory, its JSON sidecar and, optionally, the
        summary CSV next to it
        """
        path = Path(path)
        write_trajectory(
            path, self.times, self.states, alpha=self.spec.alpha,
            sign=self.spec.sign, cutoff_exponent=self.spec.cutoff_exponent,
            dt0=self.diagnostics.get("dt", math.nan), seed=self.seed
        )
        write_json(path.with_suffix(".json"), {
            "kernel": self.spec.to_dict(),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "particle_count": self.particle_count,
            "snapshot_count": len(self.times),
            "diagnostics": self.diagnostics
        })
        if summary:
            rows = self.summary_rows()
            write_csv(path.with_suffix(".csv"), list(rows[0].keys()), rows)

    @classmethod
    def from_file(cls, path):
        """
        Load a record written by 'save'
        """
        path = Path(path)
        header, times, states = read_trajectory(path)

        sidecar = path.with_suffix(".json")
        extra = read_json(sidecar) if sidecar.is_file() else {}

        spec = KernelSpec(
            alpha=header["alpha"], sign=header["sign"],
            cutoff_exponent=header["cutoff_exponent"],
            particle_count=extra.get("kernel", {}).get(
                "particle_count", header["particle_count"])
        )
        return cls(
            times=times, states=states, spec=spec, seed=header["seed"],
            config_digest=extra.get("config_digest"),
            diagnostics=extra.get("diagnostics")
        )


class NeighborIndex(object):
    """
    k-d tree over particle positions used for near-pair bookkeeping
    """
    __slots__ = ("positions", "tree")

    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=float)
        self.tree = cKDTree(self.positions)

    def min_distance(self):
        if len(self.positions) < 2:
            return math.inf
        distances, _ = self.tree.query(self.positions, k=2)
        return float(distances[:, 1].min())

    def pairs_within(self, radius):
        """
        Return index pairs (i < j) closer than 'radius', in a fixed order
        """
        pairs = self.tree.query_pairs(radius, output_type="ndarray")
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.intp)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]


def _as_configuration(X):
    X = np.array(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 6:
        raise InputError("a configuration must have shape (N, 6)")
    if len(X) == 0:
        raise InputError("a configuration needs at least one particle")
    if not np.all(np.isfinite(X)):
        raise InputError("configuration contains non-finite values")
    return X


def micro_force(spec, X, i):
    """
    Return (1/N) * sum over j != i of f(Q_i - Q_j), summed in ascending j

    A single particle feels no force.
    """
    X = _as_configuration(X)
    n = len(X)
    if not 0 <= i < n:
        raise InputError("particle index {} out of range".format(i))
    if n < 2:
        return np.zeros(3)

    others = np.delete(X[:, :3], i, axis=0)
    forces = force_field(spec, X[i, :3] - others)
    return forces.sum(axis=0) / n


def _direct_accelerations(spec, Q, exclude_radius=None):
    n = len(Q)
    acc = np.empty((n, 3))
    for start in range(0, n, FORCE_BLOCK_ROWS):
        block = Q[start:start + FORCE_BLOCK_ROWS, np.newaxis, :] - Q
        forces = force_field(spec, block)
        if exclude_radius is not None:
            r2 = np.einsum("ijk,ijk->ij", block, block)
            forces[r2 <= exclude_radius ** 2] = 0.0
        acc[start:start + FORCE_BLOCK_ROWS] = forces.sum(axis=1)
    return acc


def _pair_accelerations(spec, Q, pairs):
    acc = np.zeros_like(Q)
    if len(pairs):
        forces = force_field(spec, Q[pairs[:, 0]] - Q[pairs[:, 1]])
        np.add.at(acc, pairs[:, 0], forces)
        np.add.at(acc, pairs[:, 1], -forces)
    return acc


def near_field_radius(spec, cfg, particle_count):
    """
    Radius of the near field handled through the neighbor index
    """
    return max(
        cfg.substep_trigger_factor * spec.cutoff_radius(),
        float(particle_count) ** (-1.0 / 3.0)
    )


def micro_accelerations(spec, Q, cfg=None, index=None):
    """
    Return the mean-field scaled accelerations of all particles

    Without a neighbor index the pair sum is direct. With an index, pairs
    inside the near-field radius are accumulated from the index and the rest
    by the direct sum; with 'far_field_cutoff' set pairs beyond it are
    dropped.
    """
    Q = np.asarray(Q, dtype=float)
    n = len(Q)
    if n < 2:
        return np.zeros_like(Q)

    if index is None:
        if cfg is not None and cfg.far_field_cutoff is not None:
            index = NeighborIndex(Q)
        else:
            return _direct_accelerations(spec, Q) / n

    if cfg is not None and cfg.far_field_cutoff is not None:
        pairs = index.pairs_within(cfg.far_field_cutoff)
        return _pair_accelerations(spec, Q, pairs) / n

    radius = near_field_radius(
        spec, cfg or SimulationConfig(), n
    )
    near = _pair_accelerations(spec, Q, index.pairs_within(radius))
    far = _direct_accelerations(spec, Q, exclude_radius=radius)
    return (near + far) / n


def min_pair_distance(Q, index=None):
    Q = np.asarray(Q, dtype=float)
    if len(Q) < 2:
        return math.inf
    if index is not None:
        return index.min_distance()
    return float(pdist(Q).min())


def substep_depth(spec, cfg, distance):
    """
    Return the number of step halvings for the given minimum distance

    Zero unless the distance is below trigger * N^(-c); otherwise
    ceil(log2(trigger * N^(-c) / distance)) + 1, capped by the maximum depth.
    """
    trigger = cfg.substep_trigger_factor * spec.cutoff_radius()
    if cfg.max_substep_depth == 0 or not distance < trigger:
        return 0
    if distance <= 0.0:
        return cfg.max_substep_depth

    depth = int(math.ceil(math.log2(trigger / distance))) + 1
    return min(cfg.max_substep_depth, depth)


def kinetic_energy(X):
    X = np.asarray(X, dtype=float)
    return 0.5 * float(np.sum(X[:, 3:] ** 2))


def potential_energy(spec, X):
    """
    Return (1/N) * sum over pairs i < j of U(|Q_i - Q_j|)
    """
    X = np.asarray(X, dtype=float)
    if len(X) < 2:
        return 0.0
    return float(np.sum(pair_potential(spec, pdist(X[:, :3])))) / len(X)


def total_energy(spec, X):
    return kinetic_energy(X) + potential_energy(spec, X)


def total_momentum(X):
    X = np.asarray(X, dtype=float)
    return X[:, 3:].sum(axis=0)


def _verlet_step(q, v, acc, dt, accelerate):
    v_half = v + 0.5 * dt * acc
    q = q + dt * v_half
    acc = accelerate(q)
    return q, v_half + 0.5 * dt * acc, acc


def _rk4_step(q, v, acc, dt, accelerate):
    k1q, k1v = v, acc
    k2q = v + 0.5 * dt * k1v
    k2v = accelerate(q + 0.5 * dt * k1q)
    k3q = v + 0.5 * dt * k2v
    k3v = accelerate(q + 0.5 * dt * k2q)
    k4q = v + dt * k3v
    k4v = accelerate(q + dt * k3q)

    q = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    v = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return q, v, accelerate(q)


def evolve_micro(spec, X0, cfg, seed=0, t0=0.0, config_digest=None):
    """
    Evolve the interacting N-particle system over [t0, t0 + T]

    Base steps are halved adaptively while the minimum pair distance is below
    the substep trigger. Snapshots are taken every 'stride' base steps.

    :raises IntegrationBlowupError: if the state stops being finite
    """
    X0 = _as_configuration(X0)
    n = len(X0)
    if n != spec.particle_count:
        logger.debug(
            "Kernel particle count %d differs from configuration size %d",
            spec.particle_count, n
        )

    step_count, dt, stride, times = cfg.schedule(spec, t0=t0)
    step = _verlet_step if cfg.integrator == "velocity-verlet" else _rk4_step

    def build_index(q):
        return NeighborIndex(q) if cfg.cell_list else None

    def accelerate(q):
        return micro_accelerations(spec, q, cfg=cfg, index=build_index(q))

    logger.info(
        "Evolving %d particles over %d steps of %g (stride %d)",
        n, step_count, dt, stride
    )

    q, v = X0[:, :3].copy(), X0[:, 3:].copy()
    acc = accelerate(q)
    states = [X0.copy()]
    substep_counts = {}
    global_min = min_pair_distance(q, build_index(q))

    for k in range(step_count):
        distance = min_pair_distance(q, build_index(q))
        global_min = min(global_min, distance)
        depth = substep_depth(spec, cfg, distance)
        substep_counts[depth] = substep_counts.get(depth, 0) + 1

        substeps = 2 ** depth
        for _ in range(substeps):
            q, v, acc = step(q, v, acc, dt / substeps, accelerate)
            if depth:
                global_min = min(
                    global_min, min_pair_distance(q, build_index(q))
                )

        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            time = t0 + (k + 1) * dt
            raise IntegrationBlowupError(
                "Non-finite state at t={:g}".format(time), time=time
            )

        if (k + 1) % stride == 0:
            states.append(np.concatenate([q, v], axis=1))

    global_min = min(global_min, min_pair_distance(q, build_index(q)))

    diagnostics = {
        "dt": dt,
        "step_count": step_count,
        "snapshot_stride": stride,
        "substep_counts": {
            str(depth): count
            for depth, count in sorted(substep_counts.items())
        },
        "min_pair_distance": global_min,
        "cutoff_engaged": bool(global_min < spec.cutoff_radius()),
        "far_field_truncated": cfg.far_field_cutoff is not None
    }

    return TrajectoryRecord(
        times=times, states=np.stack(states), spec=spec, seed=seed,
        config_digest=config_digest, diagnostics=diagnostics
    )
