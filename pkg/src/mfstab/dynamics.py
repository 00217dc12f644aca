"""Mean-field N-particle Hamiltonian flow on T^3 x R^3.

    dX_i/dt = V_i,    dV_i/dt = (1/N) sum_j K(X_i - X_j)

integrated with fixed-step velocity Verlet.  Close encounters are never
softened: a trajectory whose minimum pair distance drops below
``min_pair_distance_floor`` is rejected, and a pair whose energy drift
exceeds tolerance is rerun with the step halved.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .potential import PotentialSpec, SingularityError, wrap_positions

log = logging.getLogger(__name__)


@dataclass
class PhaseState:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float, copy=True)
        v = np.array(self.velocities, dtype=float, copy=True)
        if x.ndim != 2 or x.shape[1] != 3 or v.shape != x.shape:
            raise ValueError("positions and velocities must both have shape (n, 3)")
        if len(x) < 1:
            raise ValueError("empty state")
        self.positions = np.ascontiguousarray(wrap_positions(x))
        self.velocities = np.ascontiguousarray(v)

    @property
    def n(self) -> int:
        return len(self.positions)

    def copy(self) -> "PhaseState":
        return PhaseState(self.positions, self.velocities)

    def kinetic(self) -> float:
        return 0.5 * float(np.sum(self.velocities**2))

    def permuted(self, order) -> "PhaseState":
        return PhaseState(self.positions[order], self.velocities[order])


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    n_observations: int = 20
    min_pair_distance_floor: float = 1e-5
    energy_drift_tolerance: float = 1e-3
    max_halvings: int = 3
    cell_list: bool = False

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if not self.t_end >= 0.0:
            raise ValueError("t_end must be >= 0")
        if self.n_observations < 1:
            raise ValueError("n_observations must be >= 1")
        if self.t_end > 0.0:
            steps = self.t_end / self.dt
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ValueError("t_end must be an integer multiple of dt")
            if round(steps) % self.n_observations:
                raise ValueError("t_end/dt must be divisible by n_observations")

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def stride(self) -> int:
        return max(self.steps // self.n_observations, 1)

    @property
    def times(self) -> np.ndarray:
        if self.steps == 0:
            return np.zeros(1)
        return np.arange(self.steps // self.stride + 1) * self.stride * self.dt


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    potential: float
    total: float
    relative_drift: float = 0.0


def _cells_per_side(spec: PotentialSpec, use_cells: bool) -> int:
    if not use_cells or not spec.tapered:
        return 0
    m = int(math.floor(1.0 / spec.cutoff))
    return m if m >= 3 else 0


def _check_coincident(state: PhaseState, spec: PotentialSpec):
    if not spec.singular:
        return
    x = state.positions
    d = x[:, None, :] - x[None, :, :]
    d -= np.floor(d + 0.5)
    r = np.linalg.norm(d, axis=-1)
    r[np.diag_indices(len(x))] = np.inf
    if np.any(r == 0.0):
        raise SingularityError("coincident particles")


def total_energy(state: PhaseState, spec: PotentialSpec) -> EnergyReport:
    """Kinetic, potential (1/(2N) sum_{i != j} phi) and total energy."""
    _check_coincident(state, spec)
    ekin = state.kinetic()
    epot = float(_kernels.potential_energy(state.positions, spec.params()))
    return EnergyReport(ekin, epot, ekin + epot)


def force_all(state: PhaseState, spec: PotentialSpec, cell_list=False) -> np.ndarray:
    """F_i = (1/N) sum_{j != i} K(X_i - X_j)."""
    _check_coincident(state, spec)
    out = np.empty_like(state.positions)
    m = _cells_per_side(spec, cell_list)
    if m:
        _kernels.forces_cells(state.positions, spec.params(), m, out)
    else:
        _kernels.forces_allpairs(state.positions, spec.params(), out)
    return out


def step(state: PhaseState, spec: PotentialSpec, dt: float) -> PhaseState:
    """One velocity-Verlet step (kick, drift, kick)."""
    if not dt > 0.0:
        raise ValueError("dt must be > 0")
    _check_coincident(state, spec)
    new = state.copy()
    sx = np.empty((2, new.n, 3))
    sv = np.empty((2, new.n, 3))
    energy = np.empty(2)
    _kernels.verlet(new.positions, new.velocities, spec.params(), float(dt), 1, 1,
                    -1.0, 0, sx, sv, energy)
    return new


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # (n_obs, n, 3)
    velocities: np.ndarray
    energy: np.ndarray  # H after every step
    min_distance: float
    hit_floor: bool
    dt: float

    @property
    def relative_drift(self) -> float:
        e0 = self.energy[0]
        scale = abs(e0) if e0 != 0.0 else 1.0
        return float(np.max(np.abs(self.energy - e0)) / scale)

    def state(self, k: int) -> PhaseState:
        return PhaseState(self.positions[k], self.velocities[k])


def integrate(state: PhaseState, spec: PotentialSpec, cfg: IntegratorConfig,
              halvings: int = 0) -> Trajectory:
    """Integrate one trajectory, keeping snapshots at the observation times."""
    _check_coincident(state, spec)
    factor = 2**halvings
    dt = cfg.dt / factor
    steps = cfg.steps * factor
    stride = cfg.stride * factor
    nobs = steps // stride + 1 if steps else 1
    x = state.positions.copy()
    v = state.velocities.copy()
    sx = np.zeros((nobs, state.n, 3))
    sv = np.zeros((nobs, state.n, 3))
    energy = np.zeros(steps + 1)
    status, done, rmin = _kernels.verlet(
        x, v, spec.params(), dt, steps, stride, cfg.min_pair_distance_floor,
        _cells_per_side(spec, cfg.cell_list), sx, sv, energy)
    if status:
        energy = energy[: done + 1]
    return Trajectory(cfg.times, sx, sv, energy, float(rmin), bool(status), dt)


Observer = Callable[[float, PhaseState, PhaseState], float]


@dataclass
class PairResult:
    times: np.ndarray
    records: dict[str, np.ndarray]
    energy: tuple[EnergyReport, EnergyReport] | None
    rejected: bool = False
    reason: str | None = None
    dt: float = float("nan")
    base: Trajectory | None = field(default=None, repr=False)
    shifted: Trajectory | None = field(default=None, repr=False)


def _final_report(traj: Trajectory, state0: PhaseState, spec) -> EnergyReport:
    last = traj.state(len(traj.times) - 1)
    ekin = last.kinetic()
    total = float(traj.energy[-1])
    return EnergyReport(ekin, total - ekin, total, traj.relative_drift)


def evolve_pair(z0: PhaseState, z0_shifted: PhaseState, spec: PotentialSpec,
                cfg: IntegratorConfig,
                observers: Mapping[str, Observer] | None = None) -> PairResult:
    """Integrate a reference and a shifted trajectory on one step schedule.

    Observers are evaluated on both states at every observation time.  A
    drift above tolerance triggers a rerun at dt/2, at most
    ``cfg.max_halvings`` times.
    """
    if z0.n != z0_shifted.n:
        raise ValueError("paired states must have the same number of particles")
    observers = dict(observers or {})
    times = cfg.times
    for h in range(cfg.max_halvings + 1):
        a = integrate(z0, spec, cfg, h)
        b = integrate(z0_shifted, spec, cfg, h)
        if a.hit_floor or b.hit_floor:
            return PairResult(times, {}, None, True, "distance_floor", a.dt, a, b)
        drift = max(a.relative_drift, b.relative_drift)
        if drift <= cfg.energy_drift_tolerance:
            break
        log.debug("energy drift %.3g above tolerance at dt=%g, halving", drift, a.dt)
    else:
        return PairResult(times, {}, None, True, "energy_drift", a.dt, a, b)
    records = {name: np.empty(len(times)) for name in observers}
    for k, t in enumerate(times):
        za, zb = a.state(k), b.state(k)
        for name, fn in observers.items():
            records[name][k] = fn(float(t), za, zb)
    reports = (_final_report(a, z0, spec), _final_report(b, z0_shifted, spec))
    return PairResult(times, records, reports, False, None, a.dt, a, b)


def write_trajectory_csv(path, traj: Trajectory, header: str = ""):
    """Line-oriented dump: t, particle index, x, y, z, vx, vy, vz."""
    with open(path, "w") as fh:
        if header:
            fh.write(header)
        fh.write("t,i,x,y,z,vx,vy,vz\n")
        for k, t in enumerate(traj.times):
            for i in range(traj.positions.shape[1]):
                x, v = traj.positions[k, i], traj.velocities[k, i]
                fh.write("%.17g,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                         % (t, i, x[0], x[1], x[2], v[0], v[1], v[2]))
