"""Tracer discretisation of the inertialess transport-Stokes system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InitialData, PhaseEnsemble, SimParams
from .fluid import solve_limit_fluid
from .grid import Grid, deposit, interpolate, relative_divergence


class SupportTooLargeError(RuntimeError):
    """The transported cloud came within L/4 of its own periodic image."""


@dataclass(frozen=True, eq=False)
class TracerEnsemble:
    positions: np.ndarray
    carried_density: np.ndarray
    weights: np.ndarray
    box_length: float

    def __post_init__(self):
        x = np.mod(np.asarray(self.positions, dtype=float), self.box_length)
        x[x >= self.box_length] = 0.0
        x.flags.writeable = False
        object.__setattr__(self, "positions", x)
        for name in ("carried_density", "weights"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self):
        return len(self.weights)

    def moved_to(self, positions) -> "TracerEnsemble":
        new = object.__new__(TracerEnsemble)
        x = np.mod(positions, self.box_length)
        x[x >= self.box_length] = 0.0
        x.flags.writeable = False
        object.__setattr__(new, "positions", x)
        object.__setattr__(new, "carried_density", self.carried_density)
        object.__setattr__(new, "weights", self.weights)
        object.__setattr__(new, "box_length", self.box_length)
        return new


def tracers_from_ensemble(ensemble: PhaseEnsemble, init: InitialData) -> TracerEnsemble:
    """One tracer per particle, at its initial position and with its weight."""
    x = np.array(ensemble.positions)
    return TracerEnsemble(x, init.rho0(_unwrap_near(x, init.center_x, ensemble.box_length)),
                          ensemble.weights, ensemble.box_length)


def seed_tracers(init: InitialData, m: int, seed: int, box_length: float) -> TracerEnsemble:
    """m tracers uniform on the support ball, weighted by rho_0 (total mass exactly 1)."""
    rng = np.random.default_rng(seed)
    pts = np.empty((0, 3))
    while len(pts) < m:
        y = rng.uniform(-1.0, 1.0, size=(2 * m, 3))
        pts = np.vstack([pts, y[np.sum(y * y, axis=1) < 1.0]])
    x = np.asarray(init.center_x) + init.radius_x * pts[:m]
    dens = init.rho0(x)
    w = dens / np.sum(dens)
    keep = w > 0
    return TracerEnsemble(x[keep], dens[keep], w[keep], box_length)


def _unwrap_near(x, centre, box_length):
    d = x - np.asarray(centre)
    return np.asarray(centre) + d - box_length * np.round(d / box_length)


def _rk4_displacement(x, u_star, g, dt, grid):
    def vel(y):
        if callable(u_star):
            return g + np.asarray(u_star(y), dtype=float)
        return g + interpolate(u_star, np.mod(y, grid.box_length), grid)

    k1 = vel(x)
    k2 = vel(x + 0.5 * dt * k1)
    k3 = vel(x + 0.5 * dt * k2)
    k4 = vel(x + dt * k3)
    return dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def advect(tracers: TracerEnsemble, u_star, g, dt: float, grid: Grid | None = None) -> TracerEnsemble:
    """Classical RK4 for dx/dt = g + u*(x) with u* frozen over the step.

    ``u_star`` is a (3, n, n, n) grid field (needs ``grid``) or a callable x -> (M, 3).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = np.asarray(g, dtype=float)
    x = tracers.positions
    return tracers.moved_to(x + _rk4_displacement(x, u_star, g, dt, grid))


@dataclass
class LimitFields:
    rho: np.ndarray
    u: np.ndarray


class LimitSolver:
    def __init__(self, params: SimParams, tracers: TracerEnsemble):
        self.params = params
        self.grid = Grid(params.grid_n, params.box_length)
        self.tracers = tracers
        self.unwrapped = np.array(tracers.positions)
        self.step_index = 0
        self.t = 0.0

    def fields(self) -> LimitFields:
        rho = deposit(self.grid, self.tracers.positions, self.tracers.weights)
        u = solve_limit_fluid(rho, self.params.g, self.grid, self.params.dealias)
        return LimitFields(rho, u)

    def check_support(self) -> None:
        x = self.unwrapped
        extent = x.max(axis=0) - x.min(axis=0)
        if np.any(extent > 0.75 * self.params.box_length):
            raise SupportTooLargeError(
                f"tracer cloud extent {extent.max():.3f} leaves less than L/4 to its periodic image")

    def step(self, fields: LimitFields) -> None:
        p = self.params
        x0 = self.tracers.positions
        disp = _rk4_displacement(x0, fields.u, p.g, p.dt, self.grid)
        self.tracers = self.tracers.moved_to(x0 + disp)
        self.unwrapped = self.unwrapped + disp
        self.step_index += 1
        self.t = self.step_index * p.dt
        self.check_support()


@dataclass
class LimitRecord:
    t: float
    mass: float
    rho_Linf: float
    u_Linf: float
    div_u: float


def run_limit(params: SimParams, init: InitialData, tracers: TracerEnsemble | None = None,
              snapshot_stride: int = 0):
    """Advance rho* by tracer characteristics; returns (records, field snapshots, solver)."""
    if tracers is None:
        tracers = seed_tracers(init, params.n_particles, params.seed, params.box_length)
    solver = LimitSolver(params, tracers)
    solver.check_support()
    grid = solver.grid
    records, snaps = [], []
    for n in range(params.n_steps + 1):
        f = solver.fields()
        records.append(LimitRecord(n * params.dt, float(np.sum(f.rho)) * grid.cell_volume,
                                   float(f.rho.max()), float(np.abs(f.u).max()),
                                   relative_divergence(f.u, grid)))
        if snapshot_stride and n % snapshot_stride == 0:
            snaps.append((n * params.dt, f))
        if n < params.n_steps:
            solver.step(f)
    return records, snaps, solver
