"""Exponential integration of particle characteristics and the coupled time loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .core import InitialData, PhaseEnsemble, SimParams, sample_ensemble
from .fluid import (BrinkmanConvergenceError, ParticleDrag, fluid_energy_terms,
                    intermediate_velocity, solve_brinkman)
from .grid import (Grid, deposit_current, deposit_density, gradient_stats, interpolate,
                   mean_velocity, velocity_gradient)
from .limit import LimitSolver, tracers_from_ensemble

# exp(-x) is flushed to zero beyond this rate
_EXP_CUTOFF = 700.0


def relaxation_factors(lam: float, dt: float):
    """Return (exp(-lam dt), (1 - exp(-lam dt)) / lam) without overflow or cancellation."""
    x = lam * dt
    if x > _EXP_CUTOFF:
        return 0.0, 1.0 / lam
    return math.exp(-x), -math.expm1(-x) / lam


def _velocity_at(u, x, grid):
    if callable(u):
        return np.asarray(u(x), dtype=float)
    return interpolate(u, x, grid)


def _linear_weights(lam, dt):
    """(dt - c, dt^2 (1/2 - phi2)) for a forcing growing linearly over the step, z = lam dt."""
    z = lam * dt
    if z < 1e-2:
        # Taylor series; the closed forms cancel catastrophically here
        return (dt * (z / 2 - z * z / 6 + z**3 / 24 - z**4 / 120),
                dt * dt * (z / 6 - z * z / 24 + z**3 / 120 - z**4 / 720))
    _, c = relaxation_factors(lam, dt)
    phi1 = c / dt
    return dt - c, dt * dt * (0.5 - (1.0 - phi1) / z)


def _exact_step(x, v, a, lam, dt, rate=None):
    """Exact solution of x' = v, v' = lam (a + s rate - v) over one step."""
    e, c = relaxation_factors(lam, dt)
    v_new = e * v + (1.0 - e) * a
    x_new = x + a * dt + (v - a) * c
    if rate is not None:
        wv, wx = _linear_weights(lam, dt)
        v_new = v_new + wv * rate
        x_new = x_new + wx * rate
    return x_new, v_new


def advance(x, v, u, lam, g, dt, scheme="midpoint", grid=None):
    """One step of the characteristics with u frozen; positions are not wrapped.

    ``u`` is a (3, n, n, n) grid field (needs ``grid``) or a callable x -> (N, 3).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = np.asarray(g, dtype=float)
    a = g + _velocity_at(u, x, grid)
    if scheme == "euler":
        return _exact_step(x, v, a, lam, dt)
    if scheme != "midpoint":
        raise ValueError(f"unknown scheme {scheme!r}")
    x_half, _ = _exact_step(x, v, a, lam, 0.5 * dt)
    if grid is not None:
        x_half = np.mod(x_half, grid.box_length)
    a_mid = g + _velocity_at(u, x_half, grid)
    return _exact_step(x, v, a_mid, lam, dt)


def advance_path_linear(x, v, a0, a1, lam, dt):
    """Exact step for x' = v, v' = lam (a0 + s a1 - v), s in [0, dt].

    ``a0`` is g + u seen by each particle at the start of the step and ``a1``
    the rate at which it changes along the particle path (N, 3 arrays).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    return _exact_step(x, v, a0, lam, dt, a1)


def push(ensemble: PhaseEnsemble, u, lam, g, dt, scheme="midpoint", grid=None) -> PhaseEnsemble:
    x_new, v_new = advance(ensemble.positions, ensemble.velocities, u, lam, g, dt, scheme, grid)
    return ensemble.with_state(x_new, v_new)


def velocity_spread(ensemble: PhaseEnsemble, u, g, grid=None) -> float:
    """max_i |v_i - (g + u(x_i))|."""
    a = np.asarray(g, dtype=float) + _velocity_at(u, ensemble.positions, grid)
    return float(np.sqrt(np.max(np.sum((ensemble.velocities - a) ** 2, axis=1))))


def support_radius(positions, velocities, weights=None) -> float:
    """Phase-space radius of the particle cloud about its spatial centroid.

    ``positions`` should be unwrapped (continuous in time).
    """
    x = np.asarray(positions, dtype=float)
    w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights)
    centre = np.sum(w[:, None] * x, axis=0) / np.sum(w)
    r2 = np.sum((x - centre) ** 2, axis=1) + np.sum(np.asarray(velocities) ** 2, axis=1)
    return float(np.sqrt(r2.max()))


def phase_volume_factor(u_uniform, lam, dt) -> float:
    """Determinant of the one-step (x, v) map for a spatially uniform fluid velocity."""
    e, c = relaxation_factors(lam, dt)
    jac = np.zeros((6, 6))
    jac[:3, :3] = np.eye(3)
    jac[:3, 3:] = c * np.eye(3)
    jac[3:, 3:] = e * np.eye(3)
    # u_uniform only shifts the affine part of the map
    del u_uniform
    return float(np.linalg.det(jac))


def step_jacobian(x, v, u, lam, g, dt, scheme="midpoint", eps=1e-6) -> np.ndarray:
    """Central finite-difference Jacobian d(X', V')/d(x, v) of one step for a callable u."""
    z = np.concatenate([np.asarray(x, float), np.asarray(v, float)])
    jac = np.empty((6, 6))
    for k in range(6):
        dz = np.zeros(6)
        dz[k] = eps
        out = []
        for s in (1.0, -1.0):
            zz = z + s * dz
            xn, vn = advance(zz[None, :3], zz[None, 3:], u, lam, g, dt, scheme)
            out.append(np.concatenate([xn[0], vn[0]]))
        jac[:, k] = (out[0] - out[1]) / (2 * eps)
    return jac


# ---------------------------------------------------------------------------
# snapshots

SNAPSHOT_COLUMNS = ("x", "y", "z", "vx", "vy", "vz", "w")


def dump_ensemble(path, ensemble: PhaseEnsemble, time: float) -> None:
    path = Path(path)
    cols = np.vstack([ensemble.positions.T, ensemble.velocities.T, ensemble.weights[None]])
    np.ascontiguousarray(cols, dtype="<f8").tofile(path.with_suffix(".f64"))
    meta = {"n_particles": len(ensemble), "columns": list(SNAPSHOT_COLUMNS),
            "box_length": ensemble.box_length, "time": time}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_ensemble(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cols = np.fromfile(path.with_suffix(".f64"), dtype="<f8").reshape(len(meta["columns"]), -1)
    ens = PhaseEnsemble(cols[:3].T, cols[3:6].T, cols[6], meta["box_length"])
    return ens, meta


# ---------------------------------------------------------------------------
# coupled Vlasov-Stokes loop

@dataclass
class StepFields:
    """Grid quantities of the kinetic system at one instant."""

    rho: np.ndarray
    j: np.ndarray
    vbar: np.ndarray
    u: np.ndarray
    iterations: int
    residual: float
    drag: ParticleDrag | None = None


class KineticSolver:
    """Particle discretisation of the Vlasov-Brinkman system.

    ``fields()`` solves for the fluid at the current particle state and
    ``step(fields)`` pushes the particles through one time step.

    The default scheme "path_linear" lets the forcing g + u seen by each
    particle grow linearly over the step, at the rate measured along its path
    over the previous step, and integrates the relaxation exactly.  Holding u
    fixed instead ("midpoint", "euler") leaves the velocities an O(dt) lag
    behind g + u once lam dt is not small, and that lag does not vanish as
    lam grows.
    """

    def __init__(self, params: SimParams, ensemble: PhaseEnsemble):
        self.params = params
        self.grid = Grid(params.grid_n, params.box_length)
        self.ensemble = ensemble
        self.unwrapped = np.array(ensemble.positions)
        self.t = 0.0
        self.step_index = 0
        self._u_hist: list = []
        self._u_path = None   # u at the particles at the previous step

    def _warm_start(self):
        if len(self._u_hist) >= 2:
            return 2.0 * self._u_hist[-1] - self._u_hist[-2]
        if self._u_hist:
            return self._u_hist[-1]
        return None

    def fields(self) -> StepFields:
        p, grid = self.params, self.grid
        rho = deposit_density(self.ensemble, grid)
        j = deposit_current(self.ensemble, grid)
        vbar = mean_velocity(rho, j)
        drag = None
        if p.drag == "particle":
            drag = ParticleDrag(self.ensemble.positions, self.ensemble.weights, grid)
        try:
            u, rep = solve_brinkman(rho, vbar, grid, u0=self._warm_start(), tol=p.brinkman_tol,
                                    max_iter=p.brinkman_max_iter, damping=p.picard_damping,
                                    dealias=p.dealias, drag=drag)
        except BrinkmanConvergenceError as exc:
            raise BrinkmanConvergenceError(exc.report, self.step_index) from None
        self._u_hist = (self._u_hist + [u])[-2:]
        return StepFields(rho, j, vbar, u, rep.iterations, rep.final_residual, drag)

    def step(self, fields: StepFields) -> None:
        p = self.params
        x0 = self.ensemble.positions
        if p.scheme == "path_linear":
            u_here = (fields.drag.at_particles(fields.u) if fields.drag is not None
                      else interpolate(fields.u, x0, self.grid))
            # backward difference of u along each particle path; zero on the first step
            rate = None if self._u_path is None else (u_here - self._u_path) / p.dt
            x_new, v_new = advance_path_linear(x0, self.ensemble.velocities, p.g + u_here, rate,
                                               p.lam, p.dt)
            self._u_path = u_here
        else:
            x_new, v_new = advance(x0, self.ensemble.velocities, fields.u, p.lam, p.g, p.dt,
                                   p.scheme, self.grid)
        self.unwrapped = self.unwrapped + (x_new - x0)
        self.ensemble = self.ensemble.with_state(x_new, v_new)
        self.step_index += 1
        self.t = self.step_index * p.dt


def _w1inf_difference(u, w, grad_u, grad_w) -> float:
    d = u - w
    dg_ = (grad_u - grad_w).reshape(9, *u.shape[1:])
    return float(np.sqrt(np.sum(d * d, axis=0)).max()) + float(np.sqrt(np.sum(dg_ * dg_, axis=0)).max())


@dataclass
class DiagConfig:
    delta_list: tuple = (0.8, 0.4)
    cube_lattice_spacing: float | None = None
    snapshot_stride: int = 0
    diag_stride: int = 1


@dataclass
class RunResult:
    records: list
    snapshots: list          # (time, PhaseEnsemble)
    field_snapshots: list    # (time, dict of named fields)
    params: SimParams
    initial_ensemble: PhaseEnsemble


def run_vlasov_stokes(params: SimParams, init: InitialData, diag: DiagConfig | None = None,
                      ensemble: PhaseEnsemble | None = None, with_limit: bool = True,
                      callback=None) -> RunResult:
    """Integrate the coupled system to ``t_final`` and collect diagnostics.

    With ``with_limit`` the inertialess system is advanced in lockstep from
    tracers seeded at the particles' initial positions, which fills the
    comparison entries of each record (otherwise they are NaN).
    """
    diag = diag or DiagConfig()
    if ensemble is None:
        ensemble = sample_ensemble(init, params.n_particles, params.seed, params.box_length)
    solver = KineticSolver(params, ensemble)
    grid = solver.grid
    limit = LimitSolver(params, tracers_from_ensemble(ensemble, init)) if with_limit else None
    lam, g, dt = params.lam, params.g, params.dt
    records, snaps, fsnaps = [], [], []
    prev = None   # (E, rhs) of the previous instant
    log_m = 0.0   # running integral of 2 |grad u|_inf
    grad_inf_prev = None

    for n in range(params.n_steps + 1):
        t = n * dt
        fld = solver.fields()
        ens = solver.ensemble
        terms = fluid_energy_terms(fld.u, fld.rho, fld.j, grid, fld.drag)
        energy = dg.kinetic_energy(ens)
        u_at = (interpolate(fld.u, ens.positions, grid) if fld.drag is None
                else fld.drag.at_particles(fld.u))
        j_total = np.sum(fld.j.reshape(3, -1), axis=1) * grid.cell_volume
        rhs = dg.particle_energy_rhs(lam, g, ens, u_at, j_total, terms["grad_u_sq"])
        if prev is None:
            resid = resid_norm = 0.0
        else:
            resid = dg.energy_identity_residual(prev[0], energy, dt, prev[1])
            # |g|^2 M is the settling energy; it keeps the scale finite for clouds released at rest
            e_scale = max(energy, prev[0], float(g @ g) * float(np.sum(ens.weights)), 1e-300)
            resid_norm = resid / (2.0 * lam * e_scale)
        prev = (energy, rhs)

        grad_u = velocity_gradient(fld.u, grid)
        stats_u = gradient_stats(grad_u)
        grad_inf = stats_u["grad_Linf"]
        if grad_inf_prev is not None:
            log_m += dt * (grad_inf_prev + grad_inf)   # trapezoid of 2 |grad u|_inf
        grad_inf_prev = grad_inf

        lf = limit.fields() if limit is not None else None
        if n % max(diag.diag_stride, 1) == 0 or n == params.n_steps:
            u_linf = float(np.sqrt(np.sum(fld.u**2, axis=0)).max())
            spread = float(np.sqrt(np.max(np.sum((ens.velocities - g - u_at) ** 2, axis=1))))
            u_tilde = intermediate_velocity(fld.rho, g, grid, params.dealias)
            grad_ut = velocity_gradient(u_tilde, grid)
            rec = dict(
                t=t,
                mass=float(np.sum(fld.rho)) * grid.cell_volume,
                E=energy,
                grad_u_L2=math.sqrt(terms["grad_u_sq"]),
                u_Linf=u_linf,
                u_W1inf=u_linf + grad_inf,
                rho_Linf=float(fld.rho.max()),
                velocity_spread=spread,
                support_radius=support_radius(solver.unwrapped, ens.velocities, ens.weights),
                energy_identity_residual=resid,
                energy_identity_residual_normalized=resid_norm,
                fluid_identity_residual=dg.fluid_identity_residual_from_terms(terms),
                u_dot_j=terms["u_dot_j"],
                vbar_rho_sq=terms["vbar_rho_sq"],
                grad_u_Linf=grad_inf,
                M_meas=math.exp(log_m),
                brinkman_iterations=fld.iterations,
                brinkman_residual=fld.residual,
                div_u=stats_u["div_rel"],
                div_u_tilde=gradient_stats(grad_ut)["div_rel"],
                err_u_vs_utilde_W1inf=_w1inf_difference(fld.u, u_tilde, grad_u, grad_ut),
            )
            if lf is not None:
                grad_us = velocity_gradient(lf.u, grid)
                rec.update(
                    mass_star=float(np.sum(lf.rho)) * grid.cell_volume,
                    rho_star_Linf=float(lf.rho.max()),
                    div_u_star=gradient_stats(grad_us)["div_rel"],
                    err_u_vs_ustar_W1inf=_w1inf_difference(fld.u, lf.u, grad_u, grad_us),
                    err_rho_Linf=float(np.abs(fld.rho - lf.rho).max()),
                    eta_traj=dg.trajectory_distance(solver.unwrapped, limit.unwrapped,
                                                    params.box_length),
                )
                for delta in diag.delta_list:
                    rec[dg.delta_key(delta)] = dg.d_lambda_delta(
                        fld.rho, lf.rho, delta, grid, diag.cube_lattice_spacing)
            records.append(dg.DiagnosticsRecord.from_dict(rec, diag.delta_list))

        if diag.snapshot_stride and n % diag.snapshot_stride == 0:
            snaps.append((t, ens))
            entry = {"rho": fld.rho, "u": fld.u}
            if lf is not None:
                entry.update(rho_star=lf.rho, u_star=lf.u)
            fsnaps.append((t, entry))
        if callback is not None:
            callback(n, solver, fld)
        if n < params.n_steps:
            solver.step(fld)
            if limit is not None:
                limit.step(lf)
    return RunResult(records, snaps, fsnaps, params, ensemble)
