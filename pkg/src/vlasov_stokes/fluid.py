"""Periodic Stokes and Brinkman solvers, plus the free-space Oseen kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid, dirichlet_energy, transfer_matrix

_EIGHT_PI = 8.0 * math.pi


def _project_solve(fh: np.ndarray, grid: Grid, dealias: bool = False) -> np.ndarray:
    k1, k2, k3 = grid.wavenumbers
    # inv vanishes at k = 0 (mean force removed) and on every Nyquist mode
    inv = grid.inverse_laplacian
    kdotf = (k1 * fh[0] + k2 * fh[1] + k3 * fh[2]) * inv
    uh = np.stack([(fh[0] - k1 * kdotf) * inv,
                   (fh[1] - k2 * kdotf) * inv,
                   (fh[2] - k3 * kdotf) * inv])
    if dealias:
        n = grid.n
        kmax = (2.0 / 3.0) * math.pi * n / grid.box_length
        cut = (np.abs(k1) > kmax) | (np.abs(k2) > kmax) | (np.abs(k3) > kmax)
        uh[:, cut] = 0.0
    return uh


def solve_stokes(force: np.ndarray, grid: Grid, dealias: bool = False) -> np.ndarray:
    """Mean-free periodic solution of -Lap u + grad p = f - <f>, div u = 0."""
    return grid.ifft(_project_solve(grid.fft(force), grid, dealias))


def solve_limit_fluid(rho_star: np.ndarray, g, grid: Grid, dealias: bool = False) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    return solve_stokes(g[:, None, None, None] * rho_star[None], grid, dealias)


def intermediate_velocity(rho_lambda: np.ndarray, g, grid: Grid, dealias: bool = False) -> np.ndarray:
    """Stokes velocity driven by gravity acting on the kinetic density."""
    return solve_limit_fluid(rho_lambda, g, grid, dealias)


@dataclass
class BrinkmanSolveReport:
    iterations: int
    final_residual: float
    converged: bool
    update_norm: float = float("nan")


class BrinkmanConvergenceError(RuntimeError):
    def __init__(self, report: BrinkmanSolveReport, step: int | None = None):
        self.report = report
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"Brinkman iteration did not converge{where}: {report.iterations} iterations, "
            f"relative update {report.update_norm:.3e}, residual {report.final_residual:.3e}"
        )


class ParticleDrag:
    """Drag density of the particles on a fluid field, u -> sum_i w_i u(x_i) W(x - x_i).

    ``W`` is the cloud-in-cell kernel, so this is the deposit of the
    interpolated field.  Unlike the grid product ``rho * u`` it cancels the
    current exactly when every particle moves with the fluid, and
    ``(u, drag(u)) = sum_i w_i |u(x_i)|^2`` is the particle-weighted norm.
    """

    def __init__(self, positions: np.ndarray, weights: np.ndarray, grid: Grid):
        self.grid = grid
        self.weights = np.asarray(weights, dtype=float)
        self.matrix = transfer_matrix(grid, positions)
        self._deposit = self.matrix.T.tocsr()

    def at_particles(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u.reshape(3, -1).T

    def __call__(self, u: np.ndarray) -> np.ndarray:
        q = self.weights[:, None] * self.at_particles(u)
        return (self._deposit @ q).T.reshape(u.shape) / self.grid.cell_volume

    def weighted_norm_sq(self, u: np.ndarray) -> float:
        a = self.at_particles(u)
        return float(np.sum(self.weights * np.sum(a * a, axis=1)))


def brinkman_residual(u: np.ndarray, rho: np.ndarray, vbar: np.ndarray, grid: Grid,
                      drag: ParticleDrag | None = None) -> float:
    """Relative L2 size of u - S[rho V - D u], S the periodic Stokes solve and D u = rho u by default."""
    du = rho[None] * u if drag is None else drag(u)
    sol = solve_stokes(rho[None] * vbar - du, grid)
    return _relative_gap(sol, u)


def _relative_gap(s: np.ndarray, u: np.ndarray) -> float:
    diff = s - u
    scale = max(math.sqrt(float(np.sum(u * u))), math.sqrt(float(np.sum(s * s))))
    return math.sqrt(float(np.sum(diff * diff))) / scale if scale > 0 else 0.0


def solve_brinkman(rho: np.ndarray, vbar: np.ndarray, grid: Grid, u0: np.ndarray | None = None,
                   tol: float = 1e-9, max_iter: int = 200, damping: float = 0.7,
                   dealias: bool = False, drag: ParticleDrag | None = None):
    """Damped Picard iteration for -Lap u + grad p + rho (u - V) = 0, div u = 0.

    Each sweep computes ``s = S[rho V - D u]`` with ``D u = rho u`` (or the
    particle-level ``drag`` operator); the iterate is accepted once
    ``|s - u| <= tol |u|`` (so the damped update ``damping * (s - u)`` is below
    ``tol`` as well), otherwise ``u <- (1 - damping) u + damping s``.

    Returns ``(u, report)``.  Raises :class:`BrinkmanConvergenceError` after
    ``max_iter`` sweeps without convergence.
    """
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    u = np.zeros((3,) + grid.shape) if u0 is None else np.array(u0, dtype=float)
    jh = grid.fft(rho[None] * vbar)
    residual = float("inf")
    for it in range(1, max_iter + 1):
        du = rho[None] * u if drag is None else drag(u)
        s = grid.ifft(_project_solve(jh - grid.fft(du), grid, dealias))
        residual = _relative_gap(s, u)
        if residual <= tol:
            return u, BrinkmanSolveReport(it, residual, True, damping * residual)
        u = (1.0 - damping) * u + damping * s
    raise BrinkmanConvergenceError(BrinkmanSolveReport(max_iter, residual, False, damping * residual))


def fluid_energy_terms(u: np.ndarray, rho: np.ndarray, j: np.ndarray, grid: Grid,
                       drag: ParticleDrag | None = None) -> dict:
    """Terms of the Brinkman energy identity and the inequality chain.

    With ``drag`` the density-weighted norm of u is the particle sum
    ``sum_i w_i |u(x_i)|^2`` that matches the operator used in the solve.
    """
    dv = grid.cell_volume
    vbar_sq = np.zeros_like(rho)
    mask = rho > 0
    np.divide(np.sum(j * j, axis=0), rho, out=vbar_sq, where=mask)
    return {
        "grad_u_sq": dirichlet_energy(u, grid),
        "u_rho_sq": (float(np.sum(rho * np.sum(u * u, axis=0))) * dv if drag is None
                     else drag.weighted_norm_sq(u)),
        "u_dot_j": float(np.sum(u * j)) * dv,
        "vbar_rho_sq": float(np.sum(vbar_sq)) * dv,
    }


# ---------------------------------------------------------------------------
# free-space oracle

def oseen_tensor(y) -> np.ndarray:
    """Stokeslet Phi(y) = (I/|y| + y y^T/|y|^3) / (8 pi)."""
    y = np.asarray(y, dtype=float)
    r = float(np.linalg.norm(y))
    if r == 0.0:
        raise ValueError("singular evaluation of the Oseen tensor at y = 0")
    return (np.eye(3) / r + np.outer(y, y) / r**3) / _EIGHT_PI


def oseen_velocity(points: np.ndarray, forces: np.ndarray, x, min_distance: float = 0.0) -> np.ndarray:
    """Direct sum of Stokeslets sum_q Phi(x - y_q) F_q at target points x (M, 3)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    forces = np.atleast_2d(np.asarray(forces, dtype=float))
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    out = np.empty((len(x), 3))
    for m, xm in enumerate(x):
        d = xm[None, :] - points
        r = np.linalg.norm(d, axis=1)
        if np.any(r == 0.0) or np.any(r < min_distance):
            raise ValueError("singular evaluation: target coincides with a point force")
        dot = np.sum(d * forces, axis=1)
        out[m] = np.sum(forces / r[:, None] + d * (dot / r**3)[:, None], axis=0) / _EIGHT_PI
    return out[0] if single else out


def oseen_velocity_field(density: np.ndarray, direction, grid: Grid, x, threshold: float = 0.0) -> np.ndarray:
    """Oseen sum for the body force density * direction sampled at grid nodes."""
    mask = density > threshold
    pts = grid.nodes()[:, mask].T
    forces = np.outer(density[mask] * grid.cell_volume, np.asarray(direction, dtype=float))
    return oseen_velocity(pts, forces, x)
