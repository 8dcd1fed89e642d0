"""Periodic cell-centred grid: particle/grid transfer, spectral calculus, norms.

Node ``i`` of an axis sits at the cell centre ``(i + 1/2) h``.  Scalar fields
are ``(n, n, n)`` arrays and vector fields ``(3, n, n, n)`` arrays, both
row-major with axis order (x1, x2, x3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy import sparse


@dataclass(frozen=True)
class Grid:
    n: int
    box_length: float

    @property
    def h(self) -> float:
        return self.box_length / self.n

    @property
    def shape(self) -> tuple:
        return (self.n, self.n, self.n)

    @property
    def cell_volume(self) -> float:
        return self.h**3

    def nodes_1d(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h

    def nodes(self) -> np.ndarray:
        """Node coordinates as a (3, n, n, n) array."""
        c = self.nodes_1d()
        return np.array(np.meshgrid(c, c, c, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple:
        """(k1, k2, k3) broadcastable to the rfftn half-spectrum, Nyquist zeroed."""
        n = self.n
        k = 2 * np.pi * sfft.fftfreq(n, d=self.h)
        k[n // 2] = 0.0
        kr = 2 * np.pi * sfft.rfftfreq(n, d=self.h)
        kr[-1] = 0.0
        return k[:, None, None], k[None, :, None], kr[None, None, :]

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True on half-spectrum modes that carry any Nyquist index."""
        n = self.n
        m = np.zeros((n, n, n // 2 + 1), dtype=bool)
        m[n // 2, :, :] = True
        m[:, n // 2, :] = True
        m[:, :, n // 2] = True
        return m

    @cached_property
    def k_squared(self) -> np.ndarray:
        k1, k2, k3 = self.wavenumbers
        return k1**2 + k2**2 + k3**2

    @cached_property
    def inverse_laplacian(self) -> np.ndarray:
        """1/|k|^2, zero at k = 0 and on every Nyquist mode."""
        inv = np.zeros_like(self.k_squared)
        np.divide(1.0, self.k_squared, out=inv, where=self.k_squared > 0)
        inv[self.nyquist_mask] = 0.0
        return inv

    def fft(self, f: np.ndarray) -> np.ndarray:
        return sfft.rfftn(f, axes=(-3, -2, -1))

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        return sfft.irfftn(fh, s=self.shape, axes=(-3, -2, -1))


# ---------------------------------------------------------------------------
# particle <-> grid transfer (cloud-in-cell)

def _cic_stencil(grid: Grid, x: np.ndarray):
    """Flat node indices (8, N) and trilinear weights (8, N) for points x."""
    n = grid.n
    s = np.asarray(x, dtype=float) / grid.h - 0.5
    base = np.floor(s)
    frac = s - base
    base = base.astype(np.int64)
    i0 = np.mod(base, n)
    i1 = np.mod(base + 1, n)
    idx = np.empty((8, len(s)), dtype=np.int64)
    wts = np.empty((8, len(s)))
    c = 0
    for a in (0, 1):
        ia = (i1 if a else i0)[:, 0]
        wa = frac[:, 0] if a else 1.0 - frac[:, 0]
        for b in (0, 1):
            ib = (i1 if b else i0)[:, 1]
            wb = frac[:, 1] if b else 1.0 - frac[:, 1]
            for d in (0, 1):
                ic = (i1 if d else i0)[:, 2]
                wc = frac[:, 2] if d else 1.0 - frac[:, 2]
                idx[c] = (ia * n + ib) * n + ic
                wts[c] = wa * wb * wc
                c += 1
    return idx, wts


def transfer_matrix(grid: Grid, x: np.ndarray) -> sparse.csr_matrix:
    """Sparse (N, n^3) matrix of trilinear weights: rows interpolate, the transpose deposits."""
    idx, wts = _cic_stencil(grid, x)
    n_pts = idx.shape[1]
    rows = np.broadcast_to(np.arange(n_pts), idx.shape)
    return sparse.csr_matrix((wts.ravel(), (rows.ravel(), idx.ravel())), shape=(n_pts, grid.n**3))


def deposit(grid: Grid, x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Deposit per-particle amounts q (N,) as a density (amount per volume)."""
    idx, wts = _cic_stencil(grid, x)
    acc = np.bincount(idx.ravel(), weights=(wts * q).ravel(), minlength=grid.n**3)
    return acc.reshape(grid.shape) / grid.cell_volume


def deposit_density(ensemble, grid: Grid) -> np.ndarray:
    return deposit(grid, ensemble.positions, ensemble.weights)


def deposit_current(ensemble, grid: Grid) -> np.ndarray:
    idx, wts = _cic_stencil(grid, ensemble.positions)
    flat = idx.ravel()
    out = np.empty((3,) + grid.shape)
    for c in range(3):
        q = ensemble.weights * ensemble.velocities[:, c]
        acc = np.bincount(flat, weights=(wts * q).ravel(), minlength=grid.n**3)
        out[c] = acc.reshape(grid.shape) / grid.cell_volume
    return out


def mean_velocity(rho: np.ndarray, j: np.ndarray, floor_rel: float = 1e-12) -> np.ndarray:
    """V = j / rho where rho exceeds floor_rel * max(rho), zero elsewhere."""
    rmax = float(rho.max()) if rho.size else 0.0
    mask = rho > floor_rel * rmax
    vbar = np.zeros_like(j)
    if rmax > 0:
        np.divide(j, rho, out=vbar, where=mask)
    return vbar


def interpolate(field: np.ndarray, x: np.ndarray, grid: Grid) -> np.ndarray:
    """Trilinear interpolation of a scalar (N,) or vector (N, 3) field at x."""
    x = np.atleast_2d(x)
    idx, wts = _cic_stencil(grid, x)
    if field.ndim == 3:
        return np.sum(field.ravel()[idx] * wts, axis=0)
    flat = field.reshape(field.shape[0], -1)
    return np.stack([np.sum(flat[c][idx] * wts, axis=0) for c in range(field.shape[0])], axis=1)


# ---------------------------------------------------------------------------
# spectral calculus

def spectral_gradient(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Fourier gradient. Scalar -> (3, n,n,n); vector -> (3, 3, n,n,n) with [i, j] = d_j f_i."""
    fh = grid.fft(f)
    ks = grid.wavenumbers
    if f.ndim == 3:
        return np.stack([grid.ifft(1j * k * fh) for k in ks])
    return np.stack([np.stack([grid.ifft(1j * k * fh[i]) for k in ks]) for i in range(f.shape[0])])


def velocity_gradient(u: np.ndarray, grid: Grid, uh: np.ndarray | None = None) -> np.ndarray:
    """(3, 3, n, n, n) gradient of a vector field; uh may pass a precomputed transform."""
    uh = grid.fft(u) if uh is None else uh
    ks = grid.wavenumbers
    return np.stack([np.stack([grid.ifft(1j * k * uh[i]) for k in ks]) for i in range(3)])


def gradient_stats(grad: np.ndarray) -> dict:
    """max |grad u| (Frobenius) and the relative divergence from a gradient tensor."""
    mag = np.sqrt(np.sum(grad.reshape(9, *grad.shape[2:]) ** 2, axis=0))
    gmax = float(mag.max())
    div = float(np.abs(grad[0, 0] + grad[1, 1] + grad[2, 2]).max())
    return {"grad_Linf": gmax, "div_rel": div / gmax if gmax > 0 else 0.0}


def divergence(u: np.ndarray, grid: Grid) -> np.ndarray:
    uh = grid.fft(u)
    ks = grid.wavenumbers
    return grid.ifft(1j * (ks[0] * uh[0] + ks[1] * uh[1] + ks[2] * uh[2]))


def relative_divergence(u: np.ndarray, grid: Grid) -> float:
    """max|div u| relative to max|grad u| (0 for a constant field)."""
    scale = float(np.sqrt(np.sum(spectral_gradient(u, grid) ** 2, axis=(0, 1))).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(divergence(u, grid)).max()) / scale


def dirichlet_energy(u: np.ndarray, grid: Grid) -> float:
    """||grad u||_2^2 evaluated by Parseval on the half spectrum."""
    uh = grid.fft(u)
    n = grid.n
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    power = np.sum(np.abs(uh) ** 2, axis=0) if u.ndim == 4 else np.abs(uh) ** 2
    return float(np.sum(w * grid.k_squared * power)) * grid.box_length**3 / float(n) ** 6


# ---------------------------------------------------------------------------
# norms

def _pointwise_abs(f: np.ndarray) -> np.ndarray:
    return np.abs(f) if f.ndim == 3 else np.sqrt(np.sum(f.reshape(-1, *f.shape[-3:]) ** 2, axis=0))


def field_norm(f: np.ndarray, grid: Grid, which: str = "L2", rho: np.ndarray | None = None) -> float:
    """Discrete norms: L1, L2, Linf, W1inf and the density-weighted L2_rho."""
    a = _pointwise_abs(f)
    if which == "L1":
        return float(np.sum(a)) * grid.cell_volume
    if which == "L2":
        return float(np.sqrt(np.sum(a * a) * grid.cell_volume))
    if which == "Linf":
        return float(a.max())
    if which == "W1inf":
        return float(a.max()) + float(_pointwise_abs(spectral_gradient(f, grid)).max())
    if which == "L2_rho":
        if rho is None:
            raise ValueError("L2_rho needs a density")
        return float(np.sqrt(np.sum(rho * a * a) * grid.cell_volume))
    raise ValueError(f"unknown norm {which!r}")


def gradient_linf(u: np.ndarray, grid: Grid) -> float:
    return float(_pointwise_abs(spectral_gradient(u, grid)).max())


def holder_quotient(f: np.ndarray, grid: Grid, alpha: float = 0.5) -> float:
    """Finite-difference Hölder quotient at the grid scale: max |f(x+h e_k) - f(x)| / h^alpha."""
    d = max(float(np.abs(np.roll(f, -1, axis=k) - f).max()) for k in range(3))
    return d / grid.h**alpha


# ---------------------------------------------------------------------------
# cube averages

def _overlap_matrix(grid: Grid, corners: np.ndarray, delta: float) -> np.ndarray:
    """Overlap lengths (len(corners), n) of [c, c + delta) with each periodic cell."""
    n, h = grid.n, grid.h
    corners = np.atleast_1d(np.asarray(corners, dtype=float))
    lo = corners[:, None]
    hi = lo + delta
    out = np.zeros((len(corners), n))
    edges = np.arange(n) * h
    # a cube of side <= L touches at most two periodic copies of each cell
    for shift in (-1, 0, 1, 2):
        a = edges[None, :] + shift * grid.box_length
        out += np.clip(np.minimum(hi, a + h) - np.maximum(lo, a), 0.0, None)
    return out


def cube_average(f: np.ndarray, corner, delta: float, grid: Grid) -> float:
    """Average of the cellwise-constant field f over [corner, corner + delta)^3."""
    if delta < 2 * grid.h:
        raise ValueError("cube under-resolved: delta must be at least 2h")
    if delta > grid.box_length:
        raise ValueError("cube larger than the periodic box")
    corner = np.asarray(corner, dtype=float)
    wx, wy, wz = (_overlap_matrix(grid, corner[k:k + 1], delta)[0] for k in range(3))
    return float(np.einsum("i,j,k,ijk->", wx, wy, wz, f)) / delta**3


def cube_average_lattice(f: np.ndarray, delta: float, grid: Grid, spacing: float | None = None) -> np.ndarray:
    """Cube averages for every corner on a periodic lattice of the given spacing (default h/2)."""
    if delta < 2 * grid.h:
        raise ValueError("cube under-resolved: delta must be at least 2h")
    spacing = grid.h / 2 if spacing is None else spacing
    m = int(round(grid.box_length / spacing))
    W = _overlap_matrix(grid, np.arange(m) * spacing, delta)
    out = np.tensordot(W, f, axes=(1, 0))
    out = np.tensordot(W, out, axes=(1, 1)).transpose(1, 0, 2)
    out = np.tensordot(out, W, axes=(2, 1))
    return out / delta**3


# ---------------------------------------------------------------------------
# field dumps

def dump_field(path, f: np.ndarray, grid: Grid, time: float) -> None:
    """Raw little-endian float64 (component-major) plus a JSON sidecar."""
    path = Path(path)
    comps = 1 if f.ndim == 3 else f.shape[0]
    np.ascontiguousarray(f, dtype="<f8").tofile(path.with_suffix(".f64"))
    meta = {"grid_n": grid.n, "box_length": grid.box_length, "components": comps, "time": time}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_field(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    n = meta["grid_n"]
    data = np.fromfile(path.with_suffix(".f64"), dtype="<f8")
    shape = (n, n, n) if meta["components"] == 1 else (meta["components"], n, n, n)
    return data.reshape(shape), meta
