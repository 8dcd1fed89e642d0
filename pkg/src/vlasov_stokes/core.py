"""Parameters, initial data families and particle ensembles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import integrate


class ConfigError(ValueError):
    """Raised when a configuration violates a parameter invariant."""


FAMILIES = ("gaussian_bump", "plummer_ball", "tensor_bump")
SCHEMES = ("path_linear", "midpoint", "euler")

# width of the gaussian / plummer core relative to the support radius
_GAUSS_WIDTH = 0.5
_PLUMMER_SCALE = 0.5


@dataclass(frozen=True)
class SimParams:
    lam: float = 50.0
    gravity: tuple = (0.0, 0.0, -1.0)
    box_length: float = 8.0
    grid_n: int = 64
    n_particles: int = 100_000
    dt: float = 1.0 / 200
    t_final: float = 1.0
    brinkman_tol: float = 1e-9
    brinkman_max_iter: int = 200
    picard_damping: float = 0.7
    scheme: str = "path_linear"
    dealias: bool = False
    drag: str = "particle"
    seed: int = 0

    @property
    def h(self) -> float:
        return self.box_length / self.grid_n

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def replace(self, **changes) -> "SimParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return build_params(d)


@dataclass(frozen=True)
class InitialData:
    """Product bump f0(x, v) = phi_x(x) phi_v(v), normalized to unit mass."""

    family: str = "gaussian_bump"
    center_x: tuple = (4.0, 4.0, 4.0)
    radius_x: float = 1.0
    center_v: tuple = (0.0, 0.0, 0.0)
    radius_v: float = 0.1
    total_mass: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not (self.radius_x > 0 and self.radius_v > 0):
            raise ConfigError("radius_x and radius_v must be positive")
        object.__setattr__(self, "center_x", tuple(float(c) for c in self.center_x))
        object.__setattr__(self, "center_v", tuple(float(c) for c in self.center_v))

    @property
    def support_diameter(self) -> float:
        return 2.0 * self.radius_x

    def profile(self, y: np.ndarray) -> np.ndarray:
        """Unnormalized bump on points y (..., 3) given in units of the radius."""
        y = np.asarray(y, dtype=float)
        if self.family == "tensor_bump":
            w = 1.0 / math.sqrt(3.0)
            return np.prod(np.clip(1.0 - np.abs(y) / w, 0.0, None), axis=-1)
        return _radial_profile(self.family, np.linalg.norm(y, axis=-1))

    def profile_integral(self) -> float:
        """Integral of ``profile`` over the unit ball (radius 1 units)."""
        if self.family == "tensor_bump":
            return (1.0 / math.sqrt(3.0)) ** 3
        val, _ = integrate.quad(lambda r: _radial_profile(self.family, r) * r * r, 0.0, 1.0,
                                epsabs=1e-14, epsrel=1e-13)
        return 4.0 * math.pi * val

    def rho0(self, x: np.ndarray) -> np.ndarray:
        """Spatial marginal rho_0(x) = int f0 dv (no periodic wrap)."""
        y = (np.asarray(x, dtype=float) - np.asarray(self.center_x)) / self.radius_x
        return self.profile(y) / (self.profile_integral() * self.radius_x**3)

    def velocity_density(self, v: np.ndarray) -> np.ndarray:
        y = (np.asarray(v, dtype=float) - np.asarray(self.center_v)) / self.radius_v
        return self.profile(y) / (self.profile_integral() * self.radius_v**3)

    def f0(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.rho0(x) * self.velocity_density(v)


def _radial_profile(family: str, r):
    r = np.asarray(r, dtype=float)
    if family == "gaussian_bump":
        s2 = 2.0 * _GAUSS_WIDTH**2
        out = np.exp(-r * r / s2) - math.exp(-1.0 / s2)
    else:
        a2 = _PLUMMER_SCALE**2
        out = (1.0 + r * r / a2) ** -2.5 - (1.0 + 1.0 / a2) ** -2.5
    return np.where(r < 1.0, out, 0.0)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def build_params(raw: dict) -> SimParams:
    """Validate a flat mapping of simulation fields into :class:`SimParams`.

    ``raw`` may also carry ``radius_x`` (or a full ``init`` mapping); the box
    size is then checked against the initial support.
    """
    names = {f.name for f in fields(SimParams)}
    kw = {}
    for key, value in raw.items():
        key = "lam" if key == "lambda" else key
        if key in names:
            kw[key] = value
    try:
        for key in ("lam", "box_length", "dt", "t_final", "brinkman_tol", "picard_damping"):
            if key in kw:
                kw[key] = float(kw[key])
        for key in ("grid_n", "n_particles", "brinkman_max_iter", "seed"):
            if key in kw:
                if float(kw[key]) != int(kw[key]):
                    raise ConfigError(f"{key} must be an integer")
                kw[key] = int(kw[key])
        if "gravity" in kw:
            kw["gravity"] = tuple(float(c) for c in kw["gravity"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed parameter: {exc}") from exc
    p = SimParams(**kw)

    if not p.lam > 0:
        raise ConfigError("lambda must be positive")
    if not p.dt > 0:
        raise ConfigError("dt must be positive")
    if not p.t_final > 0:
        raise ConfigError("t_final must be positive")
    if not p.box_length > 0:
        raise ConfigError("box_length must be positive")
    if p.grid_n < 8 or not _is_power_of_two(p.grid_n):
        raise ConfigError("grid_n must be a power of two and at least 8")
    if p.n_particles < 1:
        raise ConfigError("n_particles must be at least 1")
    if len(p.gravity) != 3:
        raise ConfigError("gravity must be a 3-vector")
    if not (0 < p.picard_damping <= 1):
        raise ConfigError("picard_damping must lie in (0, 1]")
    if p.drag not in ("particle", "grid"):
        raise ConfigError("drag must be 'particle' or 'grid'")
    if not p.brinkman_tol > 0 or p.brinkman_max_iter < 1:
        raise ConfigError("brinkman_tol must be positive and brinkman_max_iter >= 1")
    if p.scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")

    radius = raw.get("radius_x")
    if radius is None and isinstance(raw.get("init"), dict):
        radius = raw["init"].get("radius_x")
    if radius is not None and p.box_length < 4.0 * 2.0 * float(radius):
        raise ConfigError("box_length < 4× support diameter")
    return p


def build_initial_data(raw: dict) -> InitialData:
    keys = ("family", "center_x", "radius_x", "center_v", "radius_v")
    return InitialData(**{k: raw[k] for k in keys if k in raw})


@dataclass(frozen=True, eq=False)
class PhaseEnsemble:
    """Weighted particles (x_i, v_i, w_i); arrays are read-only."""

    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    box_length: float

    def __post_init__(self):
        x = np.mod(np.asarray(self.positions, dtype=float), self.box_length)
        # mod can return L itself for tiny negative inputs
        x[x >= self.box_length] = 0.0
        v = np.array(self.velocities, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if x.ndim != 2 or x.shape[1] != 3 or v.shape != x.shape or w.shape != (len(x),):
            raise ValueError("positions/velocities must be (N, 3) and weights (N,)")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        for a in (x, v, w):
            a.flags.writeable = False
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def with_state(self, positions, velocities) -> "PhaseEnsemble":
        # weights are shared, never copied or rewritten
        new = object.__new__(PhaseEnsemble)
        x = np.mod(positions, self.box_length)
        x[x >= self.box_length] = 0.0
        v = np.array(velocities, dtype=float)
        x.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(new, "positions", x)
        object.__setattr__(new, "velocities", v)
        object.__setattr__(new, "weights", self.weights)
        object.__setattr__(new, "box_length", self.box_length)
        return new


def _sample_unit(init: InitialData, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from the normalized profile on the unit ball (exact)."""
    if init.family == "tensor_bump":
        w = 1.0 / math.sqrt(3.0)
        return rng.triangular(-w, 0.0, w, size=(n, 3))
    peak = float(_radial_profile(init.family, 0.0))
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = max(2 * (n - filled), 1024)
        y = rng.uniform(-1.0, 1.0, size=(m, 3))
        r = np.linalg.norm(y, axis=1)
        accept = rng.uniform(0.0, peak, size=m) < _radial_profile(init.family, r)
        y = y[accept][: n - filled]
        out[filled:filled + len(y)] = y
        filled += len(y)
    return out


def sample_ensemble(init: InitialData, n: int, seed: int, box_length: float) -> PhaseEnsemble:
    """Draw n i.i.d. particles from f0 with uniform weights 1/n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = np.asarray(init.center_x) + init.radius_x * _sample_unit(init, n, rng)
    v = np.asarray(init.center_v) + init.radius_v * _sample_unit(init, n, rng)
    w = np.full(n, 1.0 / n)
    return PhaseEnsemble(x, v, w, box_length)
