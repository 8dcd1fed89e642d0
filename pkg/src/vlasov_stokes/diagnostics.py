"""Energies, identity residuals, convergence metrics and the ODE comparison oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .grid import Grid, cube_average_lattice

# ---------------------------------------------------------------------------
# per-step record

@dataclass
class DiagnosticsRecord:
    t: float
    mass: float
    E: float
    grad_u_L2: float
    u_Linf: float
    u_W1inf: float
    rho_Linf: float
    velocity_spread: float
    support_radius: float
    energy_identity_residual: float
    fluid_identity_residual: float
    d_lambda_delta: dict = field(default_factory=dict)
    err_u_vs_ustar_W1inf: float = math.nan
    err_u_vs_utilde_W1inf: float = math.nan
    err_rho_Linf: float = math.nan
    eta_traj: float = math.nan
    # auxiliary columns, appended after the core fields
    energy_identity_residual_normalized: float = math.nan
    u_dot_j: float = math.nan
    vbar_rho_sq: float = math.nan
    grad_u_Linf: float = math.nan
    M_meas: float = math.nan
    brinkman_iterations: int = 0
    brinkman_residual: float = math.nan
    div_u: float = math.nan
    div_u_tilde: float = math.nan
    div_u_star: float = math.nan
    mass_star: float = math.nan
    rho_star_Linf: float = math.nan

    @classmethod
    def from_dict(cls, d: dict, delta_list=()) -> "DiagnosticsRecord":
        names = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        kw["d_lambda_delta"] = {float(x): d[delta_key(x)] for x in delta_list if delta_key(x) in d}
        return cls(**kw)

    def columns(self) -> list:
        out = []
        for f in fields(self):
            if f.name == "d_lambda_delta":
                out.extend(delta_key(x) for x in self.d_lambda_delta)
            else:
                out.append(f.name)
        return out

    def values(self) -> list:
        out = []
        for f in fields(self):
            if f.name == "d_lambda_delta":
                out.extend(self.d_lambda_delta.values())
            else:
                out.append(getattr(self, f.name))
        return out

    def as_dict(self) -> dict:
        return dict(zip(self.columns(), self.values()))


def delta_key(delta: float) -> str:
    return f"d_lambda_delta_{delta:g}"


def record_series(records, name: str) -> np.ndarray:
    return np.array([r.as_dict()[name] for r in records], dtype=float)


# ---------------------------------------------------------------------------
# energies and identities

def kinetic_energy(ensemble) -> float:
    return float(np.sum(ensemble.weights * np.sum(ensemble.velocities**2, axis=1)))


def energy_identity_residual(e_prev: float, e_next: float, dt: float, rhs_prev: float) -> float:
    """Forward-difference residual (E_{n+1} - E_n)/dt - rhs_n of the particle energy balance.

    ``rhs_n`` is 2 lam (g . int j - sum_i w_i |u(x_i) - v_i|^2 - |grad u|_2^2)
    evaluated at the start of the step.
    """
    return (e_next - e_prev) / dt - rhs_prev


def particle_energy_rhs(lam, g, ensemble, u_at_particles, j_total, grad_u_sq) -> float:
    drag = float(np.sum(ensemble.weights * np.sum((u_at_particles - ensemble.velocities) ** 2, axis=1)))
    return 2.0 * lam * (float(np.dot(g, j_total)) - drag - grad_u_sq)


def fluid_identity_residual_from_terms(terms: dict, eps: float = 1e-300) -> float:
    lhs = terms["grad_u_sq"] + terms["u_rho_sq"]
    return abs(lhs - terms["u_dot_j"]) / max(abs(terms["u_dot_j"]), eps)


def fluid_identity_residual(u: np.ndarray, rho: np.ndarray, j: np.ndarray, grid: Grid,
                            drag=None) -> float:
    """|(|grad u|^2 + |u|^2_{L2_rho}) - (u, j)| / max(|(u, j)|, eps)."""
    from .fluid import fluid_energy_terms

    return fluid_identity_residual_from_terms(fluid_energy_terms(u, rho, j, grid, drag))


# ---------------------------------------------------------------------------
# convergence metrics

def d_lambda_delta(rho_l: np.ndarray, rho_s: np.ndarray, delta: float, grid: Grid,
                   spacing: float | None = None) -> float:
    """Largest difference of side-delta cube averages, corners on a lattice (default h/2)."""
    diff = cube_average_lattice(rho_l - rho_s, delta, grid, spacing)
    return float(np.abs(diff).max())


def minimal_image(d: np.ndarray, box_length: float) -> np.ndarray:
    return d - box_length * np.round(d / box_length)


def trajectory_distance(x_kinetic: np.ndarray, x_limit: np.ndarray, box_length: float) -> float:
    """max over index-paired particles/tracers of the minimal-image distance."""
    x_kinetic = np.asarray(x_kinetic)
    x_limit = np.asarray(x_limit)
    if x_kinetic.shape != x_limit.shape:
        raise ValueError("particle and tracer sets are not paired (shape mismatch)")
    d = minimal_image(x_kinetic - x_limit, box_length)
    return float(np.sqrt(np.max(np.sum(d * d, axis=1))))


def boundary_layer_profile(times, errors, lam: float) -> np.ndarray:
    """Table of (lam t, error) rows."""
    times = np.asarray(times, dtype=float)
    return np.column_stack([lam * times, np.asarray(errors, dtype=float)])


def resample_profile(profile: np.ndarray, fast_times) -> np.ndarray:
    """Linear interpolation of a (lam t, err) profile on the log of the error."""
    return np.exp(np.interp(fast_times, profile[:, 0], np.log(profile[:, 1])))


@dataclass
class RateFit:
    coefficient: float
    exponent: float
    r_squared: float


def fit_rate(xs, ys, model: str = "power") -> RateFit:
    """Least squares in log space: ys = c xs^p ("power") or ys = c exp(p xs) ("exponential")."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 3 or len(xs) != len(ys):
        raise ValueError("need at least three (x, y) samples")
    if np.any(ys <= 0):
        raise ValueError("fit_rate needs positive ys")
    if model == "power":
        if np.any(xs <= 0):
            raise ValueError("power-law fit needs positive xs")
        X = np.log(xs)
    elif model == "exponential":
        X = xs
    else:
        raise ValueError(f"unknown model {model!r}")
    Y = np.log(ys)
    A = np.column_stack([np.ones_like(X), X])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((Y - pred) ** 2))
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(math.exp(coef[0])), float(coef[1]), r2)


# ---------------------------------------------------------------------------
# ODE comparison lemma

class LemmaHypothesisError(ValueError):
    """An ODE instance does not satisfy the lemma's premises."""


@dataclass
class OdeLemmaInstance:
    """Data (a0, b0, alpha, beta, lam, T) of one comparison-lemma test.

    ``alpha_knots``/``alpha_values`` describe a piecewise-linear alpha on
    [0, T].  ``slope`` in [-1, 1] (scalar or knot values) fixes
    da/dt = slope * b, i.e. how the constraint |da/dt| <= b is saturated.
    For ``terminal_condition == "a(T)=0"`` the instance is integrated backward
    from a(T) = 0, b(T) = b0; for ``"b(0)=0"`` forward from a(0) = a0, b(0) = 0.
    """

    a0: float
    b0: float
    alpha_knots: np.ndarray
    alpha_values: np.ndarray
    beta: float
    lam: float
    T: float
    terminal_condition: str = "a(T)=0"
    slope: float = -1.0

    def alpha_sup(self) -> float:
        return float(np.max(self.alpha_values))

    def check(self) -> None:
        if self.terminal_condition not in ("a(T)=0", "b(0)=0"):
            raise LemmaHypothesisError(f"unknown terminal condition {self.terminal_condition!r}")
        if not self.T > 0:
            raise LemmaHypothesisError("T must be positive")
        if np.any(np.asarray(self.alpha_values) < 0):
            raise LemmaHypothesisError("alpha must be nonnegative")
        if self.beta < 0:
            raise LemmaHypothesisError("beta must be nonnegative")
        if self.a0 < 0 or self.b0 < 0:
            raise LemmaHypothesisError("a0 and b0 must be nonnegative")
        if self.lam < 4.0 * max(1.0, self.alpha_sup()):
            raise LemmaHypothesisError("lambda < 4 max(1, sup alpha)")
        if self.terminal_condition == "b(0)=0" and self.beta != 0:
            raise LemmaHypothesisError("part (ii) requires beta = 0")
        if np.any(np.abs(np.atleast_1d(self.slope)) > 1):
            raise LemmaHypothesisError("|da/dt| <= b requires |slope| <= 1")


@dataclass
class OdeLemmaReport:
    ok: bool
    violations: list
    max_ratio_1a: float = math.nan
    max_ratio_1b: float = math.nan
    max_ratio_2: float = math.nan
    n_steps: int = 0
    min_a: float = math.nan


def integrate_ode_instance(inst: OdeLemmaInstance, max_step: float | None = None):
    """RK4 for the saturated system a' = slope b, b' = lam (alpha a - b) + beta exp(-lam s).

    Returns (times, a, b) on an increasing time grid.
    """
    lam, beta, T = inst.lam, inst.beta, inst.T
    # 0.02/lam keeps the RK4 drift of the decaying mode below 1e-7 over lam T <= 100
    hmax = 0.02 / lam if max_step is None else min(max_step, 0.1 / lam)
    n = max(int(math.ceil(T / hmax)), 1)
    h = T / n
    knots = np.asarray(inst.alpha_knots, dtype=float)
    avals = np.asarray(inst.alpha_values, dtype=float)
    slope = np.atleast_1d(np.asarray(inst.slope, dtype=float))
    ts = np.linspace(0.0, T, 2 * n + 1)
    alpha = np.interp(ts, knots, avals).tolist()
    sl = (np.interp(ts, knots, slope) if slope.size > 1 else np.full(ts.size, slope[0])).tolist()
    forcing = (beta * np.exp(-lam * ts)).tolist()
    a = np.empty(n + 1)
    b = np.empty(n + 1)

    def rhs(k, av, bv):
        return sl[k] * bv, lam * (alpha[k] * av - bv) + forcing[k]

    if inst.terminal_condition == "a(T)=0":
        av, bv = 0.0, float(inst.b0)
        a[n], b[n] = av, bv
        hh = -h
        for i in range(n, 0, -1):
            k0, km, k1 = 2 * i, 2 * i - 1, 2 * i - 2
            da1, db1 = rhs(k0, av, bv)
            da2, db2 = rhs(km, av + 0.5 * hh * da1, bv + 0.5 * hh * db1)
            da3, db3 = rhs(km, av + 0.5 * hh * da2, bv + 0.5 * hh * db2)
            da4, db4 = rhs(k1, av + hh * da3, bv + hh * db3)
            av += hh / 6.0 * (da1 + 2 * da2 + 2 * da3 + da4)
            bv += hh / 6.0 * (db1 + 2 * db2 + 2 * db3 + db4)
            a[i - 1], b[i - 1] = av, bv
    else:
        av, bv = float(inst.a0), 0.0
        a[0], b[0] = av, bv
        for i in range(n):
            k0, km, k1 = 2 * i, 2 * i + 1, 2 * i + 2
            da1, db1 = rhs(k0, av, bv)
            da2, db2 = rhs(km, av + 0.5 * h * da1, bv + 0.5 * h * db1)
            da3, db3 = rhs(km, av + 0.5 * h * da2, bv + 0.5 * h * db2)
            da4, db4 = rhs(k1, av + h * da3, bv + h * db3)
            av += h / 6.0 * (da1 + 2 * da2 + 2 * da3 + da4)
            bv += h / 6.0 * (db1 + 2 * db2 + 2 * db3 + db4)
            a[i + 1], b[i + 1] = av, bv
    return ts[::2], a, b


def _piecewise_linear_integral(knots, values, ts) -> np.ndarray:
    """Exact int_0^t of the piecewise-linear interpolant through (knots, values)."""
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    at_knots = np.concatenate([[0.0], np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(knots))])
    k = np.clip(np.searchsorted(knots, ts, side="right") - 1, 0, len(knots) - 2)
    t0 = knots[k]
    v0 = values[k]
    v_t = np.interp(ts, knots, values)
    return at_knots[k] + 0.5 * (v0 + v_t) * (ts - t0)


def verify_ode_lemma(inst: OdeLemmaInstance, slack: float = 1e-6, max_step: float | None = None) -> OdeLemmaReport:
    """Integrate an instance and test the lemma's conclusions on the time grid.

    Case a(T)=0: a <= (2/lam) b + (4/lam^2) beta e^{-lam t} and, for all s <= t,
    b(t) <= exp(int_s^t (2 alpha - lam)) (b(s) + (2 beta/lam) e^{-lam s}).
    Case b(0)=0: b <= 2 sup(alpha) a.  Each comparison allows a relative slack.

    Raises :class:`LemmaHypothesisError` if the premises fail, including a
    trajectory that leaves the nonnegative quadrant.
    """
    inst.check()
    ts, a, b = integrate_ode_instance(inst, max_step)
    tiny = 1e-12 * max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    if a.min() < -tiny or b.min() < -tiny:
        raise LemmaHypothesisError("trajectory leaves the nonnegative quadrant (a, b >= 0 fails)")
    lam, beta = inst.lam, inst.beta
    violations = []
    rep = OdeLemmaReport(True, violations, n_steps=len(ts) - 1, min_a=float(a.min()))
    if inst.terminal_condition == "a(T)=0":
        bound_a = 2.0 / lam * b + 4.0 / lam**2 * beta * np.exp(-lam * ts)
        scale_a = max(float(np.max(np.abs(a))), float(np.max(bound_a)), 1e-300)
        excess = a - bound_a
        rep.max_ratio_1a = float(np.max(excess)) / scale_a
        if np.any(excess > slack * scale_a):
            violations.append(("1a", float(ts[int(np.argmax(excess))])))
        # b(t) e^{-I(t)} <= min_{s<=t} (b(s) + 2 beta/lam e^{-lam s}) e^{-I(s)},  I(t) = int_0^t (2 alpha - lam)
        growth = 2.0 * _piecewise_linear_integral(inst.alpha_knots, inst.alpha_values, ts) - lam * ts
        w = np.exp(-growth)
        lhs = b * w
        best = np.minimum.accumulate((b + 2.0 * beta / lam * np.exp(-lam * ts)) * w)
        scale_b = max(float(np.max(lhs)), 1e-300)
        excess_b = lhs - best * (1.0 + slack)
        rep.max_ratio_1b = float(np.max(lhs - best)) / scale_b
        if np.any(excess_b > 1e-300):
            violations.append(("1b", float(ts[int(np.argmax(excess_b))])))
    else:
        bound = 2.0 * inst.alpha_sup() * a
        scale = max(float(np.max(np.abs(b))), float(np.max(np.abs(bound))), 1e-300)
        excess = b - bound
        rep.max_ratio_2 = float(np.max(excess)) / scale
        if np.any(excess > slack * scale):
            violations.append(("2", float(ts[int(np.argmax(excess))])))
    rep.ok = not violations
    return rep


def random_ode_instance(rng: np.random.Generator, case: str) -> OdeLemmaInstance:
    """Random instance: piecewise-linear alpha in [0, lam/4], beta in [0, 10]."""
    lam = float(rng.uniform(4.0, 40.0))
    T = float(rng.uniform(0.2, 2.0))
    k = int(rng.integers(2, 8))
    knots = np.sort(np.concatenate([[0.0, T], rng.uniform(0.0, T, size=k - 2)]))
    values = rng.uniform(0.0, lam / 4.0, size=k)
    if case == "i":
        slope = -rng.uniform(0.0, 1.0, size=k)
        return OdeLemmaInstance(0.0, float(rng.uniform(0.0, 5.0)), knots, values,
                                float(rng.uniform(0.0, 10.0)), lam, T, "a(T)=0", slope)
    slope = rng.uniform(-1.0, 1.0, size=k)
    return OdeLemmaInstance(float(rng.uniform(0.1, 5.0)), 0.0, knots, values, 0.0, lam, T,
                            "b(0)=0", slope)


def ode_lemma_campaign(n_random: int = 1000, seed: int = 0, cases=("i", "ii")) -> dict:
    """Check n_random admissible random instances per case.

    Draws whose trajectories violate the premises are discarded and redrawn.
    Returns {case: {"violations": [(index, report)], "rejected": count}}.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for case in cases:
        bad, rejected, done = [], 0, 0
        while done < n_random:
            inst = random_ode_instance(rng, case)
            try:
                rep = verify_ode_lemma(inst)
            except LemmaHypothesisError:
                rejected += 1
                continue
            if not rep.ok:
                bad.append((done, rep))
            done += 1
        out[case] = {"violations": bad, "rejected": rejected}
    return out
