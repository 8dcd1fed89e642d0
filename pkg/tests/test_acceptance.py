"""Acceptance criteria on the standard desk-scale scenario.

Grid 64^3, 1e5 particles, L = 8, T = 1, dt = 1/200, lambda in {10, 20, 40, 80, 160}.
The sweep is run once per session through the command-line driver (about 25 minutes
on one core); every criterion prints one PASS/FAIL line in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from vlasov_stokes import InitialData, build_params
from vlasov_stokes.cli import (CHAIN_RTOL, DIV_TOL, FLUID_IDENTITY_TOL, MASS_TOL, main, oseen_comparison,
                               read_csv)
from vlasov_stokes.diagnostics import fit_rate, ode_lemma_campaign, resample_profile, boundary_layer_profile
from vlasov_stokes.fluid import oseen_tensor
from vlasov_stokes.kinetic import DiagConfig, advance, run_vlasov_stokes, step_jacobian

LAMBDAS = (10.0, 20.0, 40.0, 80.0, 160.0)
T_FINAL = 1.0
DELTA = 0.8           # 0.1 L
DELTA_HALF = 0.4
G = np.array([0.0, 0.0, -1.0])


def _load(path):
    header, rows = read_csv(path)
    cols = {h: np.array([float(r[i]) if r[i] != "" else math.nan for r in rows]) for i, h in enumerate(header)}
    return cols


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("standard_sweep")
    cfg = {"lambda_list": list(LAMBDAS), "delta_list": [DELTA, DELTA_HALF], "t_final": T_FINAL,
           "dt": 1 / 200}
    (out / "config.json").write_text(json.dumps(cfg))
    status = main(["sweep", str(out / "config.json"), "--output-dir", str(out), "--threads", "1"])
    runs = {lam: _load(out / f"lambda_{lam:g}" / "diagnostics.csv") for lam in LAMBDAS}
    return status, runs


@pytest.fixture(scope="session")
def lambda50_run():
    p = build_params({"lambda": 50.0, "t_final": 3 / 50})
    return run_vlasov_stokes(p, InitialData(), DiagConfig((DELTA,)))


def _at(col, t_col, t):
    return float(col[int(np.argmin(np.abs(t_col - t)))])


def _monotone(values):
    return all(b <= a for a, b in zip(values, values[1:]))


def _fmt(values):
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


# ---------------------------------------------------------------------------
# structural invariants over the acceptance runs

def test_c01_mass_conservation(sweep, lambda50_run, criterion):
    _, runs = sweep
    worst = 0.0
    for r in runs.values():
        worst = max(worst, np.abs(r["mass"] - 1).max(), np.abs(r["mass_star"] - 1).max())
    for r in lambda50_run.records:
        worst = max(worst, abs(r.mass - 1), abs(r.mass_star - 1))
    criterion(1, "mass conservation of rho and rho*", worst <= MASS_TOL,
              f"max |h^3 sum rho - 1| = {worst:.1e} (limit {MASS_TOL:.0e})")


def test_c02_divergence_free(sweep, lambda50_run, criterion):
    _, runs = sweep
    worst = max(max(r[c].max() for c in ("div_u", "div_u_tilde", "div_u_star")) for r in runs.values())
    worst = max(worst, max(max(r.div_u, r.div_u_tilde, r.div_u_star) for r in lambda50_run.records))
    criterion(2, "divergence-free u, u*, u~", worst <= DIV_TOL,
              f"max relative divergence {worst:.1e} (limit {DIV_TOL:.0e})")


def test_c03_fluid_energy_identity(sweep, lambda50_run, criterion):
    status, runs = sweep
    worst, chain = 0.0, True
    for r in runs.values():
        worst = max(worst, r["fluid_identity_residual"].max())
        chain &= bool(np.all(r["u_dot_j"] <= r["vbar_rho_sq"] * (1 + CHAIN_RTOL)))
        chain &= bool(np.all(r["vbar_rho_sq"] <= r["E"] * (1 + CHAIN_RTOL)))
    for r in lambda50_run.records:
        worst = max(worst, r.fluid_identity_residual)
        chain &= r.u_dot_j <= r.vbar_rho_sq * (1 + CHAIN_RTOL) and r.vbar_rho_sq <= r.E * (1 + CHAIN_RTOL)
    criterion(3, "fluid energy identity and inequality chain",
              worst <= FLUID_IDENTITY_TOL and chain and status == 0,
              f"max residual {worst:.1e} (limit {FLUID_IDENTITY_TOL:.0e}), chain {'holds' if chain else 'broken'}, "
              f"sweep exit {status}")


def test_c04_particle_energy_identity_order(criterion):
    # reduced scale: grid 32, 2e4 particles, lambda 10, T = 0.2, dt = 1/50 ... 1/400
    residuals = []
    for dt in (1 / 50, 1 / 100, 1 / 200, 1 / 400):
        p = build_params({"lambda": 10.0, "grid_n": 32, "n_particles": 20000, "t_final": 0.2, "dt": dt})
        res = run_vlasov_stokes(p, InitialData(), DiagConfig((2.0,)), with_limit=False)
        residuals.append(max(abs(r.energy_identity_residual_normalized) for r in res.records))
    factors = [a / b for a, b in zip(residuals, residuals[1:])]
    criterion(4, "particle energy identity, first order in dt", all(f >= 1.8 for f in factors),
              f"max normalized residual {_fmt(residuals)}, halving factors {_fmt(factors)} (need >= 1.8)")


def test_c05_push_exactness(criterion):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 8, (100, 3))
    v = rng.standard_normal((100, 3))
    u0 = np.array([0.3, -0.1, 0.2])
    a = G + u0
    dt = 0.01
    worst = 0.0
    for lam_dt in (1e-3, 1.0, 1e3):
        lam = lam_dt / dt
        xn, vn = advance(x, v, lambda y: np.broadcast_to(u0, y.shape), lam, G, dt)
        e = math.exp(-lam * dt)
        x_ref = x + a * dt + (v - a) * (1 - e) / lam
        v_ref = a + (v - a) * e
        worst = max(worst, np.abs(xn - x_ref).max(), np.abs(vn - v_ref).max())
    contracts = True
    for lam_dt in np.logspace(-6, 6, 25):
        lam = lam_dt / dt
        _, vn = advance(x, v, lambda y: np.broadcast_to(u0, y.shape), lam, G, dt, "euler")
        contracts &= bool(np.all(np.linalg.norm(vn - a, axis=1) <= np.linalg.norm(v - a, axis=1)))
    criterion(5, "push exactness and contraction", worst <= 1e-13 and contracts,
              f"closed-form error {worst:.1e} (limit 1e-13), contraction {'holds' if contracts else 'fails'}")


def test_c06_phase_volume(criterion):
    u0 = np.array([0.2, 0.0, -0.1])
    uniform = 0.0
    for lam, dt in ((1.0, 0.01), (50.0, 0.005), (7.0, 0.3)):
        # the step is affine in (x, v) for uniform u, so a unit stencil differences it exactly
        J = step_jacobian([1.0, 2.0, 3.0], [0.1, 0.0, -0.2], lambda y: np.broadcast_to(u0, y.shape),
                          lam, G, dt, eps=1.0)
        uniform = max(uniform, abs(np.linalg.det(J) - math.exp(-3 * lam * dt)))
    A = np.array([[0.0, 0.8, 0.0], [-0.3, 0.1, 0.5], [0.2, -0.4, -0.1]])
    lam, grad_sq = 5.0, float(np.sum(A * A))
    devs, bounded = [], True
    for dt in (0.04, 0.02, 0.01):
        J = step_jacobian([0.3, -0.2, 0.5], [0.1, 0.2, -0.3], lambda y: y @ A.T, lam, G, dt, eps=1e-5)
        dev = abs(np.linalg.det(J) / math.exp(-3 * lam * dt) - 1)
        bounded &= dev <= grad_sq * dt * dt
        devs.append(dev)
    orders = [math.log2(a / b) for a, b in zip(devs, devs[1:])]
    ok = uniform <= 1e-12 and bounded and all(o >= 1.8 for o in orders)
    criterion(6, "phase-volume identity", ok,
              f"uniform |det - e^(-3 lam dt)| = {uniform:.1e}; linear-field deviation {_fmt(devs)}, "
              f"measured orders {_fmt(orders)}")


def test_c07_velocity_concentration(lambda50_run, criterion):
    t = np.array([r.t for r in lambda50_run.records])
    s = np.array([r.velocity_spread for r in lambda50_run.records])
    keep = t <= 3 / 50 + 1e-12
    rate = fit_rate(t[keep], s[keep], "exponential").exponent
    criterion(7, "velocity concentration at lambda = 50", abs(rate + 50) <= 5.0,
              f"fitted rate {rate:.2f} (target -50 +- 10%)")


# ---------------------------------------------------------------------------
# convergence on the lambda sweep

def test_c08_density_bound(sweep, criterion):
    _, runs = sweep
    ratios = []
    for r in runs.values():
        ratios.append(float(np.max(r["rho_Linf"] / (r["rho_Linf"][0] * r["M_meas"] ** 3))))
    criterion(8, "density bound by M_meas^3", max(ratios) <= 1.2,
              f"max rho_inf / (rho_inf(0) M^3) per lambda {_fmt(ratios)} (limit 1.2)")


def test_c09_intermediate_velocity_decay(sweep, criterion):
    _, runs = sweep
    vals = [_at(r["err_u_vs_utilde_W1inf"], r["t"], T_FINAL / 2) for r in runs.values()]
    rate = fit_rate(LAMBDAS, vals).exponent
    criterion(9, "|u - u~|_W1inf at T/2 decays in lambda", _monotone(vals) and rate <= -0.4,
              f"values {_fmt(vals)}, power-law exponent {rate:.2f} (need monotone, <= -0.4)")


def test_c10_boundary_layer(sweep, criterion):
    _, runs = sweep
    decay = {}
    for lam, r in runs.items():
        e0 = r["err_u_vs_ustar_W1inf"][0]
        decay[lam] = _at(r["err_u_vs_ustar_W1inf"], r["t"], 5 / lam) / e0
    prof = {lam: boundary_layer_profile(runs[lam]["t"], runs[lam]["err_u_vs_ustar_W1inf"], lam)
            for lam in (40.0, 80.0)}
    s = prof[80.0][prof[80.0][:, 0] <= 5 + 1e-9, 0]
    a, b = resample_profile(prof[40.0], s), resample_profile(prof[80.0], s)
    gap = float(np.max(np.abs(a - b) / np.maximum(a, b)))
    ok = all(d <= 0.2 for d in decay.values()) and gap <= 0.2
    criterion(10, "boundary layer of width 1/lambda", ok,
              f"err(lam t = 5)/err(0) {_fmt(decay.values())} (limit 0.2); "
              f"lambda 40 vs 80 profile gap on lam t in [0, 5] {gap:.1%} (limit 20%)")


def test_c11_density_convergence(sweep, criterion):
    _, runs = sweep
    rho = [float(r["err_rho_Linf"].max()) for r in runs.values()]
    d = [float(r[f"d_lambda_delta_{DELTA:g}"].max()) for r in runs.values()]
    d_half = [float(r[f"d_lambda_delta_{DELTA_HALF:g}"].max()) for r in runs.values()]
    plateau_ratio = d_half[-1] / d[-1]
    ok = (_monotone(rho) and _monotone(d) and rho[-1] <= 0.7 * rho[0] and d[-1] <= 0.7 * d[0]
          and 0.35 <= plateau_ratio <= 0.65)
    criterion(11, "density convergence and d_(lambda,delta) plateau", ok,
              f"sup |rho - rho*| {_fmt(rho)}; d(0.1L) {_fmt(d)}; "
              f"plateau d(0.05L)/d(0.1L) at largest lambda {plateau_ratio:.2f} (need 0.5 +- 30%)")


def test_c12_velocity_convergence(sweep, criterion):
    _, runs = sweep
    vals = []
    for r in runs.values():
        window = (r["t"] >= T_FINAL / 2 - 1e-12) & (r["t"] <= T_FINAL + 1e-12)
        vals.append(float(r["err_u_vs_ustar_W1inf"][window].max()))
    criterion(12, "|u - u*|_W1inf on [T/2, T] decreases in lambda",
              _monotone(vals) and vals[-1] <= 0.7 * vals[0],
              f"values {_fmt(vals)}, total reduction {1 - vals[-1] / vals[0]:.0%} (need >= 30%)")


def test_c13_trajectory_convergence(sweep, criterion):
    _, runs = sweep
    vals = [float(r["eta_traj"][-1]) for r in runs.values()]
    criterion(13, "trajectory distance eta(T) decreases in lambda",
              _monotone(vals) and vals[-1] <= 0.7 * vals[0],
              f"values {_fmt(vals)}, total reduction {1 - vals[-1] / vals[0]:.0%} (need >= 30%)")


# ---------------------------------------------------------------------------
# oracles and reproducibility

def test_c14_ode_lemma_campaign(criterion):
    t0 = time.perf_counter()
    res = ode_lemma_campaign(1000, seed=0)
    elapsed = time.perf_counter() - t0
    nviol = {c: len(v["violations"]) for c, v in res.items()}
    criterion(14, "ODE comparison lemma, 1000 random instances per case",
              sum(nviol.values()) == 0 and elapsed <= 60,
              f"violations {nviol}, runtime {elapsed:.1f} s (limit 60 s)")


def test_c15_oseen_oracle(criterion):
    phi = oseen_tensor([1.0, 0.0, 0.0])
    exact = np.diag([1 / (4 * math.pi), 1 / (8 * math.pi), 1 / (8 * math.pi)])
    kernel = float(np.abs(phi - exact).max())
    e8, e16 = oseen_comparison(8.0, 64), oseen_comparison(16.0, 128)
    criterion(15, "Oseen kernel and spectral vs direct summation",
              kernel <= 1e-14 and e8 <= 0.02 and e16 < e8,
              f"kernel error {kernel:.1e}; relative gap {e8:.2%} (L=8), {e16:.2%} (L=16)")


def test_c16_determinism(tmp_path, criterion):
    # standard resolution and seed, shortened to 10 steps
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"t_final": 0.05}))
    blobs = []
    for name in ("first", "second"):
        assert main(["run", str(cfg), "--output-dir", str(tmp_path / name), "--threads", "1"]) == 0
        blobs.append((tmp_path / name / "diagnostics.csv").read_bytes())
    criterion(16, "byte-identical diagnostics.csv for a repeated run", blobs[0] == blobs[1],
              f"{len(blobs[0])} bytes, identical: {blobs[0] == blobs[1]}")
