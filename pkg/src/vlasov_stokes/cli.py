"""Command-line driver: scenario runs, lambda sweeps and the property suite.

Configuration is one flat JSON object.  Every key is optional; the resolved
values (defaults filled in) are written to ``resolved_config.json`` next to
every output.

Simulation keys
    lambda, gravity, box_length, grid_n, n_particles, dt, t_final,
    brinkman_tol, brinkman_max_iter, picard_damping, scheme (path_linear | midpoint | euler),
    dealias, drag (particle | grid), seed
Initial-data keys
    family, center_x, radius_x, center_v, radius_v
Diagnostic keys
    delta_list, cube_lattice_spacing, snapshot_stride, diag_stride
Sweep keys
    lambda_list, report_times (times at which err_u_vs_ustar_W1inf is tabulated;
    default [t_final/2, t_final])
Output
    output_dir

Sections ``sim``, ``init``, ``diag`` and ``sweep`` holding the same keys are
accepted and flattened.

Exit codes: 0 success, 1 failed invariant or property, 2 invalid
configuration, 3 solver failure (the failing step is reported on stderr).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import diagnostics as dg
from .core import ConfigError, InitialData, SimParams, build_initial_data, build_params, sample_ensemble
from .fluid import (BrinkmanConvergenceError, ParticleDrag, fluid_energy_terms, oseen_tensor,
                    oseen_velocity_field, solve_brinkman, solve_stokes)
from .grid import (Grid, deposit_current, deposit_density, dump_field, interpolate, mean_velocity,
                   relative_divergence)
from .kinetic import (DiagConfig, advance, dump_ensemble, phase_volume_factor, relaxation_factors,
                      run_vlasov_stokes)
from .limit import SupportTooLargeError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

_SIM_KEYS = {f.name for f in fields(SimParams)} | {"lambda"}
_INIT_KEYS = {"family", "center_x", "radius_x", "center_v", "radius_v"}
_DIAG_KEYS = {"delta_list", "cube_lattice_spacing", "snapshot_stride", "diag_stride"}
_SWEEP_KEYS = {"lambda_list", "report_times"}
_SECTIONS = ("sim", "init", "diag", "sweep")

# fixed thresholds of the structural invariants
MASS_TOL = 1e-12
DIV_TOL = 1e-10
FLUID_IDENTITY_TOL = 1e-8
CHAIN_RTOL = 1e-12


@dataclass(frozen=True)
class ScenarioConfig:
    sim: SimParams
    init: InitialData
    diag: DiagConfig
    lambda_list: tuple = (10.0, 20.0, 40.0, 80.0, 160.0)
    report_times: tuple | None = None
    output_dir: str = "output"

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        flat = {}
        for key, value in raw.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                flat.update(value)
            else:
                flat[key] = value
        unknown = set(flat) - _SIM_KEYS - _INIT_KEYS - _DIAG_KEYS - _SWEEP_KEYS - {"output_dir"}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "lambda" in flat and "lam" in flat:
            raise ConfigError("give either 'lambda' or 'lam', not both")

        sim = build_params(flat)
        try:
            init = build_initial_data(flat)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid initial data: {exc}") from exc
        if sim.box_length < 4.0 * init.support_diameter:
            raise ConfigError("box_length < 4x support diameter of the initial data")

        try:
            deltas = tuple(float(d) for d in flat.get("delta_list", (0.1 * sim.box_length,)))
            spacing = flat.get("cube_lattice_spacing")
            spacing = None if spacing is None else float(spacing)
            snap = int(flat.get("snapshot_stride", 0))
            stride = int(flat.get("diag_stride", 1))
            lams = tuple(float(x) for x in flat.get("lambda_list", cls.lambda_list))
            times = flat.get("report_times")
            times = None if times is None else tuple(float(t) for t in times)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed diagnostic or sweep entry: {exc}") from exc
        if any(d < 2.0 * sim.h - 1e-12 for d in deltas):
            raise ConfigError("delta_list entries must be at least 2h")
        if spacing is not None and not spacing > 0:
            raise ConfigError("cube_lattice_spacing must be positive")
        if snap < 0 or stride < 1:
            raise ConfigError("snapshot_stride must be >= 0 and diag_stride >= 1")
        if not lams:
            raise ConfigError("lambda_list must be nonempty")
        if any(x <= 0 for x in lams):
            raise ConfigError("lambda must be positive")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError("lambda_list must be strictly increasing")
        if times is not None and any(not 0 <= t <= sim.t_final for t in times):
            raise ConfigError("report_times must lie in [0, t_final]")
        diag = DiagConfig(delta_list=deltas, cube_lattice_spacing=spacing,
                          snapshot_stride=snap, diag_stride=stride)
        return cls(sim, init, diag, lams, times, str(flat.get("output_dir", cls.output_dir)))

    def to_dict(self) -> dict:
        out = {"lambda" if k == "lam" else k: v for k, v in asdict(self.sim).items()}
        out.update({k: getattr(self.init, k) for k in sorted(_INIT_KEYS)})
        out.update(delta_list=list(self.diag.delta_list),
                   cube_lattice_spacing=self.diag.cube_lattice_spacing,
                   snapshot_stride=self.diag.snapshot_stride, diag_stride=self.diag.diag_stride,
                   lambda_list=list(self.lambda_list),
                   report_times=list(self.resolved_report_times()),
                   output_dir=self.output_dir)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}

    def resolved_report_times(self) -> tuple:
        if self.report_times is not None:
            return self.report_times
        return (0.5 * self.sim.t_final, self.sim.t_final)

    def with_lambda(self, lam: float) -> "ScenarioConfig":
        return ScenarioConfig(self.sim.replace(lam=lam), self.init, self.diag, self.lambda_list,
                              self.report_times, self.output_dir)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.from_dict(read_json(path))


def write_resolved_config(cfg: ScenarioConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# CSV

def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else format_value(v) for v in row])


def write_diagnostics_csv(path, records) -> None:
    write_csv(path, records[0].columns(), [r.values() for r in records])


def read_csv(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# invariants

def check_invariants(records, brinkman_tol: float, with_limit: bool = True) -> list:
    """Names of the structural invariants violated anywhere in ``records``."""
    del brinkman_tol  # the identity threshold is fixed, independent of the solve tolerance
    failed = []

    def col(name):
        return dg.record_series(records, name)

    if np.any(np.abs(col("mass") - 1.0) > MASS_TOL):
        failed.append("mass")
    if with_limit and np.any(np.abs(col("mass_star") - 1.0) > MASS_TOL):
        failed.append("mass_star")
    divs = ["div_u", "div_u_tilde"] + (["div_u_star"] if with_limit else [])
    if any(np.any(col(c) > DIV_TOL) for c in divs):
        failed.append("divergence")
    if np.any(col("fluid_identity_residual") > FLUID_IDENTITY_TOL):
        failed.append("fluid_identity")
    uj, vb, e = col("u_dot_j"), col("vbar_rho_sq"), col("E")
    if np.any(uj > vb + CHAIN_RTOL * np.abs(vb)) or np.any(vb > e + CHAIN_RTOL * e):
        failed.append("energy_chain")
    values = np.array([v for r in records for v in r.values()], dtype=float)
    nan_ok = set() if with_limit else {"err_u_vs_ustar_W1inf", "err_rho_Linf", "eta_traj",
                                        "div_u_star", "mass_star", "rho_star_Linf"}
    cols = records[0].columns()
    for i, name in enumerate(cols):
        if name in nan_ok or name.startswith("d_lambda_delta") and not with_limit:
            continue
        if not np.all(np.isfinite(values[i::len(cols)])):
            failed.append(f"finite:{name}")
            break
    return failed


# ---------------------------------------------------------------------------
# commands

def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def execute_run(cfg: ScenarioConfig, out_dir: Path, ensemble=None):
    """Run one scenario into ``out_dir``; returns (RunResult, failed invariants)."""
    out_dir = Path(out_dir)
    write_resolved_config(cfg, out_dir)
    p = cfg.sim
    stride = cfg.diag.snapshot_stride or p.n_steps
    diag = DiagConfig(cfg.diag.delta_list, cfg.diag.cube_lattice_spacing, stride, cfg.diag.diag_stride)
    res = run_vlasov_stokes(p, cfg.init, diag, ensemble=ensemble)
    write_diagnostics_csv(out_dir / "diagnostics.csv", res.records)

    grid = Grid(p.grid_n, p.box_length)
    (out_dir / "fields").mkdir(exist_ok=True)
    (out_dir / "snapshots").mkdir(exist_ok=True)
    for t, entry in res.field_snapshots:
        step = round(t / p.dt)
        for name, arr in entry.items():
            dump_field(out_dir / "fields" / f"{name}_{step:06d}", arr, grid, t)
    for t, ens in res.snapshots:
        dump_ensemble(out_dir / "snapshots" / f"particles_{round(t / p.dt):06d}", ens, t)
    return res, check_invariants(res.records, p.brinkman_tol)


def cmd_run(cfg: ScenarioConfig, out_dir=None) -> int:
    out_dir = Path(out_dir or cfg.output_dir)
    t0 = time.perf_counter()
    try:
        res, failed = execute_run(cfg, out_dir)
    except BrinkmanConvergenceError as exc:
        _log(f"error: {exc}")
        return EXIT_SOLVER
    except SupportTooLargeError as exc:
        _log(f"error: {exc}")
        return EXIT_SOLVER
    _log(f"run lambda={cfg.sim.lam:g}: {len(res.records)} records in {time.perf_counter() - t0:.1f} s "
         f"-> {out_dir}")
    if failed:
        _log("invariant violations: " + ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


def _value_at(records, name: str, t: float) -> float:
    ts = dg.record_series(records, "t")
    return float(dg.record_series(records, name)[int(np.argmin(np.abs(ts - t)))])


def convergence_row(records, lam: float, report_times, deltas) -> dict:
    row = {"lambda": lam, "sup_err_rho_Linf": float(np.max(dg.record_series(records, "err_rho_Linf")))}
    for t in report_times:
        row[f"err_u_W1inf_t{t:g}"] = _value_at(records, "err_u_vs_ustar_W1inf", t)
    for d in deltas:
        key = dg.delta_key(d)
        row[key] = float(np.max(dg.record_series(records, key)))
    row["eta_final"] = float(records[-1].eta_traj)
    return row


def convergence_table(rows: list) -> tuple:
    """Header and rows of convergence.csv; rate columns hold fitted power-law exponents in lambda."""
    metrics = [k for k in rows[0] if k != "lambda"]
    header = list(rows[0]) + [f"rate_{k}" for k in metrics]
    lams = [r["lambda"] for r in rows]
    rates = {}
    for k in metrics:
        try:
            rates[k] = dg.fit_rate(lams, [r[k] for r in rows]).exponent
        except ValueError:
            rates[k] = None
    body = [[r[k] for k in rows[0]] + [rates[k] for k in metrics] for r in rows]
    return header, body


def cmd_sweep(cfg: ScenarioConfig, out_dir=None) -> int:
    out_dir = Path(out_dir or cfg.output_dir)
    write_resolved_config(cfg, out_dir)
    # one ensemble for every lambda, so the curves share their Monte-Carlo noise
    ens = sample_ensemble(cfg.init, cfg.sim.n_particles, cfg.sim.seed, cfg.sim.box_length)
    rows, status = [], EXIT_OK
    for lam in cfg.lambda_list:
        sub = cfg.with_lambda(lam)
        t0 = time.perf_counter()
        try:
            res, failed = execute_run(sub, out_dir / f"lambda_{lam:g}", ens)
        except (BrinkmanConvergenceError, SupportTooLargeError) as exc:
            _log(f"error: lambda={lam:g}: {exc}")
            status = EXIT_SOLVER
            break
        _log(f"sweep lambda={lam:g}: {time.perf_counter() - t0:.1f} s")
        if failed:
            _log(f"lambda={lam:g}: invariant violations: " + ", ".join(failed))
            status = EXIT_FAILED
        rows.append(convergence_row(res.records, lam, cfg.resolved_report_times(), cfg.diag.delta_list))
        header, body = convergence_table(rows)
        write_csv(out_dir / "convergence.csv", header, body)
    return status


# ---------------------------------------------------------------------------
# property suite

@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""


def _verify_scene(cfg: ScenarioConfig, n: int = 32, n_particles: int = 20000):
    grid = Grid(n, cfg.sim.box_length)
    ens = sample_ensemble(cfg.init, n_particles, cfg.sim.seed, cfg.sim.box_length)
    # give the cloud a nonzero mean drift so the drag term is exercised
    ens = ens.with_state(ens.positions, ens.velocities + np.array([0.05, -0.02, -0.3]))
    return grid, ens


def prop_fluid_identity(cfg: ScenarioConfig) -> PropertyResult:
    grid, ens = _verify_scene(cfg)
    rho, j = deposit_density(ens, grid), deposit_current(ens, grid)
    drag = ParticleDrag(ens.positions, ens.weights, grid) if cfg.sim.drag == "particle" else None
    try:
        u, _ = solve_brinkman(rho, mean_velocity(rho, j), grid, tol=cfg.sim.brinkman_tol,
                              max_iter=cfg.sim.brinkman_max_iter, damping=cfg.sim.picard_damping,
                              drag=drag)
    except BrinkmanConvergenceError as exc:
        return PropertyResult("fluid_energy_identity", False, str(exc))
    terms = fluid_energy_terms(u, rho, j, grid, drag)
    r = dg.fluid_identity_residual_from_terms(terms)
    chain = terms["u_dot_j"] <= terms["vbar_rho_sq"] * (1 + CHAIN_RTOL) and \
        terms["vbar_rho_sq"] <= dg.kinetic_energy(ens) * (1 + CHAIN_RTOL)
    return PropertyResult("fluid_energy_identity", r <= FLUID_IDENTITY_TOL and chain,
                          f"residual {r:.2e} (limit {FLUID_IDENTITY_TOL:.0e}), chain {'ok' if chain else 'broken'}")


def prop_divergence(cfg: ScenarioConfig) -> PropertyResult:
    grid, ens = _verify_scene(cfg)
    rho = deposit_density(ens, grid)
    f = cfg.sim.g[:, None, None, None] * rho[None]
    worst = relative_divergence(solve_stokes(f, grid), grid)
    return PropertyResult("divergence_free", worst <= DIV_TOL, f"relative divergence {worst:.2e}")


def prop_push_exactness(cfg: ScenarioConfig) -> PropertyResult:
    del cfg
    u0 = np.array([0.3, -0.1, 0.2])
    g = np.array([0.0, 0.0, -1.0])
    x = np.array([[1.0, 2.0, 3.0], [4.0, 0.5, 7.0]])
    v = np.array([[0.4, -0.7, 1.1], [-2.0, 0.0, 0.3]])
    worst, contracts = 0.0, True
    for lam, dt in ((1.0, 1e-3), (10.0, 0.1), (1e5, 1e-2)):
        a = g + u0
        e = math.exp(-lam * dt) if lam * dt < 700 else 0.0
        v_ref = a + (v - a) * e
        x_ref = x + a * dt + (v - a) * (-math.expm1(-lam * dt)) / lam
        xn, vn = advance(x, v, lambda y: np.broadcast_to(u0, y.shape), lam, g, dt)
        worst = max(worst, float(np.max(np.abs(xn - x_ref) / np.maximum(1, np.abs(x_ref)))),
                    float(np.max(np.abs(vn - v_ref) / np.maximum(1, np.abs(v_ref)))))
        contracts &= bool(np.all(np.linalg.norm(vn - a, axis=1) <= np.linalg.norm(v - a, axis=1)))
    return PropertyResult("push_exactness", worst <= 1e-13 and contracts, f"max error {worst:.1e}")


def prop_phase_volume(cfg: ScenarioConfig) -> PropertyResult:
    del cfg
    worst = 0.0
    for lam, dt in ((2.0, 0.01), (50.0, 0.005), (7.0, 0.3)):
        det = phase_volume_factor(np.zeros(3), lam, dt)
        worst = max(worst, abs(det - math.exp(-3 * lam * dt)))
    return PropertyResult("phase_volume", worst <= 1e-12, f"|det - exp(-3 lam dt)| <= {worst:.1e}")


def prop_deposition_moments(cfg: ScenarioConfig) -> PropertyResult:
    grid, ens = _verify_scene(cfg)
    rho, j = deposit_density(ens, grid), deposit_current(ens, grid)
    mass_err = abs(float(np.sum(rho)) * grid.cell_volume - 1.0)
    mom = np.sum(j.reshape(3, -1), axis=1) * grid.cell_volume
    mom_err = float(np.max(np.abs(mom - np.sum(ens.weights[:, None] * ens.velocities, axis=0))))
    # interpolation reproduces constant fields exactly
    const = np.ones((3,) + grid.shape) * np.array([1.0, -2.0, 0.5])[:, None, None, None]
    interp_err = float(np.max(np.abs(interpolate(const, ens.positions, grid) - [1.0, -2.0, 0.5])))
    ok = mass_err <= MASS_TOL and mom_err <= 1e-12 and interp_err <= 1e-13
    return PropertyResult("deposition_moments", ok,
                          f"mass {mass_err:.1e}, momentum {mom_err:.1e}, constants {interp_err:.1e}")


def prop_ode_lemma(cfg: ScenarioConfig, n_random: int = 1000) -> PropertyResult:
    t0 = time.perf_counter()
    res = dg.ode_lemma_campaign(n_random, seed=cfg.sim.seed)
    nviol = sum(len(v["violations"]) for v in res.values())
    return PropertyResult("ode_lemma_campaign", nviol == 0,
                          f"{n_random} instances per case, {nviol} violations, "
                          f"{time.perf_counter() - t0:.1f} s")


def prop_oseen(cfg: ScenarioConfig) -> PropertyResult:
    del cfg
    phi = oseen_tensor([1.0, 0.0, 0.0])
    exact = np.diag([1 / (4 * math.pi), 1 / (8 * math.pi), 1 / (8 * math.pi)])
    kernel_err = float(np.max(np.abs(phi - exact)))
    errs = [oseen_comparison(L, n) for L, n in ((8.0, 64), (16.0, 128))]
    ok = kernel_err <= 1e-14 and errs[0] <= 0.02 and errs[1] < errs[0]
    return PropertyResult("oseen_kernel", ok, f"kernel {kernel_err:.1e}, spectral vs direct "
                          f"{errs[0]:.2%} (L=8), {errs[1]:.2%} (L=16)")


def oseen_comparison(box_length: float, n: int, radius: float = 0.5) -> float:
    """Largest relative gap between the periodic Stokes velocity of a compact bump and the
    free-space Stokeslet sum, sampled at 1.5 to 3 radii, after removing the common offset
    that the periodic mean-flow gauge introduces."""
    grid = Grid(n, box_length)
    c = np.full(3, box_length / 2)
    rho = InitialData("gaussian_bump", tuple(c), radius).rho0(np.moveaxis(grid.nodes(), 0, -1))
    f = np.zeros((3,) + grid.shape)
    f[2] = -rho
    u = solve_stokes(f, grid)
    dists = radius * np.array([1.5, 2.0, 2.5, 3.0])
    dirs = np.array([[1, 0, 0], [0, 0, 1], [math.sqrt(0.5), 0, math.sqrt(0.5)]])
    pts = np.array([c + d * e for e in dirs for d in dists])
    us = interpolate(u, pts, grid)
    uo = oseen_velocity_field(rho, [0.0, 0.0, -1.0], grid, pts)
    gap = us - uo
    gap -= gap.mean(axis=0)
    return float(np.max(np.linalg.norm(gap, axis=1) / np.linalg.norm(uo, axis=1)))


PROPERTIES = (prop_fluid_identity, prop_divergence, prop_push_exactness, prop_phase_volume,
              prop_deposition_moments, prop_ode_lemma, prop_oseen)


def run_properties(cfg: ScenarioConfig) -> list:
    return [prop(cfg) for prop in PROPERTIES]


def cmd_verify(cfg: ScenarioConfig | None = None) -> int:
    cfg = cfg or ScenarioConfig.from_dict({})
    results = run_properties(cfg)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vlasov-stokes",
                                 description="Vlasov-Stokes sedimentation runs and inertialess-limit checks.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "integrate one scenario"),
                           ("sweep", "run the scenario for every lambda in lambda_list"),
                           ("verify", "run the property suite")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", nargs="?" if name == "verify" else None,
                        help="JSON configuration file")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--threads", type=int, default=1, help="FFT worker threads (default 1)")
        sp.add_argument("--seed", type=int, help="override the sampling seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _log("error: --threads must be at least 1")
        return EXIT_CONFIG
    try:
        raw = {} if args.config is None else read_json(args.config)
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        if args.seed is not None:
            raw = dict(raw, seed=args.seed)
        if args.output_dir is not None:
            raw = dict(raw, output_dir=args.output_dir)
        cfg = ScenarioConfig.from_dict(raw)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    with sfft.set_workers(args.threads):
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_verify(cfg)


if __name__ == "__main__":
    sys.exit(main())
