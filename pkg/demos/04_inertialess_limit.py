"""Kinetic runs against the inertialess limit for increasing friction.

Reduced scale (grid 32, 2e4 particles, T = 0.5) so the script runs in about a minute.
The full-scale version of this study lives in the acceptance suite and in
``vlasov-stokes sweep``.
"""
import numpy as np

from vlasov_stokes import InitialData, build_params
from vlasov_stokes.diagnostics import fit_rate, record_series
from vlasov_stokes.kinetic import DiagConfig, run_vlasov_stokes

lams = [10.0, 20.0, 40.0, 80.0]
rows = []
for lam in lams:
    p = build_params({"lambda": lam, "grid_n": 32, "n_particles": 20_000, "t_final": 0.5, "dt": 0.01})
    res = run_vlasov_stokes(p, InitialData(), DiagConfig((1.0,)))
    rec = res.records
    t = record_series(rec, "t")
    rows.append((lam,
                 record_series(rec, "err_rho_Linf").max(),
                 record_series(rec, "err_u_vs_ustar_W1inf")[t >= 0.25].max(),
                 rec[-1].eta_traj,
                 record_series(rec, "err_u_vs_utilde_W1inf")[np.argmin(abs(t - 0.25))]))
    # the boundary layer: err_u drops on the fast scale lam t
    e = record_series(rec, "err_u_vs_ustar_W1inf")
    print(f"lam={lam:g}: err_u at lam t = 0, 1, 3 ->",
          [f"{e[np.argmin(abs(lam * t - s))]:.3g}" for s in (0, 1, 3)])

print("\n lambda  sup|rho-rho*|  |u-u*| on [T/2,T]  eta(T)  |u-u~|(T/2)")
for r in rows:
    print(f"{r[0]:7g}  {r[1]:12.4g}  {r[2]:17.4g}  {r[3]:6.4g}  {r[4]:10.3g}")
arr = np.array(rows)
for k, name in ((1, "rho"), (2, "u"), (3, "eta"), (4, "u~")):
    print(f"power-law exponent in lambda, {name}: {fit_rate(arr[:, 0], arr[:, k]).exponent:.2f}")
