"""Brinkman coupling: Picard iterations, the fluid energy identity and the two drag discretizations."""
import numpy as np

from vlasov_stokes import Grid, InitialData, sample_ensemble
from vlasov_stokes.diagnostics import fluid_identity_residual, kinetic_energy
from vlasov_stokes.fluid import ParticleDrag, fluid_energy_terms, solve_brinkman
from vlasov_stokes.grid import deposit_current, deposit_density, mean_velocity

grid = Grid(32, 8.0)
ens = sample_ensemble(InitialData(radius_v=0.2), 30_000, seed=1, box_length=8.0)
# let the particles fall at unit speed
ens = ens.with_state(ens.positions, ens.velocities + [0.0, 0.0, -1.0])
rho, j = deposit_density(ens, grid), deposit_current(ens, grid)
vbar = mean_velocity(rho, j)

# Drag evaluated on the grid (rho u) or at the particles (deposit of w_i u(x_i)).
# The particle form is what the pushed particles actually feel.
for name, drag in (("grid", None), ("particle", ParticleDrag(ens.positions, ens.weights, grid))):
    u, rep = solve_brinkman(rho, vbar, grid, drag=drag)
    t = fluid_energy_terms(u, rho, j, grid, drag)
    print(f"{name:8s} drag: {rep.iterations} Picard iterations, residual {rep.final_residual:.1e}")
    print(f"    identity residual {fluid_identity_residual(u, rho, j, grid, drag):.1e}")
    print(f"    (u, j) = {t['u_dot_j']:.5f} <= |Vbar|^2_rho = {t['vbar_rho_sq']:.5f} <= E = {kinetic_energy(ens):.5f}")

# warm starts cut the iteration count
u, cold = solve_brinkman(rho, vbar, grid)
_, warm = solve_brinkman(rho, vbar, grid, u0=0.99 * u)
print("cold start", cold.iterations, "iterations, warm start", warm.iterations)
