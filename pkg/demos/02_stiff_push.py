"""The exponential particle push stays exact and stable for any lambda dt."""
import math

import numpy as np

from vlasov_stokes.kinetic import advance, phase_volume_factor, step_jacobian

g = np.array([0.0, 0.0, -1.0])
u0 = np.array([0.2, 0.0, 0.1])
x = np.array([[1.0, 2.0, 3.0]])
v = np.array([[0.5, -0.5, 2.0]])


def uniform(y):
    return np.broadcast_to(u0, y.shape)


# with a uniform flow the push reproduces the exact solution
for lam_dt in (1e-3, 1.0, 1e3, 1e8):
    dt = 0.01
    lam = lam_dt / dt
    xn, vn = advance(x, v, uniform, lam, g, dt)
    a = g + u0
    v_exact = a + (v - a) * math.exp(-lam * dt)
    print(f"lam dt = {lam_dt:8.0e}: |V - V_exact| = {np.abs(vn - v_exact).max():.1e}, V = {vn[0]}")

# Phase volume contracts by exp(-3 lam dt) per step: this is why densities are
# carried by fixed particle weights and never by a Liouville factor.
print("phase volume factor, lam = 50, dt = 0.005:", phase_volume_factor(u0, 50.0, 0.005),
      "=", math.exp(-0.75))

# For a linear divergence-free flow the determinant is no longer exact; the deviation is
# bounded by |grad u|^2 dt^2 and for the midpoint scheme it actually falls off like dt^4.
A = np.array([[0.0, 0.8, 0.0], [-0.3, 0.1, 0.5], [0.2, -0.4, -0.1]])
for dt in (0.04, 0.02, 0.01):
    J = step_jacobian(x[0], v[0], lambda y: y @ A.T, 5.0, g, dt, eps=1e-5)
    print(f"dt={dt}: det J e^(3 lam dt) - 1 = {np.linalg.det(J) * math.exp(15 * dt) - 1:+.2e}")
