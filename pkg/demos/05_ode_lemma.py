"""Randomized check of the ODE comparison estimates used in the convergence proof."""
import numpy as np

from vlasov_stokes.diagnostics import (OdeLemmaInstance, ode_lemma_campaign, random_ode_instance,
                                       verify_ode_lemma)

# One hand-made instance: alpha = 0, beta = 0 gives b(t) = b0 exp(-lam (t - T)),
# and the growth bound holds with equality.
inst = OdeLemmaInstance(0.0, 1.0, np.array([0.0, 1.0]), np.zeros(2), 0.0, 10.0, 1.0)
rep = verify_ode_lemma(inst)
print("closed-form case:", rep.ok, "tightness of the growth bound", rep.max_ratio_1b)

rng = np.random.default_rng(4)
inst = random_ode_instance(rng, "ii")
rep = verify_ode_lemma(inst)
print(f"random case (ii): lam={inst.lam:.1f}, sup alpha={inst.alpha_sup():.2f}, ok={rep.ok}")

res = ode_lemma_campaign(200, seed=0)
for case, r in res.items():
    print(f"case ({case}): {len(r['violations'])} violations, {r['rejected']} redrawn instances")
