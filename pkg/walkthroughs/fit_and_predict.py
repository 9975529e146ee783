"""Fit a mixture cure model to one simulated dataset and inspect it.

Run with ``python3 walkthroughs/fit_and_predict.py``.
"""

import numpy as np

from curemi import followup_interval_check, fit_cure_em, predict, validate
from curemi import rng as rngmod
from curemi.cure import fit_table
from curemi.simulation import generate_replicate, get_scenario

cfg = get_scenario("A")
ds, latent = generate_replicate(cfg, rngmod.stream(1))
spec = cfg.model_spec

print("\n".join(validate(ds, spec).lines()))
print(followup_interval_check(ds).report())
print(f"true cure fraction in this sample: {1 - latent.G.mean():.3f}\n")

fit = fit_cure_em(ds, spec)
print(f"EM converged={fit.converged} after {fit.iterations} iterations, "
      f"log-likelihood {fit.loglik:.2f}")
print(f"{'parameter':<10}{'truth':>8}{'estimate':>10}{'se':>8}")
for (name, est, se, *_), truth in zip(fit_table(fit), cfg.truth().values()):
    print(f"{name:<10}{truth:>8.2f}{est:>10.3f}{se:>8.3f}")

# W is binary in this scenario; compare the two W levels with X=1, Z=0
for w in (0.0, 1.0):
    p = predict(fit, [w, 1.0], [w, 0.0])
    grid = np.array([1.0, 3.0, 6.0, 10.0])
    curve = ", ".join(f"S({t:g})={s:.2f}" for t, s in zip(grid, p.overall_survival(grid)))
    print(f"W={w:g}: cure probability {p.cure_probability:.3f}; {curve}")
