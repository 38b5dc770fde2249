"""Estimate the perturbed-Poisson-equation corrector and check its residual.

The corrector solves  eps lap_z V + L^z V - lam V = f - pi^{*,z}[f]  and has
a randomized Feynman-Kac representation: average the frozen chain's
deviation-from-equilibrium at an Exp(lam) horizon from a Gaussian-smeared
parameter.  For the linear-Gaussian model and f(y) = y the solution is
known exactly: V = -y / (lam + 1).
"""

import numpy as np

from twoscale import PoissonParams, RngStream, WeightedFn, builtin, check_poisson_residual, estimate_corrector
from twoscale.poisson import contraction_factor

model = builtin("LINGAUSS")
params = PoissonParams(epsilon=0.01, lam=0.1, outer=4000, inner=16)
print(f"contraction factor at (eps, lam) = ({params.epsilon}, {params.lam}) "
      f"with fitted (C, xi) = (1, 1): {contraction_factor(params, 1.0, 1.0):.3f}  (< 1: contractive)")

f = WeightedFn.build(lambda y: y[..., 0], lambda y: np.ones_like(y), model.A, f_id="y")
print(f"weighted norms of f(y) = y: |f|* = {f.norm_f:.3f}, |grad f|* = {f.norm_grad:.3f} "
      f"(unit class: {f.in_unit_class})")

rng = RngStream(11)
for i, (z, y) in enumerate([(0.0, 1.0), (0.5, -1.5)]):
    v, se = estimate_corrector(model, f, [z], [y], params, model.invariant,
                               rng.substream(i), dt=0.02)
    print(f"V({z}, {y}) = {v:+.4f} +- {se:.4f}   closed form {-y / 1.1:+.4f}")

counter = [0]


def v_eval(zz, yy):
    counter[0] += 1
    return estimate_corrector(model, f, zz, yy, params, model.invariant,
                              rng.substream(99, counter[0]), dt=0.02)


rep = check_poisson_residual(model, f, [0.0], [1.0], params, v_eval, model.invariant)
print(f"\nfinite-difference residual at (0, 1): {rep.residual:+.3f} +- {rep.uncertainty:.3f} "
      f"-> {rep.verdict}")
