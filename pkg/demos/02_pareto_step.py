"""How the two-objective step picks its weights.

The ordinal and alignment gradients are mixed as b1*g1 + (1-b1)*g2. While
the validation alignment loss is above epsilon, the mix maximizes progress
along the validation gradient without hurting the objective it favours;
below epsilon it maximizes joint descent.
"""

# %%
import numpy as np

from orderlab.pareto import ParetoConfig, lp_constraints, solve_combination

# %% The worked example: objectives pull in opposite directions, validation agrees with the first
g1, g2, gv = np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.array([1.0, 0.0])
branch, cons, obj = lp_constraints(g1, g2, gv, l_val=1.0, epsilon=1e-3)
step = solve_combination(g1, g2, gv, l_val=1.0)
print(branch, "constraints", cons, "objective", obj, "-> beta", step.beta)

# %% Same gradients once validation loss is below epsilon: the descent branch
step = solve_combination(g1, g2, gv, l_val=1e-4)
print(step.branch, "beta", step.beta, "direction", step.direction)

# %% Random instances: direction never increases either loss to first order on the descent branch
rng = np.random.default_rng(1)
for _ in range(5):
    g1, g2, gv = rng.normal(size=(3, 6))
    for l_val in (1.0, 0.0):
        s = solve_combination(g1, g2, gv, l_val, ParetoConfig())
        print(f"{s.branch:8s} beta1 {s.beta[0]:.3f}  h.g1 {s.direction @ g1:+.3f}  h.g2 {s.direction @ g2:+.3f}"
              f"  h.gv {s.direction @ gv:+.3f}")
