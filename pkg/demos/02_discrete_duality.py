"""
Exact discrete transport and the saddle functional
==================================================

For n equal-weight points per side the transport problem is an assignment
problem.  The solver returns the optimal matching and dual potentials, which
make the witnesses below exact: strong duality, flatness of the saddle
functional at a bijection, unboundedness off it, and the c-concavity gap.
"""

import numpy as np

from otlab import oracle

rng = np.random.default_rng(3)
inst = oracle.DiscreteInstance.random(16, 2, rng)
sol = oracle.solve_assignment(inst)
print(f"optimal cost K* = {sol.cost:.6f}")
print(f"semi-dual at the duals = {oracle.semidual_value(sol.duals.psi, inst):.6f}")

# any potential gives a lower bound
lower = max(oracle.semidual_value(rng.normal(0, 3, inst.n), inst) for _ in range(1000))
print(f"best of 1000 random potentials = {lower:.6f}")

# at a bijection F(psi, t) does not depend on psi at all
print("spread of F over random psi at the optimal map:",
      oracle.flatness_witness(inst, sol.perm, trials=200, rng=rng))

# off a bijection it is unbounded above in psi
t = sol.perm.copy()
t[0] = t[1]
w = oracle.unboundedness_witness(inst, t, M_list=(0, 1, 10, 100))
print("F(M 1_A, t) for M = 0, 1, 10, 100:", np.round(w.values, 4), "mass of A:", w.mass)

# c-concavity: zero gap for the duals, positive once an entry is pushed down
psi = sol.duals.psi.copy()
print("gap at the duals:", oracle.cconcavity_gap(psi, inst))
psi[5] -= 50.0
print("gap after lowering one entry:", oracle.cconcavity_gap(psi, inst))
