"""The one-batch solvers side by side: greedy choices, the optimal
assignment, stable matching, and the exhaustive oracle that certifies the
optimum.

Run:  python3 demos/02_batch_matching_baselines.py
"""

import numpy as np

from micod.matching import (CostMatrix, blocking_pairs, brute_force_match,
                            greedy_match, gs_match, km_match, prefs_from_cost)

# A classic instance where greedy's first grab is a trap.
m = CostMatrix(np.array([[1.0, 2.0], [2.0, 100.0]]), mode="min")
print("pickup-distance matrix (orders x drivers):")
print(m.values)
greedy = greedy_match(m)
optimal = km_match(m)
print(f"greedy picks   {greedy}  total {m.total(greedy):6.1f}")
print(f"optimal picks  {optimal}  total {m.total(optimal):6.1f}")

# The exhaustive oracle agrees with the optimal solver on random instances.
rng = np.random.default_rng(0)
checked = 0
for _ in range(200):
    r, c = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    inst = CostMatrix(rng.uniform(0, 50, size=(r, c)),
                      mode="min" if rng.random() < 0.5 else "max",
                      forbidden=rng.random((r, c)) < 0.2)
    assert inst.total(km_match(inst)) == inst.total(brute_force_match(inst))
    checked += 1
print(f"\noptimal solver == exhaustive oracle on {checked} random instances")

# Stable matching: no order/driver pair would rather elope.
inst = CostMatrix(rng.uniform(0, 10, size=(5, 4)))
order_prefs, driver_prefs = prefs_from_cost(inst)
stable = gs_match(order_prefs, driver_prefs)
print(f"\nstable matching on a 5x4 instance: {stable}")
print(f"blocking pairs: {blocking_pairs(order_prefs, driver_prefs, stable)}")
