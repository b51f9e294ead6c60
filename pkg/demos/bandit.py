"""
GRPO on a one-frame bandit
==========================

"""

import numpy as np
from rlfsq.grpo import advantages, run_bandit

# a frozen table gives each of the eight levels a reward; level 5 is best
table = -((np.arange(8) - 5) / 7.0) ** 2
print("rewards", np.round(table, 3))

# group-relative advantages: centre and scale within the sampled group
print("advantages of (1, 2, 3):", np.round(advantages([1.0, 2.0, 3.0]), 4))

# 200 updates from a uniform policy, five seeds
curves = np.array([run_bandit(table, steps=200, seed=s) for s in range(5)])
for step in (0, 25, 50, 100, 200):
    print(f"step {step:3d}: p(best) = {curves[:, step].mean():.3f}")
