"""Probability weighting: how a distorted view of a gamble changes its worth.

Run: python demos/01_prospect_weighting.py
"""

import numpy as np

from humanline_lab.prospect import (OutcomeDistribution, ProspectParams, capacity,
                                    capacity_crossing, utility, utility_gap_bound)

# %% A coin-flip-like gamble: win 100 with p=0.8, lose 100 with p=0.2
gamble = OutcomeDistribution((-100.0, 100.0), (0.2, 0.8))
neutral = ProspectParams(gamma=1.0, gamma_minus=1.0)
print("risk-neutral utility:", utility(gamble, neutral))

# %% Loss aversion and curvature shrink that number
human = ProspectParams(alpha=0.88, lam=2.25, gamma=0.61, gamma_minus=0.69)
print("loss-averse, distorted utility:", round(utility(gamble, human), 3))

# %% The capacity curve overweights small probabilities and underweights large ones
a = np.array([0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99])
for g in (1.0, 0.6):
    print(f"gamma={g}:", np.round(capacity(a, g), 3))
print("fixed point of the gamma=0.6 curve:", round(capacity_crossing(0.6), 4))

# %% Perceiving Q instead of the true distribution costs at most sqrt(2 KL) * max|v|
w = OutcomeDistribution((-1.0, 1.0), (0.5, 0.5))
q = OutcomeDistribution((-1.0, 1.0), (0.9, 0.1))
gap = utility_gap_bound(w, q, ProspectParams())
print(f"utility gap {gap.lhs:.3f} <= bound {gap.rhs:.3f}: {gap.holds}")
