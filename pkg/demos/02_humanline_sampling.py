"""Humanline sampling: Beta-randomised token rejection and its clipping limit.

Run: python demos/02_humanline_sampling.py
"""

import math

import numpy as np

from humanline_lab.humanline import (perceived_token_distribution, simulate_token_rejection,
                                     single_sided_accept)
from humanline_lab.rng import stream
from humanline_lab.verification import clip_agreement

# %% A token whose ratio is half the bound survives with probability 0.5**gamma
n = 100_000
for gamma in (0.3, 0.6, 1.0):
    acc = single_sided_accept(np.full(n, math.log(0.5)), 0.0, gamma, stream(0, "beta"))
    print(f"gamma={gamma}: accepted {acc.mean():.4f}, law {0.5 ** gamma:.4f}")

# %% Accepted tokens follow pi_ref * ratio**gamma, renormalised
rng = np.random.default_rng(1)
p_theta, p_ref = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
counts = simulate_token_rejection(p_theta, p_ref, 0.6, 50_000, stream(1, "beta"))
print("empirical:", np.round(counts / counts.sum(), 3))
print("predicted:", np.round(perceived_token_distribution(p_theta, p_ref, 0.6), 3))

# %% With very concentrated Beta draws, sampling detaches exactly the clipped tokens
for k in (10.0, 1e3, 1e5):
    print(f"k={k:g}: agreement with [0.8, 1.2] clipping = {clip_agreement(k=k, n_tokens=20_000):.4f}")
