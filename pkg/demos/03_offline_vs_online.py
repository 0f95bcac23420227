"""Offline versus online training on the scored sorting task, with and without humanline.

Run: python demos/03_offline_vs_online.py   (well under a minute)
"""

import logging
from pathlib import Path

import numpy as np

from humanline_lab.config import load_config
from humanline_lab.experiments import final_rewards, run_suite

logging.disable(logging.WARNING)

# %% One config drives all three variants; presets adjust per-variant settings
cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "scored_grpo.json")
res = run_suite(cfg, ["offline", "offline+humanline", "online"], seeds=[0, 1, 2])

# %% Every variant sees the same number of training sequences
for variant, runs in res.items():
    print(f"{variant:>18}: {runs[0].history[-1]['examples_seen']} sequences seen")

# %% Final true reward, mean +- standard error over seeds
init = np.mean([r.initial_reward for r in res["offline"]])
print(f"initial policy: {init:.3f}")
for variant, vals in final_rewards(res).items():
    print(f"{variant:>18}: {vals.mean():.3f} +- {vals.std(ddof=1) / np.sqrt(len(vals)):.3f}")
