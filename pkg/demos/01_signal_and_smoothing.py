"""
Signal, noise and moving-average smoothing
==========================================

A synthetic market where each return is a small predictable part plus a
much larger unpredictable part, and what an EMA does to it.
"""

import numpy as np

from curriculum_control import SyntheticSpec, generate_synthetic
from curriculum_control.smoothing import ema, ema_alpha, round_returns, stage_schedule

# two assets; the drivers behind the signal stay hidden from the agent
spec = SyntheticSpec(n_assets=2, length=2000, ar_coef=0.95, signal_scale=0.01, noise_scale=0.05,
                     seed=7, drivers=False)
series, truth = generate_synthetic(spec)
print("columns:", series.columns)
print("noise / signal std ratio: %.2f" % truth.noise_to_signal())

# the EMA weight for a 5-step window
print("alpha(5) =", ema_alpha(5))

# how much closer does smoothing bring the returns to the signal?
r = series.universe_returns
for w in (1, 2, 5, 10):
    s = ema(r, w)
    corr = [np.corrcoef(s[:, j], truth.signal[:, j])[0, 1] for j in range(2)]
    print("w_l=%2d  std %.4f  corr with signal %.3f %.3f" % (w, s.std(), *corr))

# rounding is the cruder alternative
print("distinct rounded values:", len(np.unique(round_returns(r, 2))))

# an inverse-smoothing curriculum spends equal budget on each smoothing level
for w_l, steps in stage_schedule(4, 100_000):
    print("stage w_l=%d: %d steps" % (w_l, steps))
