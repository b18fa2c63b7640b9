"""
The future-seeing oracle and its noise tolerance
================================================

With next-step returns in hand the best action is to put the whole gross
budget on the largest absolute move. The gap to the runner-up says how
much noise that choice can absorb.
"""

import numpy as np

from curriculum_control.data import MARKET, ProcessedSeries
from curriculum_control.env import normalize_action, portfolio_log_return
from curriculum_control.imitation import analytic_oracle, brute_force_oracle, dnt, dpd_reward

# one step of expected moves, in percent
moves = np.array([1.23, 1.79, 3.01, -4.02])
cols = ["a", "b", "c", "d"]
series = ProcessedSeries(np.array(["2024-01-02"], dtype="datetime64[D]"), np.log1p(moves / 100)[None],
                         cols, [MARKET] * 4, cols)

best = analytic_oracle(series, range(0, 1)).actions[0]
print("oracle action:", best)
print("same by enumerating all 81 actions:", brute_force_oracle(series, range(0, 1)).actions[0])
print("noise tolerance: %.2f percentage points" % dnt(moves))

# spreading the bet always earns less than concentrating it
for a in ([0, 0, 0, -1], [0, 0, 1, -1], [1, 1, 1, 1]):
    w = normalize_action(a, 1.0)
    print(a, "weights", w, "log-return %.5f" % portfolio_log_return(w, series.universe_returns[0]))

# a student imitating the oracle is scored by distance to its action
print("distillation reward for [1,1,1,1]: %.4f" % dpd_reward([1, 1, 1, 1], best))
