"""
Baseline PPO against PPO trained on smoothed returns
====================================================

A scaled-down replica study: a few seeds per method, short training and a
one-sided Welch test on the test-set returns. Takes a couple of minutes.
"""

from curriculum_control import SyntheticSpec, generate_synthetic, profile, split
from curriculum_control.env import EnvConfig
from curriculum_control.experiment import Dataset, MethodSpec, rp_baseline, cumulative_return, run_replicas, \
    welch_one_sided

series, truth = generate_synthetic(SyntheticSpec(n_assets=2, length=2000, ar_coef=0.95, signal_scale=0.01,
                                                 noise_scale=0.05, seed=7, drivers=False))
data = Dataset(series, split(series))

# the first dataset's PPO settings
algo, env_kw = profile("ds1", "ppo")
env = EnvConfig.for_series(series, **env_kw)

rp = cumulative_return(rp_baseline(series, data.split.test, warmup=env.warmup))
print("equal-weight rebalanced portfolio: %.1f%%" % rp)

steps, seeds = 30_000, 5
base = run_replicas(MethodSpec("baseline", algo, env), seeds, data, steps, master_seed=11)
smooth = run_replicas(MethodSpec("ema", algo, env, w_l=5), seeds, data, steps, master_seed=11)
for rep in (base, smooth):
    print("%-9s %7.1f%% +- %.1f  (n=%d)" % (rep.method, rep.mean, rep.std, rep.n))

res = welch_one_sided(base.returns, smooth.returns)
print("t = %.2f, one-sided p = %.1f%%" % (res.t_stat, res.p_value))
