"""End-to-end acceptance checks, one test per criterion.

Each test records a verdict line that the terminal summary prints, then
asserts. Criteria 7 and 8 train real agents and take several minutes.
"""
import itertools
import json
import math
import time

import numpy as np

from curriculum_control.cli import main
from curriculum_control.data import SyntheticSpec, generate_synthetic, split
from curriculum_control.env import EnvConfig, normalize_action, portfolio_log_return
from curriculum_control.experiment import Dataset, MethodSpec, make_env_factory, run_replicas, welch_from_stats, \
    welch_one_sided
from curriculum_control.imitation import analytic_oracle, brute_force_oracle, dnt
from curriculum_control.nn import gradient, log_softmax, mlp_forward
from curriculum_control.rl import (ActorCritic, AlgoConfig, RolloutBuffer, TrainingEnv, a2c_loss, compute_gae,
                                   greedy_episode, kl_loss, policy_entropy, ppo_loss, profile, train, value_loss)
from curriculum_control.smoothing import ema, ema_alpha, inverse_smooth_positional, stage_schedule

from helpers import fd_grad, rel_err, verdict


def test_c01_welch_reproduces_table():
    t0 = time.perf_counter()
    dpd = welch_from_stats(29.440, 51.712, 50, -1.762, 19.492, 50)
    ema5 = welch_from_stats(29.440, 51.712, 50, 104.599, 44.225, 50)
    dt = time.perf_counter() - t0
    ok = abs(dpd.t_stat - 3.99) <= 0.02 and abs(ema5.t_stat + 7.81) <= 0.02 and ema5.p_value <= 0.005 and dt < 1
    assert verdict(1, "t-statistic reproduction", ok,
                   f"t(DPD)={dpd.t_stat:.3f}, t(EMA5)={ema5.t_stat:.3f}, p(EMA5)={ema5.p_value:.2e}%, {dt:.3f}s")


def test_c02_dnt():
    d = dnt((1.23, 1.79, 3.01, -4.02))
    assert verdict(2, "DNT reproduction", d == 1.01, f"dnt={d!r}")


def _gross(w) -> float:
    # correctly rounded sum of |w|, independent of summation order
    return math.fsum(np.abs(w))


def test_c03_normalisation():
    eq = normalize_action([1, 1, 1, 1], 1.0).tolist() == [0.25] * 4
    short = normalize_action([0, 0, 0, -1], 1.0).tolist() == [0, 0, 0, -1]
    rng = np.random.default_rng(2024)
    misses, count = 0, 0
    for L in (1.0, 2.0):  # the configured gross limits
        for _ in range(50_000):
            a = rng.integers(-1, 2, int(rng.integers(1, 9)))
            if not a.any():
                continue
            count += 1
            misses += _gross(normalize_action(a, L)) != L
    # every action for N <= 8, not just a sample
    exhaustive = 0
    for n in range(1, 9):
        acts = np.array(list(itertools.product((-1, 0, 1), repeat=n)))[1:]
        acts = acts[np.abs(acts).sum(axis=1) > 0]
        for L in (1.0, 2.0):
            exhaustive += sum(_gross(w) != L for w in normalize_action(acts, L))
    # any other float limit is reached up to rounding of the division
    worst = 0.0
    for _ in range(10_000):
        a = rng.integers(-1, 2, 8)
        if a.any():
            L = rng.uniform(0.1, 5.0)
            worst = max(worst, abs(_gross(normalize_action(a, L)) - L) / math.ulp(L))
    ok = eq and short and misses == 0 and exhaustive == 0 and worst <= 4
    assert verdict(3, "normalisation reproduction", ok,
                   f"examples {'ok' if eq and short else 'wrong'}; gross != L for {misses} of {count} random "
                   f"and {exhaustive} of all N<=8 actions at L in {{1,2}}; random L within {worst:.0f} ulp")


def test_c04_oracle_equivalence():
    s, _ = generate_synthetic(SyntheticSpec(n_assets=8, length=500, noise_scale=0.02, seed=44))
    t0 = time.perf_counter()
    a = analytic_oracle(s, range(0, 500)).actions
    b = brute_force_oracle(s, range(0, 500)).actions
    dt = time.perf_counter() - t0
    mism = int((a != b).any(axis=1).sum())
    assert verdict(4, "oracle equivalence", mism == 0 and dt < 60, f"{mism} of 500 steps differ, {dt:.2f}s")


def _np_terms(pp, obs, actions):
    lp = log_softmax(mlp_forward(pp, obs).reshape(obs.shape[0], -1, 3))
    logp = np.take_along_axis(lp, (actions + 1)[..., None], -1)[..., 0].sum(-1)
    ent = -(np.exp(lp) * lp).sum(-1).sum(-1).mean()
    return lp, logp, ent


def test_c05_gradient_fidelity():
    worst = {}
    for k in range(20):
        rng = np.random.default_rng(500 + k)
        m = ActorCritic.create(5, 2, AlgoConfig(hidden=(8, 8)), k)
        pp = [a + 0.3 * rng.standard_normal(a.shape) for a in m.policy]
        vp = [a + 0.3 * rng.standard_normal(a.shape) for a in m.value]
        B = 10
        obs = rng.standard_normal((B, 5))
        act = rng.integers(-1, 2, (B, 2))
        adv, ret = rng.standard_normal(B), rng.standard_normal(B)
        old_logp = _np_terms(pp, obs, act)[1] + rng.normal(0, 0.3, B)
        old_probs = np.exp(_np_terms([a + 0.2 for a in pp], obs, act)[0])
        cfg = AlgoConfig(clip_eps=0.2, vf_coef=0.5, entropy_coef=0.03)
        n = len(pp)

        def vmse(p):
            return float(((mlp_forward(p, obs)[:, 0] - ret) ** 2).mean())

        def np_a2c(p):
            _, logp, ent = _np_terms(p[:n], obs, act)
            return -(logp * adv).mean() + 0.5 * vmse(p[n:]) - 0.03 * ent

        def np_ppo(p):
            _, logp, ent = _np_terms(p[:n], obs, act)
            rho = np.exp(logp - old_logp)
            return -np.minimum(rho * adv, np.clip(rho, 0.8, 1.2) * adv).mean() + 0.5 * vmse(p[n:]) - 0.03 * ent

        def np_kl(p):
            return float((old_probs * (np.log(old_probs) - _np_terms(p, obs, act)[0])).sum(-1).sum(-1).mean())

        cases = {
            "a2c": (lambda p: a2c_loss(p[:n], p[n:], obs, act, adv, ret, cfg), np_a2c, pp + vp),
            "ppo-clip": (lambda p: ppo_loss(p[:n], p[n:], obs, act, old_logp, adv, ret, cfg), np_ppo, pp + vp),
            "value": (lambda p: value_loss(p, obs, ret), vmse, vp),
            "entropy": (lambda p: policy_entropy(p, obs), lambda p: _np_terms(p, obs, act)[2], pp),
            "kl": (lambda p: kl_loss(p, obs, old_probs), np_kl, pp),
        }
        for name, (t_loss, np_loss, params) in cases.items():
            _, g = gradient(t_loss, params)
            worst[name] = max(worst.get(name, 0.0), rel_err(g, fd_grad(np_loss, params)))
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(5, "gradient fidelity", top <= 1e-4, f"max rel err over 20 nets: {detail}")


def _gae_brute(r, v, d, last, gamma, lam):
    v_next = np.append(v[1:], last)
    delta = r + gamma * v_next * (1 - d) - v
    out = np.zeros(len(r))
    for t in range(len(r)):
        acc, disc = 0.0, 1.0
        for k in range(t, len(r)):
            acc += disc * delta[k]
            if d[k]:
                break
            disc *= gamma * lam
        out[t] = acc
    return out


def test_c06_gae_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        r, v = rng.standard_normal(64), rng.standard_normal(64)
        d = rng.random(64) < 0.1
        last = float(rng.standard_normal())
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)
        buf = RolloutBuffer(np.zeros((64, 1)), np.zeros((64, 1), dtype=int), r, np.zeros(64), v, d, last)
        got = compute_gae(buf, gamma, lam, normalize=False).advantages
        worst = max(worst, float(np.max(np.abs(got - _gae_brute(r, v, d.astype(float), last, gamma, lam)))))
    assert verdict(6, "GAE oracle", worst <= 1e-10, f"max abs err {worst:.1e} over 100 buffers")


def test_c07_learnability():
    series, _ = generate_synthetic(SyntheticSpec(n_assets=1, length=2000, noise_scale=0.0, seed=123))
    sp = split(series)
    algo, env_kw = profile("ds1", "ppo")
    env = EnvConfig.for_series(series, **env_kw)
    fit = series.slice(sp.train.start, sp.validation.stop)
    test = range(sp.test.start + env.warmup, sp.test.stop)
    oracle = analytic_oracle(series, test, env.gross_limit).actions
    best = sum(portfolio_log_return(normalize_action(a, env.gross_limit), series.universe_returns[t])
               for a, t in zip(oracle, test))
    ratios = []
    for seed in range(10):
        model = train(lambda _w: TrainingEnv(fit, range(0, len(fit)), env), algo, 200_000, seed)
        rewards, _ = greedy_episode(model, series, sp.test, env)
        ratios.append(float(np.sum(rewards)) / best)
    hits = sum(r >= 0.9 for r in ratios)
    assert verdict(7, "learnability", hits >= 8,
                   f"{hits}/10 seeds at >= 90% of oracle log-return; ratios "
                   + " ".join(f"{r:.3f}" for r in ratios))


# hidden-driver market: two assets, AR(1) drivers not in the state, noise std 5x the signal std
C8_DATA = SyntheticSpec(n_assets=2, length=2000, ar_coef=0.95, signal_scale=0.01, noise_scale=0.05, seed=7,
                        drivers=False)
C8_MASTER_SEED = 11
C8_STEPS = 60_000


def test_c08_curriculum_direction():
    series, truth = generate_synthetic(C8_DATA)
    data = Dataset(series, split(series))
    algo, env_kw = profile("ds1", "ppo")
    env = EnvConfig.for_series(series, **env_kw)
    base = run_replicas(MethodSpec("baseline", algo, env), 20, data, C8_STEPS, C8_MASTER_SEED)
    smooth = run_replicas(MethodSpec("ema", algo, env, w_l=5), 20, data, C8_STEPS, C8_MASTER_SEED)
    res = welch_one_sided(base.returns, smooth.returns)
    ok = base.n == smooth.n == 20 and smooth.mean > base.mean and res.p_value < 10.0
    assert verdict(8, "curriculum directional effect", ok,
                   f"noise/signal {truth.noise_to_signal():.2f}; baseline {base.mean:.1f}+-{base.std:.1f}%, "
                   f"EMA5 {smooth.mean:.1f}+-{smooth.std:.1f}%; t={res.t_stat:.2f}, p={res.p_value:.2f}%")


def test_c09_smoothing_exactness():
    x = np.random.default_rng(9).standard_normal((200, 3))
    s, _ = generate_synthetic(SyntheticSpec(n_assets=2, length=120, noise_scale=0.02, seed=9))
    alpha = ema_alpha(5) == 1 / 3
    ident = ema(x, 1).tobytes() == x.tobytes()
    pos = inverse_smooth_positional(s, 1).values.tobytes() == s.values.tobytes()
    data = Dataset(s, split(s))
    spec = MethodSpec("is", AlgoConfig(), EnvConfig.for_series(s, state_lag=5), S=1)
    factory, cur = make_env_factory(spec, data, final=False)
    staged = factory(1).series.values.tobytes() == data.part("train").values.tobytes()
    sums = all(sum(b for _, b in stage_schedule(S, n)) == n for S in range(1, 9) for n in range(S, 3000, 7))
    ok = alpha and ident and pos and staged and sums
    assert verdict(9, "smoothing exactness", ok,
                   f"alpha(5)=1/3 {alpha}, ema(w=1) identity {ident}, IS(S=1) identity positional {pos} "
                   f"staged {staged}, schedule sums {sums}")


def test_c10_determinism(tmp_path):
    cfg = {"data": {"synthetic": {"n_assets": 2, "length": 400, "noise_scale": 0.02, "seed": 10}},
           "algo": {"profile": "ds1", "algorithm": "ppo"},
           "exp": {"methods": ["baseline", "rp", "ema", "dpd", "is"], "seeds": 3, "total_steps": 2920},
           "smoothing": {"S": 2}, "seed": 10}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    codes = [main(["evaluate", "--config", str(p), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a = (tmp_path / "a" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "results.csv").read_bytes()
    rows = a.decode().count("\n") - 1
    ok = codes == [0, 0] and a == b and rows == 5
    assert verdict(10, "determinism", ok, f"{rows} rows, results.csv byte-identical: {a == b}")
