"""On-policy actor-critic learners (A2C, PPO, TRPO) over the portfolio MDP."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from . import env as penv
from .data import ConfigError, ProcessedSeries
from .nn import (ParamSet, Tensor, forward_policy, forward_value, gradient, init_mlp,
                 log_prob_entropy, log_softmax, make_optimizer, mlp_forward_t, mlp_jvp, mode_action,
                 policy_spec, sample_action, value_spec, NumericError)
from .smoothing import stage_schedule

ALGORITHMS = ("a2c", "ppo", "trpo")


@dataclass(frozen=True)
class AlgoConfig:
    algorithm: str = "ppo"
    lr: float = 1e-4
    steps_per_update: int = 292
    gamma: float = 0.956
    gae_lambda: float = 0.94
    entropy_coef: float = 0.0
    vf_coef: float = 0.5
    # ppo
    clip_eps: float = 0.2
    epochs: int = 10
    partition_factor: int = 4
    # trpo
    cg_max_steps: int = 15
    hessian_damping: float = 0.1
    line_search_reduction: float = 0.8
    line_search_max_iter: int = 10
    critic_updates: int = 10
    target_kl: float = 0.01
    kl_slack: float = 1.5
    subsample_factor: int = 1
    # optimiser / network
    optimizer: str = "adam"
    max_grad_clip: Optional[float] = None
    rmsprop_eps: float = 1e-8
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    normalize_advantage: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.steps_per_update < 1 or self.epochs < 1 or self.critic_updates < 0:
            raise ConfigError("steps_per_update and epochs must be >= 1")
        if not 1 <= self.partition_factor <= self.steps_per_update:
            raise ConfigError("partition_factor must give minibatches of at least one step")
        if self.subsample_factor < 1:
            raise ConfigError("subsample_factor must be >= 1")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def replace(self, **kw) -> "AlgoConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown algorithm settings: {sorted(unknown)}")
        return cls(**d)


# Tuned values for the two data-set profiles, row for row.
_PROFILES = {
    "ds1": {
        "state_lag": 10, "gross_limit": 1.0,
        "shared": dict(lr=1e-4, steps_per_update=292, gamma=0.956, gae_lambda=0.94),
        "ppo": dict(partition_factor=4, epochs=8, clip_eps=0.6, entropy_coef=0.03, vf_coef=4.6),
        "a2c": dict(entropy_coef=0.03, vf_coef=4.6, max_grad_clip=0.6, rmsprop_eps=0.0),
        "trpo": dict(partition_factor=4, cg_max_steps=15, hessian_damping=0.1,
                     line_search_reduction=0.8, line_search_max_iter=10, critic_updates=10,
                     target_kl=0.01, subsample_factor=1),
    },
    "ds2": {
        "state_lag": 45, "gross_limit": 2.0,
        "shared": dict(lr=1e-2, steps_per_update=73, gamma=0.908, gae_lambda=0.94),
        "ppo": dict(partition_factor=2, epochs=11, clip_eps=0.35, entropy_coef=0.02, vf_coef=0.5),
        "a2c": dict(entropy_coef=0.02, vf_coef=0.5, max_grad_clip=0.6, rmsprop_eps=0.0),
        "trpo": dict(partition_factor=2, cg_max_steps=15, hessian_damping=0.1,
                     line_search_reduction=0.8, line_search_max_iter=10, critic_updates=10,
                     target_kl=0.01, subsample_factor=1),
    },
}


def profile(name: str, algorithm: str) -> tuple[AlgoConfig, dict]:
    """AlgoConfig plus env settings (state_lag, gross_limit) for ``ds1``/``ds2``."""
    if name not in _PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}")
    p = _PROFILES[name]
    cfg = AlgoConfig(algorithm=algorithm, **p["shared"], **p[algorithm])
    return cfg, {"state_lag": p["state_lag"], "gross_limit": p["gross_limit"]}


# --------------------------------------------------------------------------
# model


@dataclass
class ActorCritic:
    policy: ParamSet
    value: ParamSet
    activation: str = "tanh"

    @classmethod
    def create(cls, obs_dim, n_assets, cfg: AlgoConfig, seed: int) -> "ActorCritic":
        ss = np.random.SeedSequence(seed).spawn(2)
        ps = policy_spec(obs_dim, n_assets, cfg.hidden, cfg.activation, int(ss[0].generate_state(1)[0]))
        vs = value_spec(obs_dim, cfg.hidden, cfg.activation, int(ss[1].generate_state(1)[0]))
        return cls(init_mlp(ps), init_mlp(vs), cfg.activation)

    @property
    def obs_dim(self) -> int:
        return self.policy[0].shape[0]

    @property
    def n_assets(self) -> int:
        return self.policy[-1].shape[0] // 3

    def logits(self, obs):
        return forward_policy(self.policy, obs, self.activation)

    def values(self, obs):
        return forward_value(self.value, obs, self.activation)

    def predict(self, obs) -> np.ndarray:
        return mode_action(self.logits(obs))

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.policy.copy(), self.value.copy(), self.activation)


@dataclass
class TrainedModel:
    model: ActorCritic
    cfg: AlgoConfig
    seed: int
    steps_trained: int
    history: list = field(default_factory=list)

    @property
    def policy(self) -> ParamSet:
        return self.model.policy

    @property
    def value(self) -> ParamSet:
        return self.model.value

    def predict(self, obs) -> np.ndarray:
        return self.model.predict(obs)


# --------------------------------------------------------------------------
# environments for training


class TrainingEnv:
    """Auto-resetting episode source over one series/range."""

    def __init__(self, series: ProcessedSeries, rng: range, cfg: penv.EnvConfig, oracle=None):
        self.series, self.range, self.cfg, self.oracle = series, rng, cfg, oracle
        self.obs_cache = penv.observation_matrix(series, cfg)
        self.state = None

    def reset(self) -> penv.EnvState:
        self.state = penv.reset(self.series, self.range, self.cfg, self.oracle, self.obs_cache)
        return self.state

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rewards)


def collect_rollout(env: TrainingEnv, model: ActorCritic, n_steps: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Run the current policy for ``n_steps`` transitions, resetting at range end.

    Observations do not depend on past actions in this MDP, so the network is
    evaluated once over the whole batch of upcoming states.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if env.state is None or env.state.done:
        env.reset()
    st = env.state
    lo, hi = st.start + env.cfg.warmup, st.stop
    ts = np.empty(n_steps, dtype=int)
    t = st.t
    for i in range(n_steps):
        ts[i] = t
        t = t + 1 if t + 1 < hi else lo
    obs = env.obs_cache[ts]
    logits = model.logits(obs)
    values = model.values(obs)
    actions, log_probs = sample_action(logits, rng)
    rewards = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    for i in range(n_steps):
        out = penv.step(env.state, actions[i])
        rewards[i] = out.reward
        if out.done:
            dones[i] = True
            env.reset()
    last_value = 0.0 if dones[-1] else float(model.values(env.state.observation))
    return RolloutBuffer(obs, actions, rewards, log_probs, values, dones, last_value)


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float, normalize: bool = True) -> RolloutBuffer:
    n = len(buf)
    adv = np.zeros(n)
    nxt_v, nxt_a = buf.last_value, 0.0
    for t in range(n - 1, -1, -1):
        live = 0.0 if buf.dones[t] else 1.0
        delta = buf.rewards[t] + gamma * nxt_v * live - buf.values[t]
        nxt_a = delta + gamma * lam * live * nxt_a
        adv[t] = nxt_a
        nxt_v = buf.values[t]
    buf.returns = adv + buf.values
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buf.advantages = adv
    return buf


# --------------------------------------------------------------------------
# losses


def _one_hot(actions) -> np.ndarray:
    idx = np.asarray(actions).astype(int) + 1
    return np.eye(3)[idx]


def _policy_terms(pp, obs, onehot, activation):
    B = obs.shape[0]
    lp = mlp_forward_t(pp, obs, activation).reshape(B, -1, 3).log_softmax()
    logp = (lp * onehot).sum(axis=2).sum(axis=1)
    entropy = -((lp.exp() * lp).sum(axis=2).sum(axis=1)).mean()
    return lp, logp, entropy


def policy_entropy(pp, obs, activation="tanh") -> Tensor:
    """Batch mean of the summed per-asset entropies."""
    B = obs.shape[0]
    lp = mlp_forward_t(pp, obs, activation).reshape(B, -1, 3).log_softmax()
    return -((lp.exp() * lp).sum(axis=2).sum(axis=1)).mean()


def value_loss(vp, obs, returns, activation="tanh") -> Tensor:
    v = mlp_forward_t(vp, obs, activation).reshape(obs.shape[0])
    return (v - returns).square().mean()


def a2c_loss(pp, vp, obs, actions, adv, returns, cfg: AlgoConfig, activation="tanh") -> Tensor:
    _, logp, ent = _policy_terms(pp, obs, _one_hot(actions), activation)
    pg = -(logp * adv).mean()
    return pg + cfg.vf_coef * value_loss(vp, obs, returns, activation) - cfg.entropy_coef * ent


def ppo_loss(pp, vp, obs, actions, old_logp, adv, returns, cfg: AlgoConfig, activation="tanh") -> Tensor:
    _, logp, ent = _policy_terms(pp, obs, _one_hot(actions), activation)
    ratio = (logp - old_logp).exp()
    s1 = ratio * adv
    s2 = ratio.clip(1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    pg = -(s1.minimum(s2)).mean()
    return pg + cfg.vf_coef * value_loss(vp, obs, returns, activation) - cfg.entropy_coef * ent


def surrogate_loss(pp, obs, actions, old_logp, adv, activation="tanh") -> Tensor:
    """Importance-weighted policy objective (to be maximised)."""
    _, logp, _ = _policy_terms(pp, obs, _one_hot(actions), activation)
    return ((logp - old_logp).exp() * adv).mean()


def kl_loss(pp, obs, old_probs, activation="tanh") -> Tensor:
    """Mean over the batch of sum over assets KL(old || new)."""
    B = obs.shape[0]
    lp = mlp_forward_t(pp, obs, activation).reshape(B, -1, 3).log_softmax()
    old_lp = np.log(np.maximum(old_probs, 1e-300))
    return ((lp * -1.0 + old_lp) * old_probs).sum(axis=2).sum(axis=1).mean()


def mean_kl(old_logits, new_logits) -> float:
    lo, ln = log_softmax(old_logits), log_softmax(new_logits)
    return float((np.exp(lo) * (lo - ln)).sum(axis=-1).sum(axis=-1).mean())


# --------------------------------------------------------------------------
# learners


class Learner:
    """Model plus optimiser state for one training run."""

    def __init__(self, model: ActorCritic, cfg: AlgoConfig, rng: np.random.Generator):
        self.model, self.cfg, self.rng = model, cfg, rng
        n_pol = len(model.policy)
        self._n_pol = n_pol
        if cfg.algorithm == "trpo":
            self.opt = make_optimizer("adam", model.value.arrays)
        else:
            self.opt = make_optimizer(cfg.optimizer, model.policy.arrays + model.value.arrays,
                                      cfg.max_grad_clip, cfg.rmsprop_eps)

    def _apply(self, grads):
        joint = ParamSet(self.model.policy.arrays + self.model.value.arrays)
        new = self.opt.step(joint, grads, self.cfg.lr)
        self.model.policy = ParamSet(new.arrays[:self._n_pol])
        self.model.value = ParamSet(new.arrays[self._n_pol:])

    def update(self, buf: RolloutBuffer) -> dict:
        return {"a2c": a2c_update, "ppo": ppo_update, "trpo": trpo_update}[self.cfg.algorithm](self, buf)


def _check_loss(loss):
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")


def a2c_update(learner: Learner, buf: RolloutBuffer, cfg: AlgoConfig | None = None) -> dict:
    cfg = cfg or learner.cfg
    m, n_pol = learner.model, learner._n_pol
    loss, grads = gradient(
        lambda p: a2c_loss(p[:n_pol], p[n_pol:], buf.obs, buf.actions, buf.advantages,
                           buf.returns, cfg, m.activation),
        m.policy.arrays + m.value.arrays)
    _check_loss(loss)
    learner._apply(grads)
    return {"loss": loss}


def ppo_update(learner: Learner, buf: RolloutBuffer, cfg: AlgoConfig | None = None) -> dict:
    cfg = cfg or learner.cfg
    m, n_pol = learner.model, learner._n_pol
    n = len(buf)
    k = min(cfg.partition_factor, n)
    losses = []
    for _ in range(cfg.epochs):
        order = learner.rng.permutation(n) if k > 1 else np.arange(n)
        for idx in np.array_split(order, k):
            loss, grads = gradient(
                lambda p: ppo_loss(p[:n_pol], p[n_pol:], buf.obs[idx], buf.actions[idx],
                                   buf.log_probs[idx], buf.advantages[idx], buf.returns[idx],
                                   cfg, m.activation),
                m.policy.arrays + m.value.arrays)
            _check_loss(loss)
            learner._apply(grads)
            losses.append(loss)
    return {"loss": float(np.mean(losses))}


def conjugate_gradient(Avp: Callable[[np.ndarray], np.ndarray], b, max_steps=15, tol=1e-10) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A given only products A v."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(max_steps):
        if rr <= tol * tol:
            break
        Ap = Avp(p)
        denom = p @ Ap
        if not np.isfinite(denom) or denom <= 0:
            if not np.isfinite(denom):
                raise NumericError("conjugate gradient produced a non-finite curvature")
            break
        alpha = rr / denom
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not np.all(np.isfinite(x)):
        raise NumericError("conjugate gradient produced a non-finite solution")
    return x


def fisher_vector_product(policy: ParamSet, obs, v, activation="tanh") -> np.ndarray:
    """Exact Hessian of the mean KL at the current policy times ``v`` (Gauss-Newton form)."""
    B = obs.shape[0]
    logits, dlogits = mlp_jvp(policy.arrays, obs, policy.unflatten(v).arrays, activation)
    logits = logits.reshape(B, -1, 3)
    dlogits = dlogits.reshape(B, -1, 3)
    p = np.exp(log_softmax(logits))
    u = p * (dlogits - (p * dlogits).sum(axis=-1, keepdims=True)) / B
    _, g = gradient(lambda pp: (mlp_forward_t(pp, obs, activation) * u.reshape(B, -1)).sum(),
                    policy.arrays)
    return np.concatenate([x.ravel() for x in g])


def trpo_update(learner: Learner, buf: RolloutBuffer, cfg: AlgoConfig | None = None) -> dict:
    cfg = cfg or learner.cfg
    m = learner.model
    act = m.activation
    obs, adv = buf.obs, buf.advantages
    old_logits = m.logits(obs)
    theta = m.policy.flatten()
    surr_old, g = gradient(lambda p: surrogate_loss(p, obs, buf.actions, buf.log_probs, adv, act),
                           m.policy.arrays)
    g = np.concatenate([x.ravel() for x in g])
    info = {"accepted": False, "kl": 0.0, "line_search_iters": 0}
    if np.any(g != 0):
        sub = obs[::cfg.subsample_factor]
        pol = m.policy

        def Fvp(v):
            return fisher_vector_product(pol, sub, v, act) + cfg.hessian_damping * v

        x = conjugate_gradient(Fvp, g, cfg.cg_max_steps)
        shs = float(x @ Fvp(x))
        if shs > 0:
            full = math.sqrt(2.0 * cfg.target_kl / shs) * x
            coef = 1.0
            for i in range(cfg.line_search_max_iter):
                cand = pol.unflatten(theta + coef * full)
                new_logits = forward_policy(cand, obs, act)
                kl = mean_kl(old_logits, new_logits)
                lp, _ = log_prob_entropy(new_logits, buf.actions)
                surr = float(np.mean(np.exp(lp - buf.log_probs) * adv))
                if kl <= cfg.kl_slack * cfg.target_kl and surr > surr_old:
                    m.policy = cand
                    info.update(accepted=True, kl=kl, line_search_iters=i + 1)
                    break
                coef *= cfg.line_search_reduction
    # critic regression
    n = len(buf)
    k = min(cfg.partition_factor, n)
    vlosses = []
    for _ in range(cfg.critic_updates):
        order = learner.rng.permutation(n) if k > 1 else np.arange(n)
        for idx in np.array_split(order, k):
            loss, grads = gradient(lambda p: value_loss(p, obs[idx], buf.returns[idx], act), m.value.arrays)
            _check_loss(loss)
            m.value = learner.opt.step(m.value, grads, cfg.lr)
            vlosses.append(loss)
    info["value_loss"] = float(np.mean(vlosses)) if vlosses else 0.0
    return info


# --------------------------------------------------------------------------
# training loop


def train(env_factory: Callable[[Optional[int]], TrainingEnv], cfg: AlgoConfig, total_steps: int,
          seed: int, curriculum=None, model: ActorCritic | None = None) -> TrainedModel:
    """Collect -> GAE -> update until ``total_steps`` environment steps are spent.

    ``env_factory(w_l)`` returns the training environment smoothed with EMA
    window ``w_l`` (``None`` = the method's own training data). With a staged
    curriculum the data switches at equal update-count boundaries, most
    smoothed first.
    """
    if total_steps < 0:
        raise ValueError("total_steps must be >= 0")
    ss = np.random.SeedSequence(seed)
    init_seed, run_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    rng = np.random.default_rng(run_seed)
    staged = curriculum is not None and curriculum.mode == "staged"
    if total_steps == 0 or total_steps >= cfg.steps_per_update:
        n_updates = -(-total_steps // cfg.steps_per_update)
    else:
        raise ConfigError(f"total_steps ({total_steps}) below steps_per_update ({cfg.steps_per_update})")
    stages = stage_schedule(curriculum.S, n_updates) if staged and n_updates else [(None, n_updates)]
    first = env_factory(stages[0][0])
    if model is None:
        model = ActorCritic.create(first.obs_dim, first.cfg.n_assets, cfg, init_seed)
    if total_steps == 0:
        return TrainedModel(model, cfg, seed, 0)
    learner = Learner(model, cfg, rng)
    history, done_steps = [], 0
    for s_idx, (w_l, budget) in enumerate(stages):
        env = first if s_idx == 0 else env_factory(w_l)
        env.reset()
        for _ in range(budget):
            n = min(cfg.steps_per_update, total_steps - done_steps)
            buf = collect_rollout(env, learner.model, n, rng)
            compute_gae(buf, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantage)
            info = learner.update(buf)
            done_steps += n
            history.append({"steps": done_steps, "w_l": w_l, "reward_mean": float(buf.rewards.mean()), **info})
    return TrainedModel(learner.model, cfg, seed, done_steps, history)


def greedy_episode(model, series: ProcessedSeries, rng: range, env_cfg: penv.EnvConfig):
    """Deterministic (mode-action) pass over ``rng``; returns per-step log-returns."""
    env_cfg = env_cfg.replace(reward_hook="env_return")
    st = penv.reset(series, rng, env_cfg)
    obs = st.obs_cache[st.t:st.stop]
    actions = model.predict(obs)
    rewards = np.empty(len(obs))
    for i, a in enumerate(actions):
        rewards[i] = penv.step(st, a).reward
    return rewards, actions
