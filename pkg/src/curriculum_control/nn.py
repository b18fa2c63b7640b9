"""MLP actor/critic networks with a small reverse-mode autodiff.

Only the primitives the learners need are supported: affine maps, tanh/relu,
exp, log-softmax, elementwise arithmetic, minimum/clip, sums and means.
Anything else (for instance a raw numpy ufunc applied to a :class:`Tensor`)
fails when the expression is built, not when it is differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIONS = np.array([-1, 0, 1])


class NumericError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# autodiff


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __array_ufunc__ = None  # np.sin(t) etc. raise TypeError at construction time
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    def __array_function__(self, func, types, args, kwargs):
        raise TypeError(f"{func.__name__} is not a supported differentiable primitive")

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar")
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                stack.extend((p, False) for p in n._parents)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _acc(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self._acc(_unbroadcast(g, self.shape))
            other._acc(_unbroadcast(g, other.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda g: self._acc(-g)
        return out

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self._acc(_unbroadcast(g * other.data, self.shape))
            other._acc(_unbroadcast(g * self.data, other.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __pow__(self, k):
        if k != 2:
            raise TypeError("only squaring is supported")
        return self.square()

    def square(self):
        out = Tensor(self.data * self.data, (self,))
        out._backward = lambda g: self._acc(2.0 * self.data * g)
        return out

    def __matmul__(self, other):
        other = _lift(other)
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            self._acc(g @ other.data.T)
            other._acc(self.data.T @ g)
        out._backward = bw
        return out

    # elementwise ----------------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._acc(g * (1.0 - y * y))
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor(self.data * mask, (self,))
        out._backward = lambda g: self._acc(g * mask)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._acc(g * y)
        return out

    def log_softmax(self):
        """Along the last axis."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(y)
        out = Tensor(y, (self,))
        out._backward = lambda g: self._acc(g - p * g.sum(axis=-1, keepdims=True))
        return out

    def clip(self, lo, hi):
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), (self,))
        out._backward = lambda g: self._acc(g * mask)
        return out

    def minimum(self, other):
        other = _lift(other)
        pick = self.data <= other.data
        out = Tensor(np.where(pick, self.data, other.data), (self, other))

        def bw(g):
            self._acc(_unbroadcast(g * pick, self.shape))
            other._acc(_unbroadcast(g * ~pick, other.shape))
        out._backward = bw
        return out

    # reductions / shape ---------------------------------------------------
    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), (self,))

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._acc(np.broadcast_to(g, self.shape).copy())
        out._backward = bw
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) / n

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._acc(g.reshape(self.shape))
        return out


# --------------------------------------------------------------------------
# parameters and networks


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    out_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if min(self.input_dim, self.output_dim, *self.hidden) < 1:
            raise ValueError("layer sizes must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


def policy_spec(obs_dim: int, n_assets: int, hidden=(64, 64), activation="tanh", seed=0) -> MlpSpec:
    return MlpSpec(obs_dim, 3 * n_assets, hidden, activation, out_scale=0.01, seed=seed)


def value_spec(obs_dim: int, hidden=(64, 64), activation="tanh", seed=0) -> MlpSpec:
    return MlpSpec(obs_dim, 1, hidden, activation, out_scale=1.0, seed=seed)


class ParamSet:
    """Ordered weight/bias arrays ``[W0, b0, W1, b1, ...]``."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.arrays = [np.asarray(a, dtype=float) for a in arrays]

    def __len__(self):
        return len(self.arrays)

    def __iter__(self):
        return iter(self.arrays)

    def __getitem__(self, i):
        return self.arrays[i]

    @property
    def shapes(self):
        return [a.shape for a in self.arrays]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def unflatten(self, vec) -> "ParamSet":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ValueError(f"vector of size {vec.size} does not match {self.size} parameters")
        out, i = [], 0
        for a in self.arrays:
            out.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        return ParamSet(out)

    def copy(self) -> "ParamSet":
        return ParamSet([a.copy() for a in self.arrays])

    def layer_name(self, i: int) -> str:
        return f"{'W' if i % 2 == 0 else 'b'}{i // 2}"


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_mlp(spec: MlpSpec) -> ParamSet:
    """Orthogonal init (gain sqrt 2 hidden, ``out_scale`` on the output layer), zero biases."""
    rng = np.random.default_rng(spec.seed)
    sizes = spec.sizes
    arrays = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = spec.out_scale if i == len(sizes) - 2 else np.sqrt(2.0)
        arrays += [_orthogonal(rng, n_in, n_out, gain), np.zeros(n_out)]
    return ParamSet(arrays)


def mlp_forward(params, x, activation="tanh") -> np.ndarray:
    act = np.tanh if activation == "tanh" else (lambda v: np.maximum(v, 0.0))
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = act(h)
    return h


def mlp_forward_t(params: Sequence[Tensor], x, activation="tanh") -> Tensor:
    h = _lift(x)
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = h.tanh() if activation == "tanh" else h.relu()
    return h


def mlp_jvp(params, x, tangent, activation="tanh"):
    """Forward-mode derivative: (output, d output along parameter direction ``tangent``)."""
    h = np.asarray(x, dtype=float)
    dh = np.zeros_like(h)
    n = len(params) // 2
    for i in range(n):
        W, b = params[2 * i], params[2 * i + 1]
        dW, db = tangent[2 * i], tangent[2 * i + 1]
        z = h @ W + b
        dz = dh @ W + h @ dW + db
        if i < n - 1:
            if activation == "tanh":
                h = np.tanh(z)
                dh = (1.0 - h * h) * dz
            else:
                mask = z > 0
                h, dh = z * mask, dz * mask
        else:
            h, dh = z, dz
    return h, dh


def _check_obs(params, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != params[0].shape[0]:
        raise ValueError(f"observation has dimension {obs.shape[-1]}, network expects {params[0].shape[0]}")
    return obs


def forward_policy(params, obs, activation="tanh") -> np.ndarray:
    """Per-asset logits of shape (..., N, 3) over actions (-1, 0, 1)."""
    obs = _check_obs(params, obs)
    out = mlp_forward(params, obs, activation)
    return out.reshape(*out.shape[:-1], -1, 3)


def forward_value(params, obs, activation="tanh"):
    obs = _check_obs(params, obs)
    v = mlp_forward(params, obs, activation)[..., 0]
    return float(v) if v.ndim == 0 else v


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_index(a) -> np.ndarray:
    return np.asarray(a).astype(int) + 1


def log_prob_entropy(logits, a):
    """Joint log-probability and entropy of a factorised categorical policy."""
    lp = log_softmax(np.asarray(logits, dtype=float))
    idx = action_index(a)
    chosen = np.take_along_axis(lp, idx[..., None], axis=-1)[..., 0]
    ent = -(np.exp(lp) * lp).sum(axis=-1)
    return chosen.sum(axis=-1), ent.sum(axis=-1)


def sample_action(logits, rng: np.random.Generator):
    logits = np.asarray(logits, dtype=float)
    lp = log_softmax(logits)
    cdf = np.cumsum(np.exp(lp), axis=-1)
    u = rng.random(lp.shape[:-1])[..., None]
    idx = np.minimum((u > cdf).sum(axis=-1), 2)
    a = ACTIONS[idx]
    logp = np.take_along_axis(lp, idx[..., None], axis=-1)[..., 0].sum(axis=-1)
    return a, logp


def mode_action(logits) -> np.ndarray:
    """Greedy action per asset (ties resolve to the lower action index)."""
    return ACTIONS[np.argmax(np.asarray(logits), axis=-1)]


def gradient(loss_fn: Callable[[list[Tensor]], Tensor], params) -> tuple[float, list[np.ndarray]]:
    """Value and exact reverse-mode gradient of a scalar loss w.r.t. every parameter array."""
    leaves = [Tensor(p) for p in params]
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor):
        raise TypeError("loss function must return a Tensor")
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in leaves]
    return float(loss.data), grads


# --------------------------------------------------------------------------
# optimisers


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_grads(grads, max_norm):
    if max_norm is None:
        return list(grads)
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


def _check_finite(grads, names):
    for g, name in zip(grads, names):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {name}")


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_clip=None):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.max_grad_clip = max_grad_clip

    def step(self, params: ParamSet, grads, lr: float) -> ParamSet:
        params = params if isinstance(params, ParamSet) else ParamSet(params)
        _check_finite(grads, [params.layer_name(i) for i in range(len(params))])
        grads = clip_grads(grads, self.max_grad_clip)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return ParamSet(out)


class RMSProp:
    def __init__(self, params, decay=0.99, eps=1e-8, max_grad_clip=None):
        self.v = [np.zeros_like(p) for p in params]
        self.decay, self.eps = decay, eps
        self.max_grad_clip = max_grad_clip

    def step(self, params: ParamSet, grads, lr: float) -> ParamSet:
        params = params if isinstance(params, ParamSet) else ParamSet(params)
        _check_finite(grads, [params.layer_name(i) for i in range(len(params))])
        grads = clip_grads(grads, self.max_grad_clip)
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.v[i] = self.decay * self.v[i] + (1 - self.decay) * g * g
            denom = np.sqrt(self.v[i]) + self.eps
            # eps may be 0; coordinates that never saw a gradient stay put
            upd = np.divide(g, denom, out=np.zeros_like(g), where=denom > 0)
            out.append(p - lr * upd)
        return ParamSet(out)


def make_optimizer(kind: str, params, max_grad_clip=None, rmsprop_eps=1e-8):
    if kind == "adam":
        return Adam(params, max_grad_clip=max_grad_clip)
    if kind == "rmsprop":
        return RMSProp(params, eps=rmsprop_eps, max_grad_clip=max_grad_clip)
    raise ValueError(f"unknown optimizer {kind!r}")


def adam_step(opt: Adam, params, grads, lr):
    return opt.step(params, grads, lr)


def rmsprop_step(opt: RMSProp, params, grads, lr):
    return opt.step(params, grads, lr)
