"""
Dense networks with hand-written backprop, Adam with global-norm clipping,
Polyak averaging and a running observation normalizer.

A network keeps its parameters in a flat ordered ``dict`` of float64 arrays so
that optimizers, target copies and checkpoints can treat every network alike.
Weights are stored (in, out) and inputs are (batch, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cpg import HEAD_NAMES, head_sizes
from .errors import NumericError, StructuralError

ACTIVATIONS = ("relu", "linear", "tanh")


def _init_layer(rng, fan_in, fan_out, scale=None):
    # He-uniform for rectified layers unless an explicit small range is given
    limit = np.sqrt(6.0 / max(fan_in, 1)) if scale is None else scale
    W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    b = np.zeros(fan_out) if scale is None else rng.uniform(-limit, limit, size=fan_out)
    return W, b


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out, g):
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


@dataclass
class Mlp:
    """A chain of dense layers; ``prefix`` namespaces the parameter keys."""

    prefix: str
    sizes: tuple
    activations: tuple

    def keys(self):
        for k in range(len(self.activations)):
            yield f"{self.prefix}W{k}"
            yield f"{self.prefix}b{k}"

    def init(self, rng, out_scale=None) -> dict:
        params = {}
        last = len(self.activations) - 1
        for k in range(len(self.activations)):
            scale = out_scale if k == last else None
            W, b = _init_layer(rng, self.sizes[k], self.sizes[k + 1], scale)
            params[f"{self.prefix}W{k}"] = W
            params[f"{self.prefix}b{k}"] = b
        return params

    def forward(self, params, x):
        cache = [x]
        h = x
        for k, act in enumerate(self.activations):
            z = h @ params[f"{self.prefix}W{k}"] + params[f"{self.prefix}b{k}"]
            h = _act(act, z)
            cache.append((z, h))
        return h, cache

    def backward(self, params, cache, g_out, grads):
        """Accumulate parameter gradients into ``grads``; return dL/dx."""
        g = g_out
        for k in range(len(self.activations) - 1, -1, -1):
            z, out = cache[k + 1]
            g = _act_grad(self.activations[k], z, out, g)
            h_in = cache[k] if k == 0 else cache[k][1]
            grads[f"{self.prefix}W{k}"] = grads.get(f"{self.prefix}W{k}", 0.0) + h_in.T @ g
            grads[f"{self.prefix}b{k}"] = grads.get(f"{self.prefix}b{k}", 0.0) + g.sum(axis=0)
            g = g @ params[f"{self.prefix}W{k}"].T
        return g


class _Net:
    """Shared flat-vector helpers for networks holding a ``params`` dict."""

    params: dict

    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([np.broadcast_to(grads[k], v.shape).ravel() for k, v in self.params.items()])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != sum(v.size for v in self.params.values()):
            raise StructuralError("flat vector size does not match the network")
        params, i = {}, 0
        for k, v in self.params.items():
            params[k] = flat[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        return self.replace_params(params)

    def replace_params(self, params: dict):
        raise NotImplementedError

    def copy(self):
        return self.replace_params({k: v.copy() for k, v in self.params.items()})

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise StructuralError(f"input width {x.shape[-1]} does not match network input {self.in_dim}")
        return x


@dataclass
class ActorNet(_Net):
    """Shared trunk and five tanh-bounded heads producing raw CPG goals."""

    in_dim: int
    n: int
    hidden: tuple
    head_hidden: int
    params: dict = field(repr=False)

    @classmethod
    def create(cls, in_dim, n, rng, hidden=(1024, 512), head_hidden=512, head_init=1e-3):
        net = cls(in_dim, n, tuple(hidden), head_hidden, {})
        params = net.trunk.init(rng)
        for head in net.heads:
            params.update(head.init(rng, out_scale=head_init))
        net.params = params
        return net

    @property
    def trunk(self) -> Mlp:
        return Mlp("trunk.", (self.in_dim,) + self.hidden, ("relu",) * len(self.hidden))

    @property
    def heads(self) -> list[Mlp]:
        # every head reads the last trunk layer
        return [Mlp(f"{name}.", (self.hidden[-1], self.head_hidden, size), ("relu", "tanh"))
                for name, size in zip(HEAD_NAMES, head_sizes(self.n))]

    def replace_params(self, params):
        return ActorNet(self.in_dim, self.n, self.hidden, self.head_hidden, params)

    def forward(self, x):
        """Returns the five raw head vectors (batch, size) and a backprop cache."""
        x = np.atleast_2d(self._check_input(x))
        h, trunk_cache = self.trunk.forward(self.params, x)
        outs, caches = [], []
        for head in self.heads:
            y, c = head.forward(self.params, h)
            outs.append(y)
            caches.append(c)
        return outs, (trunk_cache, caches)

    def backward(self, cache, head_grads) -> dict:
        trunk_cache, caches = cache
        grads = {}
        g_h = 0.0
        for head, c, g in zip(self.heads, caches, head_grads):
            g_h = g_h + head.backward(self.params, c, g, grads)
        self.trunk.backward(self.params, trunk_cache, g_h, grads)
        return grads


@dataclass
class FeedForwardActor(_Net):
    """Baseline actor: same trunk, one tanh output of joint goals."""

    in_dim: int
    n: int
    hidden: tuple
    params: dict = field(repr=False)

    @classmethod
    def create(cls, in_dim, n, rng, hidden=(1024, 512), head_init=1e-3):
        net = cls(in_dim, n, tuple(hidden), {})
        net.params = net.mlp.init(rng, out_scale=head_init)
        return net

    @property
    def mlp(self) -> Mlp:
        return Mlp("ff.", (self.in_dim,) + self.hidden + (self.n,), ("relu",) * len(self.hidden) + ("tanh",))

    def replace_params(self, params):
        return FeedForwardActor(self.in_dim, self.n, self.hidden, params)

    def forward(self, x):
        x = np.atleast_2d(self._check_input(x))
        return self.mlp.forward(self.params, x)

    def backward(self, cache, g_out) -> dict:
        grads = {}
        self.mlp.backward(self.params, cache, g_out, grads)
        return grads


@dataclass
class CriticNet(_Net):
    """Q(x) over x = [observation window, goal, flattened action window].

    Hidden layers are rectified except the last, which is linear, followed by
    a scalar linear output.
    """

    in_dim: int
    hidden: tuple
    params: dict = field(repr=False)

    @classmethod
    def create(cls, in_dim, rng, hidden=(1024, 1024, 512, 512)):
        net = cls(in_dim, tuple(hidden), {})
        params = net.mlp.init(rng)
        # the final scalar layer starts small so initial Q values stay near zero
        last = len(hidden)
        params[f"q.W{last}"], params[f"q.b{last}"] = _init_layer(rng, hidden[-1], 1, 1e-3)
        net.params = params
        return net

    @property
    def mlp(self) -> Mlp:
        acts = ("relu",) * (len(self.hidden) - 1) + ("linear", "linear")
        return Mlp("q.", (self.in_dim,) + self.hidden + (1,), acts)

    def replace_params(self, params):
        return CriticNet(self.in_dim, self.hidden, params)

    def forward(self, x):
        x = np.atleast_2d(self._check_input(x))
        q, cache = self.mlp.forward(self.params, x)
        return q[:, 0], cache

    def backward(self, cache, g_q):
        """Returns (parameter grads, dL/dx) for dL/dQ of shape (batch,)."""
        grads = {}
        g_x = self.mlp.backward(self.params, cache, np.asarray(g_q, dtype=np.float64)[:, None], grads)
        return grads, g_x

    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms; bounds |Q(x) - Q(x')| / |x - x'|."""
        L = 1.0
        for k in range(len(self.hidden) + 1):
            L *= np.linalg.norm(self.params[f"q.W{k}"], 2)
        return float(L)


def zero_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    clip: float = 2.0
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict, lr=2e-4, betas=(0.9, 0.999), clip=2.0, eps=1e-8):
        return cls(zero_like_params(params), zero_like_params(params), 0, lr, tuple(betas), clip, eps)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(np.square(g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, threshold: float) -> dict:
    norm = global_norm(grads)
    if threshold is None or norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


def adam_step(params: dict, grads: dict, opt: OptimState):
    """Clip to the global-norm threshold, then one bias-corrected Adam update.

    Minimizes: params move against ``grads``. Returns new params and state.
    """
    if set(grads) != set(params):
        raise StructuralError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if np.shape(g) != params[k].shape:
            raise StructuralError(f"gradient '{k}' has shape {np.shape(g)}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for '{k}'", step=opt.step)
    grads = clip_by_global_norm(grads, opt.clip)
    b1, b2 = opt.betas
    t = opt.step + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        m[k] = b1 * opt.m[k] + (1 - b1) * grads[k]
        v[k] = b2 * opt.v[k] + (1 - b2) * grads[k] ** 2
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new_params[k] = p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new_params, OptimState(m, v, t, opt.lr, opt.betas, opt.clip, opt.eps)


def polyak_update(target: dict, source: dict, rho: float) -> dict:
    """target <- rho * target + (1 - rho) * source."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if target.keys() != source.keys():
        raise StructuralError("target and source parameter keys differ")
    out = {}
    for k, t in target.items():
        if t.shape != source[k].shape:
            raise StructuralError(f"shape mismatch for '{k}'")
        out[k] = rho * t + (1.0 - rho) * source[k]
    return out


@dataclass
class RunningNormalizer:
    """Running mean/variance of observations, frozen once babbling ends."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    frozen: bool = False
    min_std: float = 1e-2
    clip: float = 10.0

    @classmethod
    def create(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def update(self, x):
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        batch_mean = x.mean(axis=0)
        batch_var = x.var(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        if self.count == 0:
            self.mean, self.var = batch_mean, batch_var
        else:
            m2 = self.var * self.count + batch_var * n + delta**2 * self.count * n / total
            self.mean = self.mean + delta * n / total
            self.var = m2 / total
        self.count = total

    def __call__(self, x):
        z = (np.asarray(x) - self.mean) / np.maximum(np.sqrt(self.var), self.min_std)
        return np.clip(z, -self.clip, self.clip)
