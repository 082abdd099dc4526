"""First-order optimizers over named parameter sets.

All of them apply decoupled weight decay (the decay term multiplies the
parameter directly and never enters the moment estimates) and keep their
state as plain float64 arrays keyed by parameter name, so a checkpoint
can capture and restore a run bit for bit.
"""

import numpy as np

from .config import OptimConfig
from .exceptions import ConfigError, ShapeMismatch
from .params import ModelParams


class _MomentOptimizer:
    """Shared machinery: per-parameter first/second moments and decay."""

    kind = "moment"

    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def step(self, params: ModelParams, grads: dict):
        """Applies one update from a full gradient map."""
        self.t += 1
        current = params.arrays()
        if set(grads) != set(current):
            missing = sorted(set(current) ^ set(grads))
            raise ShapeMismatch(f"optimizer step: gradient map mismatch on {missing}")
        for name, x in current.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            delta = self._delta(name)
            params.replace(name, x - self.lr * self.weight_decay * x - delta)

    def _delta(self, name):
        raise NotImplementedError

    def state(self):
        """Returns (meta, arrays): a JSON-able header and flat float64 blobs."""
        arrays = {}
        for name, arr in self.m.items():
            arrays[f"m.{name}"] = arr
        for name, arr in self.v.items():
            arrays[f"v.{name}"] = arr
        return {"kind": self.kind, "t": self.t}, arrays

    def load_state(self, meta, arrays):
        if meta.get("kind") != self.kind:
            raise ConfigError(
                f"optimizer state kind {meta.get('kind')!r} does not match {self.kind!r}"
            )
        self.t = int(meta["t"])
        for name in self.m:
            self.m[name] = np.array(arrays[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v.{name}"], dtype=np.float64)


class Adam(_MomentOptimizer):
    """Adaptive moments with bias correction and decoupled decay."""

    kind = "adam"

    def _delta(self, name):
        m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
        v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class RAdam(_MomentOptimizer):
    """Adam with a rectified adaptive step.

    While the second-moment estimate is too young to trust (its effective
    sample size rho_t is 4 or less) the update is plain bias-corrected
    momentum, lr * m_hat, with no adaptive denominator; once rho_t
    exceeds 4 the adaptive step turns on with a variance-rectification
    factor that approaches 1 as t grows.
    """

    kind = "radam"

    def _delta(self, name):
        t = self.t
        m_hat = self.m[name] / (1.0 - self.beta1 ** t)
        rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        beta2_t = self.beta2 ** t
        rho = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
        if rho <= 4.0:
            return self.lr * m_hat
        v_hat = np.sqrt(self.v[name] / (1.0 - beta2_t))
        rect = np.sqrt(
            ((rho - 4.0) * (rho - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)
        )
        return self.lr * rect * m_hat / (v_hat + self.eps)


class Lookahead:
    """Slow/fast weight wrapper around an inner optimizer.

    Every ``k`` inner steps the slow weights move fraction ``alpha``
    toward the fast weights and the fast weights are reset onto them.
    """

    kind = "lookahead"

    def __init__(self, inner, params: ModelParams, k=5, alpha=0.5):
        if k < 1 or not 0.0 < alpha <= 1.0:
            raise ConfigError(f"lookahead: bad k={k} or alpha={alpha}")
        self.inner = inner
        self.k = int(k)
        self.alpha = float(alpha)
        self.count = 0
        self.slow = {n: a.copy() for n, a in params.arrays().items()}

    @property
    def lr(self):
        return self.inner.lr

    @lr.setter
    def lr(self, value):
        self.inner.lr = value

    def step(self, params: ModelParams, grads: dict):
        self.inner.step(params, grads)
        self.count += 1
        if self.count % self.k == 0:
            for name, fast in params.arrays().items():
                self.slow[name] = self.slow[name] + self.alpha * (fast - self.slow[name])
                params.replace(name, self.slow[name].copy())

    def state(self):
        meta, arrays = self.inner.state()
        for name, arr in self.slow.items():
            arrays[f"slow.{name}"] = arr
        return {"kind": self.kind, "count": self.count, "inner": meta}, arrays

    def load_state(self, meta, arrays):
        if meta.get("kind") != self.kind:
            raise ConfigError(
                f"optimizer state kind {meta.get('kind')!r} does not match 'lookahead'"
            )
        self.count = int(meta["count"])
        self.inner.load_state(meta["inner"], arrays)
        for name in self.slow:
            self.slow[name] = np.array(arrays[f"slow.{name}"], dtype=np.float64)


def make_optimizer(cfg: OptimConfig, params: ModelParams):
    """Builds the optimizer named by the config over the given parameters."""
    common = dict(
        lr=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    if cfg.optimizer == "adam":
        return Adam(params, **common)
    if cfg.optimizer == "radam":
        return RAdam(params, **common)
    inner = RAdam(params, **common)
    return Lookahead(inner, params, k=cfg.lookahead_steps, alpha=cfg.lookahead_alpha)
