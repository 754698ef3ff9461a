"""Adam with global-norm clipping, linear warmup, and dev-loss-driven
learning rate decay.

Frozen parameters (requires_grad False) and parameters that took no
part in the step's graph (grad None) are skipped outright: no moment
update, no value change.  The clip norm is computed over the
participating gradients only.
"""
from __future__ import annotations

import math

import numpy as np


class NonFiniteGradError(FloatingPointError):
    """A gradient came back NaN or infinite; the step must abort."""


def freeze(params, prefixes):
    """Turn off updates for every parameter whose name starts with one
    of the prefixes.  Returns the matched names."""
    return _set_frozen(params, prefixes, True)


def unfreeze(params, prefixes):
    """Re-enable updates for parameters matched by the prefixes."""
    return _set_frozen(params, prefixes, False)


def _set_frozen(params, prefixes, frozen):
    hits = [p for p in params
            if any(p.name.startswith(x) for x in prefixes)]
    if not hits:
        raise ValueError("no parameters match prefixes %r" % (prefixes,))
    for p in hits:
        p.requires_grad = not frozen
    return [p.name for p in hits]


class Adam:
    """Standard Adam with bias correction.

    Effective learning rate is lr * min(1, t / warmup_steps) where lr
    starts at base_lr and decays by 0.7 whenever the dev loss fails to
    improve by 0.2% relative over the best seen, floored at base/50.
    """

    DECAY = 0.7
    IMPROVEMENT = 0.002
    FLOOR_DIV = 50.0

    def __init__(self, params, base_lr, warmup_steps, clip_norm=5.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if base_lr <= 0:
            raise ValueError("base_lr must be positive, got %g" % base_lr)
        self.params = []
        self.m = {}
        self.v = {}
        self.register(params)
        self.base_lr = float(base_lr)
        self.lr = float(base_lr)
        self.warmup_steps = int(warmup_steps)
        self.clip_norm = float(clip_norm)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.best_dev = None

    def register(self, params):
        """Add parameters (fresh zero moments); used when the
        architecture grows mid-stage."""
        for p in params:
            if p.name in self.m:
                raise ValueError("parameter %s already registered" % p.name)
            self.params.append(p)
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)

    def effective_lr(self):
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, self.t / self.warmup_steps)

    def step(self):
        """Apply one update from the grads sitting on the parameters.
        Returns the pre-clip global gradient norm."""
        self.t += 1
        live = [p for p in self.params
                if p.requires_grad and p.grad is not None]
        sq = 0.0
        for p in live:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(
                    "non-finite gradient in %s at step %d" % (p.name, self.t))
            sq += float(np.sum(g * g))
        norm = math.sqrt(sq)
        scale = 1.0
        if norm > self.clip_norm > 0:
            scale = self.clip_norm / norm
        lr = self.effective_lr()
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in live:
            g = p.grad * scale
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def dev_update(self, dev_loss):
        """Record a dev evaluation; decay the lr if it failed to improve
        enough.  Returns True when a decay happened."""
        dev_loss = float(dev_loss)
        if self.best_dev is None:
            self.best_dev = dev_loss
            return False
        improved = (self.best_dev - dev_loss) >= (
            self.IMPROVEMENT * abs(self.best_dev))
        if dev_loss < self.best_dev:
            self.best_dev = dev_loss
        if not improved:
            self.lr = max(self.lr * self.DECAY,
                          self.base_lr / self.FLOOR_DIV)
            return True
        return False

    def state_dict(self):
        """Everything needed to resume: moments and schedule scalars."""
        return {
            "t": self.t,
            "lr": self.lr,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "clip_norm": self.clip_norm,
            "best_dev": self.best_dev,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.base_lr = float(state["base_lr"])
        self.warmup_steps = int(state["warmup_steps"])
        self.clip_norm = float(state["clip_norm"])
        self.best_dev = state["best_dev"]
        if self.best_dev is not None:
            self.best_dev = float(self.best_dev)
        for name in self.m:
            if name not in state["m"]:
                raise ValueError("optimizer state is missing moments for %s"
                                 % name)
            if state["m"][name].shape != self.m[name].shape:
                raise ValueError("moment shape mismatch for %s" % name)
            self.m[name] = state["m"][name].copy()
            self.v[name] = state["v"][name].copy()
