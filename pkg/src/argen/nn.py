"""Small numpy MLP with hand-written backprop, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def init_mlp(sizes, rng, out_scale=1.0):
    """He-style init; the last layer is optionally shrunk by ``out_scale``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / fan_in)
        if i == len(sizes) - 2:
            scale *= out_scale
        params[f"W{i}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def mlp_forward(params, x, n_layers):
    """SiLU hidden layers, linear output. Returns (out, cache)."""
    cache = [x]
    h = x
    for i in range(n_layers):
        a = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            cache.append(a)
            h = silu(a)
            cache.append(h)
        else:
            h = a
    return h, cache


def mlp_backward(params, cache, grad_out, n_layers):
    grads = {}
    g = grad_out
    for i in reversed(range(n_layers)):
        h_in = cache[0] if i == 0 else cache[2 * i]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params[f"W{i}"].T) * silu_grad(cache[2 * i - 1])
    return grads


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, lr=None):
        """In-place descent step on ``params``; pass negated grads to ascend."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            if lr:
                params[k] = params[k] - lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
