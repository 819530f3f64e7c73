"""Dense tanh network with hand-derived gradients, shared by the token and joint denoisers."""

from __future__ import annotations

import numpy as np


class TanhNet:
    """``x -> tanh(W_k x + b_k)`` for each hidden layer, then a linear output layer."""

    def __init__(self, sizes, names, seed: int = 0):
        if len(names) != len(sizes) - 1:
            raise ValueError("one name per layer")
        rng = np.random.default_rng(seed)
        self.names = tuple(names)
        self.params = {}
        for name, fan_in, fan_out in zip(names, sizes[:-1], sizes[1:]):
            self.params[f"{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.params[f"{name}.b"] = np.zeros(fan_out)

    def forward(self, x):
        acts = [x]
        h = x
        for name in self.names[:-1]:
            h = np.tanh(h @ self.params[f"{name}.W"] + self.params[f"{name}.b"])
            acts.append(h)
        last = self.names[-1]
        return h @ self.params[f"{last}.W"] + self.params[f"{last}.b"], acts

    def backward(self, acts, dout):
        grads = {}
        delta = dout
        for i in range(len(self.names) - 1, -1, -1):
            name, a_in = self.names[i], acts[i]
            grads[f"{name}.W"] = a_in.T @ delta
            grads[f"{name}.b"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[f"{name}.W"].T) * (1.0 - a_in**2)
        return grads

    def copy(self) -> "TanhNet":
        other = object.__new__(TanhNet)
        other.names = self.names
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def layers_dict(self) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()}

    def load_layers(self, layers: dict) -> None:
        for k, layer in layers.items():
            if k not in self.params:
                raise KeyError(f"unexpected layer {k!r}")
            self.params[k] = np.asarray(layer["data"], dtype=float).reshape(layer["shape"])


class Optimizer:
    """Plain SGD or heavy-ball momentum over a parameter dict, with optional cosine decay."""

    def __init__(self, params: dict, learning_rate: float, kind: str = "momentum", momentum: float = 0.9,
                 total_steps: int = 0, decay: bool = False):
        self.params = params
        self.lr = learning_rate
        self.kind = kind
        self.momentum = momentum
        self.total = total_steps
        self.decay = decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def current_lr(self) -> float:
        if not self.decay or self.total <= 0:
            return self.lr
        frac = self.step_count / self.total
        return self.lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * frac)))

    def step(self, grads: dict) -> None:
        lr = self.current_lr()
        for k, g in grads.items():
            if self.kind == "momentum":
                self.velocity[k] = self.momentum * self.velocity[k] + g
                g = self.velocity[k]
            self.params[k] -= lr * g
        self.step_count += 1
