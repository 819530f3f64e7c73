"""Approximations of p(x_1^d | x_t): exact Bayes posterior, empirical tables and a small MLP.

Every denoiser exposes ``logits(xt, t)`` and ``predict(xt, t)``; both return
arrays of shape ``(B, D, S)`` for a batch ``xt`` of shape ``(B, D)``. ``t`` is a
scalar or an array of shape ``(B,)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import TrainingDivergedError, UnreachableStateError
from .flows import EPS, ConditionalFlow, TabularDistribution, require_tabular, sample_corrupted
from .network import Optimizer, TanhNet
from .utils import as_rng, log_softmax, one_hot, sinusoidal_features, softmax

N_TIME_FEATURES = 8


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=float) / temperature)


class Denoiser:
    S: int
    temperature: float = 1.0

    def logits(self, xt, t) -> np.ndarray:
        raise NotImplementedError

    def predict(self, xt, t, temperature: Optional[float] = None) -> np.ndarray:
        temp = self.temperature if temperature is None else temperature
        return apply_temperature(self.logits(xt, t), temp)


# -- exact posterior ----------------------------------------------------------


def _likelihoods(dist: TabularDistribution, flow: ConditionalFlow, t, xt: np.ndarray) -> np.ndarray:
    """p(x_t | x_1^(k)) for every support row k; shape (B, K)."""
    B, D = xt.shape
    cand = np.arange(flow.S)
    t = np.asarray(t, dtype=float)
    lik = np.ones((B, len(dist)))
    if t.ndim == 0:
        table = flow.probs(t, cand)  # (S, n)
        for d in range(D):
            lik *= table[dist.tokens[:, d][None, :], xt[:, d][:, None]]
    else:
        table = flow.probs(t[:, None], cand[None, :])  # (B, S, n)
        rows = np.arange(B)[:, None]
        for d in range(D):
            lik *= table[rows, dist.tokens[:, d][None, :], xt[:, d][:, None]]
    return lik


def _nearest_support_weights(dist, flow, t, xt):
    """Posterior weights for states off the support of p_t.

    Support rows that are incompatible with the fewest dimensions of ``xt`` are
    kept and weighted by p_data times the likelihood of the compatible dimensions.
    """
    B, D = xt.shape
    cand = np.arange(flow.S)
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    table = flow.probs(t[:, None], cand[None, :])  # (B, S, n)
    rows = np.arange(B)[:, None]
    misses = np.zeros((B, len(dist)), dtype=np.int64)
    loglik = np.zeros((B, len(dist)))
    for d in range(D):
        p = table[rows, dist.tokens[:, d][None, :], xt[:, d][:, None]]
        dead = p <= 0
        misses += dead
        loglik += np.log(np.where(dead, 1.0, p))
    best = misses == misses.min(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        logw = np.where(best, loglik + np.log(dist.probs)[None, :], -np.inf)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def joint_posterior(dist: TabularDistribution, flow: ConditionalFlow, t, xt,
                    on_unreachable: str = "raise") -> np.ndarray:
    """p(x_1 = support row k | x_t), shape (B, K).

    ``on_unreachable="nearest"`` replaces the error for zero-probability states
    with :func:`_nearest_support_weights`.
    """
    xt = np.atleast_2d(np.asarray(xt, dtype=np.int64))
    flow.alphabet.check(xt)
    w = _likelihoods(dist, flow, t, xt) * dist.probs[None, :]
    z = w.sum(axis=1, keepdims=True)
    bad = z[:, 0] <= 0
    if np.any(bad):
        if on_unreachable != "nearest":
            raise UnreachableStateError("x_t has zero probability under p_t")
        z = np.where(bad[:, None], 1.0, z)
        t_bad = np.broadcast_to(np.asarray(t, dtype=float), bad.shape)[bad]
        out = w / z
        out[bad] = _nearest_support_weights(dist, flow, t_bad, xt[bad])
        return out
    return w / z


def exact_posterior(dist: TabularDistribution, flow: ConditionalFlow, t, xt,
                    on_unreachable: str = "raise") -> np.ndarray:
    """Per-dimension marginals of the exact posterior, shape (B, D, S)."""
    dist = require_tabular(dist)
    post = joint_posterior(dist, flow, t, xt, on_unreachable)
    return np.einsum("bk,kds->bds", post, one_hot(dist.tokens, dist.S))


class ExactPosterior(Denoiser):
    """Bayes posterior of a tabular distribution.

    Factorised Euler steps can move several dimensions at once and so land on
    states p_t never visits; by default such states are scored against the
    nearest support rows instead of raising (``on_unreachable="raise"``).
    """

    def __init__(self, dist: TabularDistribution, flow: ConditionalFlow, temperature: float = 1.0,
                 on_unreachable: str = "nearest"):
        if on_unreachable not in ("raise", "nearest"):
            raise ValueError(f"unknown on_unreachable policy {on_unreachable!r}")
        self.dist = require_tabular(dist)
        self.flow = flow
        self.S = dist.S
        self.temperature = temperature
        self.on_unreachable = on_unreachable

    def _posterior(self, xt, t):
        return exact_posterior(self.dist, self.flow, t, xt, self.on_unreachable)

    def logits(self, xt, t):
        with np.errstate(divide="ignore"):
            return np.log(self._posterior(xt, t))

    def predict(self, xt, t, temperature=None):
        temp = self.temperature if temperature is None else temperature
        if temp == 1.0:
            return self._posterior(xt, t)
        return apply_temperature(self.logits(xt, t), temp)


class EmpiricalDenoiser(ExactPosterior):
    """Exact posterior of the empirical distribution of a sample set."""

    def __init__(self, samples, S: int, flow: ConditionalFlow, temperature: float = 1.0,
                 on_unreachable: str = "nearest"):
        super().__init__(TabularDistribution.from_samples(samples, S), flow, temperature, on_unreachable)


class PointMassDenoiser(Denoiser):
    """Always predicts the same clean sequence."""

    def __init__(self, x1, S: int):
        self.x1 = np.asarray(x1, dtype=np.int64)
        self.S = S

    def logits(self, xt, t):
        xt = np.atleast_2d(xt)
        with np.errstate(divide="ignore"):
            return np.log(np.broadcast_to(one_hot(self.x1, self.S), xt.shape + (self.S,)))


# -- MLP ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 128
    steps: int = 2000
    seed: int = 0
    optimizer: str = "momentum"  # "sgd" or "momentum"
    momentum: float = 0.9
    eps: float = EPS
    time_sampling: str = "uniform"  # t ~ U[eps, 1 - eps]
    ce_weighting: str = "none"  # "none" or "inverse_one_minus_t"
    lr_decay: bool = True
    divergence_threshold: float = 1e6  # a loss above this (in nats) counts as divergence

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.steps < 0:
            raise ValueError("learning_rate and batch_size must be positive, steps non-negative")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.time_sampling != "uniform":
            raise ValueError(f"unknown time_sampling {self.time_sampling!r}")
        if self.ce_weighting not in ("none", "inverse_one_minus_t"):
            raise ValueError(f"unknown ce_weighting {self.ce_weighting!r}")


LAYERS = ("embed", "hidden1", "hidden2", "head")


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class MLPDenoiser(Denoiser):
    """one-hot(x_t) + time features -> tanh x3 -> (D, S) logits.

    Gradients are hand-derived; :meth:`loss_and_grad` is the training entry
    point and is checked against finite differences in the test suite.
    """

    def __init__(self, S: int, D: int, n_states: int, hidden: int = 64, seed: int = 0,
                 temperature: float = 1.0):
        self.S, self.D, self.n_states, self.hidden = S, D, n_states, hidden
        self.temperature = temperature
        sizes = [D * n_states + N_TIME_FEATURES, hidden, hidden, hidden, D * S]
        self.net = TanhNet(sizes, LAYERS, seed)

    @property
    def params(self) -> dict:
        return self.net.params

    def copy(self) -> "MLPDenoiser":
        other = object.__new__(MLPDenoiser)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        return other

    def _inputs(self, xt, t):
        xt = np.atleast_2d(np.asarray(xt, dtype=np.int64))
        B = xt.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        return np.concatenate([one_hot(xt, self.n_states).reshape(B, -1), sinusoidal_features(t, N_TIME_FEATURES)], axis=1)

    def logits(self, xt, t):
        return self.net.forward(self._inputs(xt, t))[0].reshape(-1, self.D, self.S)

    def loss_and_grad(self, xt, t, x1, weights=None):
        """Mean over batch and dimensions of -w * log p(x1^d | x_t) and its gradient."""
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.int64))
        out, acts = self.net.forward(self._inputs(xt, t))
        logits = out.reshape(-1, self.D, self.S)
        B = logits.shape[0]
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
        logp = log_softmax(logits)
        target = one_hot(x1, self.S)
        nll = -(logp * target).sum(axis=-1)  # (B, D)
        loss = float((w[:, None] * nll).mean())
        dlogits = (np.exp(logp) - target) * (w[:, None, None] / (B * self.D))
        return loss, self.net.backward(acts, dlogits.reshape(B, -1))

    # -- serialisation --

    def config(self) -> dict:
        return {"S": self.S, "D": self.D, "n_states": self.n_states, "hidden": self.hidden,
                "temperature": self.temperature}

    def to_dict(self) -> dict:
        cfg = self.config()
        return {"kind": "mlp", "config": cfg, "config_hash": _config_hash(cfg), "layers": self.net.layers_dict()}

    @classmethod
    def from_dict(cls, obj: dict) -> "MLPDenoiser":
        cfg = obj["config"]
        model = cls(cfg["S"], cfg["D"], cfg["n_states"], cfg["hidden"], temperature=cfg.get("temperature", 1.0))
        model.net.load_layers(obj["layers"])
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MLPDenoiser":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- training -----------------------------------------------------------------


def _weights(t: np.ndarray, weighting: str) -> Optional[np.ndarray]:
    if weighting == "inverse_one_minus_t":
        return 1.0 / (1.0 - t)
    return None


def ce_loss(denoiser: Denoiser, flow: ConditionalFlow, x1, rng=None, eps: float = EPS,
            weighting: str = "none"):
    """Cross-entropy of the denoiser on freshly corrupted copies of ``x1``.

    Returns ``(loss, grads)``; ``grads`` is None for denoisers without parameters.
    """
    rng = as_rng(rng)
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.int64))
    t = rng.uniform(eps, 1.0 - eps, size=x1.shape[0])
    xt = sample_corrupted(flow, t, x1, rng)
    w = _weights(t, weighting)
    if isinstance(denoiser, MLPDenoiser):
        return denoiser.loss_and_grad(xt, t, x1, w)
    probs = denoiser.predict(xt, t)
    with np.errstate(divide="ignore"):
        nll = -np.log(np.take_along_axis(probs, x1[..., None], axis=-1)[..., 0])
    if w is not None:
        nll = nll * w[:, None]
    return float(nll.mean()), None


@dataclass
class TrainResult:
    model: MLPDenoiser
    losses: list = field(default_factory=list)


def train(mlp: MLPDenoiser, dist, flow: ConditionalFlow, cfg: TrainConfig) -> TrainResult:
    """Minimise the corrupted-data cross-entropy in place.

    With ``lr_decay`` the learning rate follows a cosine decay to 10% of its
    initial value. A non-finite loss raises :class:`TrainingDivergedError`.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(mlp.params, cfg.learning_rate, cfg.optimizer, cfg.momentum, cfg.steps, cfg.lr_decay)
    losses = []
    for step in range(cfg.steps):
        x1 = dist.sample(cfg.batch_size, rng)
        loss, grads = ce_loss(mlp, flow, x1, rng, cfg.eps, cfg.ce_weighting)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")
        if loss > cfg.divergence_threshold:
            raise TrainingDivergedError(f"loss {loss:.3g} exceeds {cfg.divergence_threshold:.3g} at step {step}")
        opt.step(grads)
        losses.append(loss)
    return TrainResult(mlp, losses)
