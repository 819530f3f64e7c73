"""Joint generation of real-valued coordinates and masked tokens under two independent clocks.

Coordinates follow the linear interpolant x_t = t x_1 + (1 - t) x_0 with
x_0 ~ N(0, I) and move with velocity (x̂_1 - x_t) / (1 - t). Tokens follow the
masking flow at their own time t̃ and move with the CTMC sampler.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IncompatibleConfigError, ModeError, TrainingDivergedError
from .flows import EPS, MaskingFlow, sample_corrupted
from .network import Optimizer, TanhNet
from .rates import RatePlan, unconditional_rates
from .sampler import _FROM_PROBS
from .utils import as_rng, log_softmax, one_hot, sinusoidal_features

MODES = ("cogenerate", "fix-coords", "fix-tokens")
N_TIME_FEATURES = 8


@dataclass
class JointState:
    coords: np.ndarray  # (B, Dc)
    tokens: np.ndarray  # (B, Da)
    t: np.ndarray  # (B,)
    t_tilde: np.ndarray  # (B,)

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        B = self.coords.shape[0]
        self.t = np.broadcast_to(np.asarray(self.t, dtype=float), (B,)).copy()
        self.t_tilde = np.broadcast_to(np.asarray(self.t_tilde, dtype=float), (B,)).copy()
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")


# -- data -------------------------------------------------------------------------


@dataclass
class JointDataset:
    coords: np.ndarray
    tokens: np.ndarray
    S: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        if len(self.coords) != len(self.tokens):
            raise ValueError("coords and tokens must have the same number of rows")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.S):
            raise ValueError("tokens out of range")

    def __len__(self):
        return len(self.coords)

    def sample(self, n: int, rng=None):
        idx = as_rng(rng).integers(0, len(self), size=n)
        return self.coords[idx], self.tokens[idx]

    def to_dict(self) -> dict:
        out = {"coords": self.coords.tolist(), "tokens": self.tokens.tolist(), "S": int(self.S)}
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "JointDataset":
        return cls(obj["coords"], obj["tokens"], int(obj["S"]), obj.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "JointDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def standardize(coords: np.ndarray):
    """Zero-mean, unit-variance per coordinate; returns (z, mean, std)."""
    coords = np.asarray(coords, dtype=float)
    mean = coords.mean(axis=0)
    std = coords.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (coords - mean) / std, mean, std


# -- corruption ---------------------------------------------------------------------


def joint_corrupt(flow: MaskingFlow, x1, a1, t, t_tilde, rng=None) -> JointState:
    """Coordinates by the Gaussian linear interpolant at ``t``; tokens by ``flow`` at ``t_tilde``."""
    rng = as_rng(rng)
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    a1 = np.atleast_2d(np.asarray(a1, dtype=np.int64))
    B = x1.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    tt = np.broadcast_to(np.asarray(t_tilde, dtype=float), (B,))
    x0 = rng.standard_normal(x1.shape)
    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    return JointState(xt, sample_corrupted(flow, tt, a1, rng), t, tt)


def sample_times(B: int, rng, eps: float = EPS):
    """10% coordinates clean (t = 1), 10% tokens clean (t̃ = 1), otherwise both uniform."""
    u = rng.random(B)
    t = rng.uniform(eps, 1.0 - eps, size=B)
    tt = rng.uniform(eps, 1.0 - eps, size=B)
    t = np.where(u < 0.1, 1.0, t)
    tt = np.where((u >= 0.1) & (u < 0.2), 1.0, tt)
    return t, tt


# -- denoisers ------------------------------------------------------------------------


class JointDenoiser:
    S: int
    temperature: float = 1.0

    def predict(self, state: JointState, temperature: Optional[float] = None):
        """(x̂_1 of shape (B, Dc), token probabilities of shape (B, Da, S))."""
        raise NotImplementedError


class MixtureHeads(JointDenoiser):
    """Exact posterior heads for a labelled Gaussian mixture.

    Component k has coordinates N(means[k], sigma^2 I), deterministic tokens
    ``labels[k]`` and weight ``weights[k]``. ``sigma = 0`` gives point masses.
    """

    def __init__(self, means, labels, weights, sigma: float, S: int, temperature: float = 1.0):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.labels = np.asarray(labels, dtype=np.int64).reshape(len(self.means), -1)
        self.weights = np.asarray(weights, dtype=float)
        self.sigma = float(sigma)
        self.S = S
        self.temperature = temperature
        self.flow = MaskingFlow(S)

    def component_posterior(self, state: JointState) -> np.ndarray:
        t = state.t[:, None]
        tm = t[..., None] * self.means[None]  # (B, K, Dc)
        var = (t**2 * self.sigma**2 + (1.0 - t) ** 2)[..., None]  # (B, 1, 1)
        diff = state.coords[:, None, :] - tm
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.where(var > 1e-24, -0.5 * diff**2 / var - 0.5 * np.log(2 * np.pi * np.maximum(var, 1e-300)),
                          np.where(np.abs(diff) < 1e-6, 0.0, -np.inf)).sum(axis=-1)
        tok = self.flow.probs(state.t_tilde[:, None, None], self.labels[None])  # (B, K, Da, n)
        tok = np.take_along_axis(tok, state.tokens[:, None, :, None], axis=-1)[..., 0]
        with np.errstate(divide="ignore"):
            ll = ll + np.log(tok).sum(axis=-1) + np.log(self.weights)[None]
        m = ll.max(axis=1, keepdims=True)
        if np.any(~np.isfinite(m)):
            raise ModeError("joint state has zero probability under every mixture component")
        w = np.exp(ll - m)
        return w / w.sum(axis=1, keepdims=True)

    def predict(self, state: JointState, temperature=None):
        post = self.component_posterior(state)
        t = state.t[:, None, None]
        var = t**2 * self.sigma**2 + (1.0 - t) ** 2
        gain = np.where(var > 1e-24, t * self.sigma**2 / np.maximum(var, 1e-300), 0.0)
        comp = self.means[None] + gain * (state.coords[:, None, :] - t * self.means[None])
        x_hat = np.einsum("bk,bkc->bc", post, comp)
        probs = np.einsum("bk,kds->bds", post, one_hot(self.labels, self.S))
        temp = self.temperature if temperature is None else temperature
        if temp != 1.0:
            with np.errstate(divide="ignore"):
                probs = np.exp(log_softmax(np.log(probs) / temp))
        return x_hat, probs


JOINT_LAYERS = ("embed", "hidden1", "hidden2", "head")


class JointMLP(JointDenoiser):
    """Shared tanh trunk on coords ⊕ one-hot tokens ⊕ features of (t, t̃); linear coordinate and token heads."""

    def __init__(self, Dc: int, Da: int, S: int, hidden: int = 64, seed: int = 0, temperature: float = 1.0):
        self.Dc, self.Da, self.S, self.hidden = Dc, Da, S, hidden
        self.temperature = temperature
        n_in = Dc + Da * (S + 1) + 2 * N_TIME_FEATURES
        self.net = TanhNet([n_in, hidden, hidden, hidden, Dc + Da * S], JOINT_LAYERS, seed)

    @property
    def params(self):
        return self.net.params

    def _inputs(self, state: JointState):
        B = state.coords.shape[0]
        return np.concatenate([
            state.coords,
            one_hot(state.tokens, self.S + 1).reshape(B, -1),
            sinusoidal_features(state.t, N_TIME_FEATURES),
            sinusoidal_features(state.t_tilde, N_TIME_FEATURES),
        ], axis=1)

    def _split(self, out):
        return out[:, : self.Dc], out[:, self.Dc:].reshape(-1, self.Da, self.S)

    def predict(self, state, temperature=None):
        x_hat, logits = self._split(self.net.forward(self._inputs(state))[0])
        temp = self.temperature if temperature is None else temperature
        return x_hat, np.exp(log_softmax(logits / temp))

    def loss_and_grad(self, state: JointState, x1, a1):
        x1 = np.atleast_2d(np.asarray(x1, dtype=float))
        a1 = np.atleast_2d(np.asarray(a1, dtype=np.int64))
        out, acts = self.net.forward(self._inputs(state))
        x_hat, logits = self._split(out)
        coord_loss, dx = _coord_term(x_hat, x1, state.t)
        logp = log_softmax(logits)
        target = one_hot(a1, self.S)
        B = x1.shape[0]
        token_loss = float(-(logp * target).sum() / (B * self.Da))
        dlogits = (np.exp(logp) - target) / (B * self.Da)
        grads = self.net.backward(acts, np.concatenate([dx, dlogits.reshape(B, -1)], axis=1))
        return coord_loss + token_loss, grads

    def to_dict(self) -> dict:
        cfg = {"Dc": self.Dc, "Da": self.Da, "S": self.S, "hidden": self.hidden, "temperature": self.temperature}
        digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
        return {"kind": "joint-mlp", "config": cfg, "config_hash": digest, "layers": self.net.layers_dict()}

    @classmethod
    def from_dict(cls, obj) -> "JointMLP":
        c = obj["config"]
        model = cls(c["Dc"], c["Da"], c["S"], c["hidden"], temperature=c.get("temperature", 1.0))
        model.net.load_layers(obj["layers"])
        return model


def _coord_term(x_hat, x1, t):
    """Mean over batch and coordinates of |x̂ - x1|^2 / (1 - t); rows with t = 1 contribute nothing."""
    B, Dc = x1.shape
    live = t < 1.0
    w = np.where(live, 1.0 / np.where(live, 1.0 - t, 1.0), 0.0)[:, None]
    diff = x_hat - x1
    loss = float((w * diff**2).sum() / (B * Dc))
    return loss, 2.0 * w * diff / (B * Dc)


def joint_loss(denoiser: JointDenoiser, flow: MaskingFlow, x1, a1, rng=None, eps: float = EPS):
    """Corrupt a clean batch with the 10/10/80 time schedule and score the denoiser.

    Returns ``(loss, grads)`` where ``grads`` is None for parameter-free heads.
    """
    rng = as_rng(rng)
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    t, tt = sample_times(x1.shape[0], rng, eps)
    state = joint_corrupt(flow, x1, a1, t, tt, rng)
    if isinstance(denoiser, JointMLP):
        return denoiser.loss_and_grad(state, x1, a1)
    x_hat, probs = denoiser.predict(state)
    coord, _ = _coord_term(x_hat, x1, t)
    a1 = np.atleast_2d(np.asarray(a1, dtype=np.int64))
    with np.errstate(divide="ignore"):
        tok = -np.log(np.take_along_axis(probs, a1[..., None], axis=-1)[..., 0]).mean()
    return coord + float(tok), None


joint_train_step = joint_loss


@dataclass
class JointTrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 128
    steps: int = 2000
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    eps: float = EPS
    lr_decay: bool = True
    divergence_threshold: float = 1e6


def train_joint(model: JointMLP, data: JointDataset, cfg: JointTrainConfig):
    rng = np.random.default_rng(cfg.seed)
    flow = MaskingFlow(model.S)
    opt = Optimizer(model.params, cfg.learning_rate, cfg.optimizer, cfg.momentum, cfg.steps, cfg.lr_decay)
    losses = []
    for step in range(cfg.steps):
        x1, a1 = data.sample(cfg.batch_size, rng)
        loss, grads = joint_loss(model, flow, x1, a1, rng, cfg.eps)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            raise TrainingDivergedError(f"joint loss {loss:.3g} diverged at step {step}")
        opt.step(grads)
        losses.append(loss)
    return model, losses


# -- generation -------------------------------------------------------------------------


def joint_velocity_and_rate(denoiser: JointDenoiser, state: JointState, plan: Optional[RatePlan] = None,
                            move_coords: bool = True, move_tokens: bool = True, temperature=None):
    """Coordinate velocity (B, Dc) and token rates (B, Da, S + 1) at ``state``."""
    if move_coords and np.any(state.t >= 1.0):
        raise ModeError("coordinates are held at t = 1 and cannot move")
    if move_tokens and np.any(state.t_tilde >= 1.0):
        raise ModeError("tokens are held at t̃ = 1 and cannot move")
    plan = plan or RatePlan(MaskingFlow(denoiser.S))
    x_hat, probs = denoiser.predict(state, temperature)
    vel = (x_hat - state.coords) / (1.0 - state.t[:, None]) if move_coords else np.zeros_like(state.coords)
    if move_tokens:
        rates = unconditional_rates(plan, probs, state.t_tilde[:, None], state.tokens)
    else:
        rates = np.zeros(state.tokens.shape + (plan.flow.n_states,))
    return vel, rates


@dataclass
class JointSamplerConfig:
    dt: float = 1e-3
    eta: float = 0.0
    scheme: str = "masking-fast"
    temperature: float = 1.0
    eps: float = EPS
    t_start: Optional[float] = None  # defaults to eps
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.dt < 1.0:
            raise ValueError("dt must lie in (0, 1)")
        if self.scheme not in _FROM_PROBS:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class JointSample:
    coords: np.ndarray
    tokens: np.ndarray
    snapshots: dict = field(default_factory=dict)


def joint_generate(denoiser: JointDenoiser, mode: str, n: int, Dc: int, Da: int, cfg: JointSamplerConfig,
                   coords=None, tokens=None, snapshots=()) -> JointSample:
    """Generate ``n`` joint samples.

    ``cogenerate`` runs both clocks from the prior; ``fix-coords`` holds the
    given coordinates at t = 1 and generates tokens; ``fix-tokens`` holds the
    given tokens at t̃ = 1 and generates coordinates. ``snapshots`` records
    coordinates at the requested times.
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "fix-coords" and coords is None:
        raise ModeError("fix-coords needs conditioning coordinates")
    if mode == "fix-tokens" and tokens is None:
        raise ModeError("fix-tokens needs conditioning tokens")
    if mode == "fix-tokens" and cfg.scheme == "purity":
        raise IncompatibleConfigError("purity ranking only applies while tokens are generated")
    rng = np.random.default_rng(cfg.seed)
    flow = MaskingFlow(denoiser.S)
    plan = RatePlan(flow, cfg.eta)
    t0 = cfg.eps if cfg.t_start is None else cfg.t_start
    move_x, move_a = mode != "fix-coords", mode != "fix-tokens"
    x = (np.broadcast_to(np.asarray(coords, dtype=float), (n, Dc)).copy() if not move_x
         else rng.standard_normal((n, Dc)))
    a = (np.broadcast_to(np.asarray(tokens, dtype=np.int64), (n, Da)).copy() if not move_a
         else np.full((n, Da), flow.mask_token, dtype=np.int64))
    starts, ends = _grid_from(t0, cfg.dt, cfg.eps)
    snaps, pending = {}, sorted(snapshots)
    for k, (t, t_next) in enumerate(zip(starts, ends)):
        while pending and t >= pending[0] - 1e-9:
            snaps[pending.pop(0)] = x.copy()
        h = t_next - t
        state = JointState(x, a, t if move_x else 1.0, t if move_a else 1.0)
        x_hat, probs = denoiser.predict(state, cfg.temperature)
        if move_x:
            x = x + h * (x_hat - x) / (1.0 - t)
        if move_a:
            step_plan = plan.with_eta(0.0) if k == len(starts) - 1 else plan
            a = _FROM_PROBS[cfg.scheme](step_plan, probs, t, a, h, rng)
    for s in pending:
        snaps[s] = x.copy()
    if move_a and np.any(a == flow.mask_token):
        state = JointState(x, a, 1.0 if not move_x else starts[-1], starts[-1])
        fill = denoiser.predict(state, cfg.temperature)[1].argmax(axis=-1)
        a = np.where(a == flow.mask_token, fill, a)
    return JointSample(x, a, snaps)


def _grid_from(t0: float, dt: float, eps: float):
    """Start times t0, t0 + dt, ... <= 1 - eps; the last step ends at 1."""
    n = int(np.floor((1.0 - eps - t0) / dt + 1e-9)) + 1
    starts = t0 + dt * np.arange(n)
    return starts, np.append(starts[1:], 1.0)


def simulate_conditional_coords(x1, x0, times) -> dict:
    """Euler-integrate the x_1-conditional velocity from x_0 at t = 0; returns {t: x_t}."""
    x1 = np.asarray(x1, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    out = {}
    grid = np.asarray(times, dtype=float)
    for t, t_next in zip(grid[:-1], grid[1:]):
        x = x + (t_next - t) * (x1 - x) / (1.0 - t)
        out[float(t_next)] = x.copy()
    return out


__all__ = [
    "MODES", "JointState", "JointDataset", "standardize", "joint_corrupt", "sample_times", "JointDenoiser",
    "MixtureHeads", "JointMLP", "joint_loss", "joint_train_step", "JointTrainConfig", "train_joint",
    "joint_velocity_and_rate", "JointSamplerConfig", "JointSample", "joint_generate",
    "simulate_conditional_coords",
]
