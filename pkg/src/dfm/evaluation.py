"""Metrics against exact oracles: distances, entropies, jump statistics, bounds and consistency checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .denoisers import Denoiser
from .errors import NotAvailableError
from .flows import EPS, ConditionalFlow, MaskingFlow, TabularDistribution, sample_corrupted
from .rates import RatePlan, rate_matrix, unconditional_rates
from .sampler import TrajectoryBatch, step_probs
from .utils import as_rng, encode_rows

LOG2 = math.log(2.0)


# -- distances and entropies ------------------------------------------------------


def _as_table(x, S: int, D: int) -> np.ndarray:
    """Dense probability vector over all S**D sequences from a table, samples or a probability vector."""
    if isinstance(x, TabularDistribution):
        if (x.S, x.D) != (S, D):
            raise ValueError(f"distribution over S={x.S}, D={x.D} does not match S={S}, D={D}")
        return x.table().ravel()
    arr = np.asarray(x)
    if arr.ndim == 1 and arr.size == S**D and np.issubdtype(arr.dtype, np.floating):
        return arr
    if arr.ndim != 2 or arr.shape[1] != D:
        raise ValueError(f"samples must have shape (n, {D}), got {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no samples")
    if arr.min() < 0 or arr.max() >= S:
        raise ValueError(f"samples contain tokens outside 0..{S - 1}")
    counts = np.bincount(encode_rows(arr.astype(np.int64), S), minlength=S**D)
    return counts / len(arr)


def tv_distance(samples, reference, S: Optional[int] = None, D: Optional[int] = None) -> float:
    """Half the L1 distance between two distributions on the same sequence space.

    Either argument may be a :class:`TabularDistribution`, an ``(n, D)`` sample
    array or a dense probability vector of length ``S**D``. When neither is a
    table, ``S`` and ``D`` must be given.
    """
    for obj in (reference, samples):
        if isinstance(obj, TabularDistribution):
            if S is not None and S != obj.S or D is not None and D != obj.D:
                raise ValueError("state spaces differ")
            S, D = obj.S, obj.D
    if S is None or D is None:
        raise ValueError("S and D are needed when no table is given")
    p = _as_table(samples, S, D)
    q = _as_table(reference, S, D)
    return float(0.5 * np.abs(p - q).sum())


def sample_entropy(samples) -> float:
    """Entropy in bits of the pooled token frequencies; unseen tokens contribute nothing."""
    tokens = np.asarray(samples).ravel()
    if tokens.size == 0:
        raise ValueError("no samples")
    _, counts = np.unique(tokens, return_counts=True)
    p = counts / tokens.size
    return float(-(p * np.log2(p)).sum()) + 0.0


# -- jump statistics ----------------------------------------------------------------


@dataclass
class JumpStats:
    mean: float
    variance: float
    stderr: float
    n: int
    per_dim_mean: np.ndarray
    histogram: np.ndarray  # histogram[k] = number of trajectories with k jumps in total

    def to_dict(self) -> dict:
        return {"mean": self.mean, "variance": self.variance, "stderr": self.stderr, "n": self.n,
                "per_dim_mean": self.per_dim_mean.tolist(), "histogram": self.histogram.tolist()}


def jump_stats(trajectories) -> JumpStats:
    counts = trajectories.jump_counts if isinstance(trajectories, TrajectoryBatch) else np.asarray(trajectories)
    if counts.ndim != 2 or len(counts) == 0:
        raise ValueError("need a nonempty (n, D) array of jump counts")
    total = counts.sum(axis=1)
    n = len(total)
    var = float(total.var(ddof=1)) if n > 1 else 0.0
    return JumpStats(float(total.mean()), var, math.sqrt(var / n), n,
                     counts.mean(axis=0), np.bincount(total))


def expected_hamming_from_prior(dist: TabularDistribution, prior: np.ndarray) -> float:
    """E[d_H(x0, x1)] with x0 drawn i.i.d. per dimension from ``prior`` and x1 from ``dist``."""
    prior = np.asarray(prior, dtype=float)
    marg = dist.marginals()  # (D, S)
    return float(np.sum(1.0 - marg @ prior[: dist.S]))


def expected_hamming_uniform(dist: TabularDistribution) -> float:
    """For a uniform prior every dimension disagrees with probability (S-1)/S."""
    return expected_hamming_from_prior(dist, np.full(dist.S, 1.0 / dist.S))


# -- masking ELBO -----------------------------------------------------------------------


@dataclass
class BoundEstimate:
    bits_per_token: float
    stderr: float
    n: int


def masking_elbo(denoiser: Denoiser, data, flow: ConditionalFlow, mc_samples: int, rng=None,
                 eps: float = EPS) -> BoundEstimate:
    """Negated masking ELBO in bits per token.

    Each Monte-Carlo draw picks x1 from ``data`` (a table or an ``(n, D)`` test
    set), t ~ U[eps, 1 - eps] and x_t ~ p_{t|1}; its value is
    sum_d [x_t^d = M] (-log p(x1^d | x_t)) / (1 - t), divided by D.
    """
    if not isinstance(flow, MaskingFlow):
        raise NotAvailableError("the masking ELBO needs a masking flow")
    if mc_samples < 2:
        raise ValueError("mc_samples must be at least 2")
    rng = as_rng(rng)
    if isinstance(data, TabularDistribution):
        x1 = data.sample(mc_samples, rng)
    else:
        pool = np.asarray(data, dtype=np.int64)
        x1 = pool[rng.integers(0, len(pool), size=mc_samples)]
    D = x1.shape[1]
    t = rng.uniform(eps, 1.0 - eps, size=mc_samples)
    xt = sample_corrupted(flow, t, x1, rng)
    probs = denoiser.predict(xt, t)[..., : flow.S]
    p_true = np.take_along_axis(probs, x1[..., None], axis=-1)[..., 0]
    masked = xt == flow.mask_token
    nll = -np.log(np.where(masked, np.maximum(p_true, 1e-300), 1.0))
    per_draw = (masked * nll).sum(axis=1) / (1.0 - t) / D / LOG2
    return BoundEstimate(float(per_draw.mean()), float(per_draw.std(ddof=1) / math.sqrt(mc_samples)), mc_samples)


def expected_conditional_entropy(dist: TabularDistribution, flow: ConditionalFlow, t: float) -> float:
    """E_{x_t}[sum_d H(x1^d | x_t)] in nats, by enumerating every x_t with positive mass."""
    from .denoisers import exact_posterior  # local to keep the import graph flat

    D, n = dist.D, flow.n_states
    states = np.array(np.unravel_index(np.arange(n**D), (n,) * D)).T
    # p(x_t) = sum_x1 p(x1) prod_d p_{t|1}(x_t^d | x1^d)
    cond = flow.probs(float(t), dist.tokens)  # (K, D, n)
    lik = np.prod(cond[:, np.arange(D)[None, :], states], axis=-1)  # (K, n**D)
    p_xt = dist.probs @ lik
    keep = p_xt > 1e-15
    post = exact_posterior(dist, flow, float(t), states[keep])[..., : dist.S]
    h = -(post * np.log(np.where(post > 0, post, 1.0))).sum(axis=(-1, -2))
    return float(np.dot(p_xt[keep], h))


# -- diffusion equivalence -------------------------------------------------------------


def d3pm_reverse_kernel(T: int, t_index: int, x0_probs: np.ndarray) -> np.ndarray:
    """Absorbing-state reverse kernel p(x_{t-1} | x_t) with beta_k = 1 / (T - k + 1).

    Rows and columns run over ``S`` clean tokens followed by the absorbing
    state. Built from the cumulative products of (1 - beta_k) directly.
    """
    S = len(x0_probs)
    k = np.arange(1, T + 1)
    beta = 1.0 / (T - k + 1.0)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    a_prev, a_now = alpha_bar[t_index - 1], alpha_bar[t_index]
    K = np.zeros((S + 1, S + 1))
    K[np.arange(S), np.arange(S)] = 1.0
    K[S, :S] = (a_prev - a_now) / (1.0 - a_now) * np.asarray(x0_probs, dtype=float)
    K[S, S] = (1.0 - a_prev) / (1.0 - a_now)
    return K


def dfm_masking_kernel(T: int, t_index: int, x1_probs: np.ndarray) -> np.ndarray:
    """One Euler step of the eta = 0 masking CTMC from flow time 1 - t_index/T with dt = 1/T."""
    S = len(x1_probs)
    plan = RatePlan(MaskingFlow(S), 0.0)
    s = 1.0 - t_index / T
    states = np.arange(S + 1)
    rates = unconditional_rates(plan, np.broadcast_to(np.asarray(x1_probs, float), (S + 1, S)), s, states)
    return step_probs(rates, states, 1.0 / T)


def d3pm_equivalence_check(T: int, t_index: int, probs=None, S: int = 4, seed: int = 0) -> float:
    """Max-abs difference between the two kernels for a shared denoiser table."""
    if not 1 <= t_index <= T:
        raise ValueError(f"need 1 <= t_index <= T, got t_index={t_index}, T={T}")
    if probs is None:
        probs = np.random.default_rng(seed).dirichlet(np.ones(S))
    return float(np.max(np.abs(d3pm_reverse_kernel(T, t_index, probs) - dfm_masking_kernel(T, t_index, probs))))


# -- Kolmogorov forward equation -------------------------------------------------------


def kolmogorov_residual(plan: RatePlan, x1_tok: int, t_grid: Sequence[float], perturb=None) -> float:
    """max over the grid of |d/dt p_{t|1} - R_t^T p_{t|1}| for a single dimension.

    ``perturb = (i, j, delta)`` adds ``delta`` to entry (i, j) of every rate
    matrix, which is useful to confirm the check can fail.
    """
    flow = plan.flow
    worst = 0.0
    for t in t_grid:
        R = rate_matrix(plan, float(t), np.int64(x1_tok))
        if perturb is not None:
            i, j, delta = perturb
            R = R.copy()
            R[i, j] += delta
        p = flow.probs(float(t), np.int64(x1_tok))
        dp = flow.probs_dt(float(t), np.int64(x1_tok))
        worst = max(worst, float(np.max(np.abs(dp - R.T @ p))))
    return worst


def integrate_kolmogorov(plans: Sequence[RatePlan], t0: float = 0.05, t1: float = 0.95, h: float = 1e-4):
    """RK4 integration of dp/dt = R_t^T p from p_{t0|1}, for every x1 and every plan at once.

    All plans must share one flow. Returns ``(times, p)`` where ``p`` has shape
    ``(len(times), len(plans), S, n)``: the state-``n`` distribution for each
    plan and clean token, recorded at every step.
    """
    flow = plans[0].flow
    if any(p.flow is not flow for p in plans):
        raise ValueError("plans must share a flow")
    x1 = np.arange(flow.S)
    n_steps = int(round((t1 - t0) / h))
    times = t0 + h * np.arange(n_steps + 1)

    # Every rate the integrator needs lives on the half-step grid; build it in one vectorised call.
    half = t0 + (h / 2) * np.arange(2 * n_steps + 1)
    R = np.stack([rate_matrix(pl, half[:, None, None], x1) for pl in plans], axis=1)  # (M, P, S, n, n)

    def deriv(k2, p):
        return np.einsum("qki,qkij->qkj", p, R[k2])

    p = np.broadcast_to(flow.probs(t0, x1), (len(plans), flow.S, flow.n_states)).copy()
    out = np.empty((n_steps + 1,) + p.shape)
    out[0] = p
    for k in range(n_steps):
        k1 = deriv(2 * k, p)
        k2 = deriv(2 * k + 1, p + h / 2 * k1)
        k3 = deriv(2 * k + 1, p + h / 2 * k2)
        k4 = deriv(2 * k + 2, p + h * k3)
        p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = p
    return times, out


def kolmogorov_generation_error(plans: Sequence[RatePlan], t0: float = 0.05, t1: float = 0.95,
                                h: float = 1e-4) -> float:
    """Pointwise max error of the integrated flow against the closed-form p_{t|1}."""
    times, p = integrate_kolmogorov(plans, t0, t1, h)
    flow = plans[0].flow
    exact = flow.probs(times[:, None], np.arange(flow.S)[None, :])  # (T, S, n)
    return float(np.max(np.abs(p - exact[:, None])))


# -- reports ------------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Named metrics with standard errors plus the metadata needed to reproduce them."""

    seed: int
    config_hash: str
    metrics: dict = field(default_factory=dict)  # name -> {"value", "stderr", "n"}
    meta: dict = field(default_factory=dict)

    def add(self, name: str, value: float, stderr: Optional[float] = None, n: Optional[int] = None) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"metric {name!r} is not finite: {value}")
        self.metrics[name] = {"value": value, "stderr": None if stderr is None else float(stderr),
                              "n": None if n is None else int(n)}

    def value(self, name: str) -> float:
        return self.metrics[name]["value"]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "meta": self.meta, "metrics": self.metrics}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "value", "stderr", "n"])
            for name, m in self.metrics.items():
                w.writerow([name, repr(m["value"]), "" if m["stderr"] is None else repr(m["stderr"]),
                            "" if m["n"] is None else m["n"]])

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        obj = json.loads(Path(path).read_text())
        return cls(obj["seed"], obj["config_hash"], obj["metrics"], obj.get("meta", {}))

