"""Conditional rate matrices that generate a conditional flow.

All array functions are vectorised: ``xt`` and ``x1`` are integer arrays that
broadcast against each other and the result has a trailing axis over the
destination state ``j``. Returned rate arrays hold off-diagonal entries only
(the entry at ``j == xt`` is zero); use :func:`with_diagonal` to fill it in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidDenoiserError, NotAvailableError, TimeDomainError
from .flows import ConditionalFlow, MaskingFlow, TabularFlow, UniformFlow

MASS_THRESHOLD = 1e-12


@dataclass(frozen=True)
class RatePlan:
    """R^eta = R* + eta * R^DB for a given flow.

    ``db_kind`` is ``"canonical"`` (the worked detailed-balance solution for
    masking/uniform flows, the upper-triangular construction for tabular ones)
    or ``None``.
    """

    flow: ConditionalFlow
    eta: float = 0.0
    db_kind: Optional[str] = "canonical"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if self.db_kind not in (None, "canonical"):
            raise ValueError(f"unknown db_kind {self.db_kind!r}")
        if self.eta > 0 and self.db_kind is None:
            raise NotAvailableError("eta > 0 needs a detailed-balance rate")

    def with_eta(self, eta: float) -> "RatePlan":
        return RatePlan(self.flow, eta, self.db_kind if eta > 0 or self.db_kind else None)


@dataclass(frozen=True)
class RateRow:
    """One row of a rate matrix; ``rates[from_tok]`` holds the (negative) diagonal."""

    from_tok: int
    rates: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(self.rates[self.from_tok])

    @property
    def off_diagonal(self) -> np.ndarray:
        out = self.rates.copy()
        out[self.from_tok] = 0.0
        return out

    def __getitem__(self, j):
        return self.rates[j]


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise TimeDomainError("rates are only defined for 0 < t < 1")
    return t


def _gather(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    idx = np.broadcast_to(idx, values.shape[:-1])
    return np.take_along_axis(values, idx[..., None], axis=-1)[..., 0]


def _zero_diagonal(rates: np.ndarray, xt: np.ndarray) -> np.ndarray:
    hit = np.broadcast_to(xt, rates.shape[:-1])[..., None] == np.arange(rates.shape[-1])
    return np.where(hit, 0.0, rates)


def with_diagonal(rates: np.ndarray, xt) -> np.ndarray:
    rates = _zero_diagonal(rates, np.asarray(xt))
    hit = np.broadcast_to(np.asarray(xt), rates.shape[:-1])[..., None] == np.arange(rates.shape[-1])
    return np.where(hit, -rates.sum(axis=-1, keepdims=True), rates)


def r_star(flow: ConditionalFlow, t, xt, x1) -> np.ndarray:
    """ReLU(dp(j) - dp(xt)) / (Z_t p(xt)), zero wherever either state has no mass."""
    xt, x1 = np.asarray(xt), np.asarray(x1)
    p = flow.probs(t, x1)
    dp = flow.probs_dt(t, x1)
    shape = np.broadcast_shapes(p.shape[:-1], xt.shape)
    p, dp = np.broadcast_to(p, shape + p.shape[-1:]), np.broadcast_to(dp, shape + dp.shape[-1:])
    alive = p > MASS_THRESHOLD
    n_alive = alive.sum(axis=-1)
    p_here = _gather(p, xt)
    dp_here = _gather(dp, xt)
    numer = np.maximum(dp - dp_here[..., None], 0.0)
    denom = (n_alive * p_here)[..., None]
    ok = alive & (p_here > MASS_THRESHOLD)[..., None]
    rates = np.where(ok, numer / np.where(ok, denom, 1.0), 0.0)
    return _zero_diagonal(rates, xt)


def r_db(flow: ConditionalFlow, t, xt, x1) -> np.ndarray:
    """Unit-strength detailed-balance rate for ``flow`` (caller scales by eta)."""
    xt, x1 = np.asarray(xt), np.asarray(x1)
    t = np.asarray(t, dtype=float)
    n = flow.n_states
    j = np.arange(n)
    shape = np.broadcast_shapes(xt.shape, x1.shape, t.shape)
    xt_b, x1_b = np.broadcast_to(xt, shape)[..., None], np.broadcast_to(x1, shape)[..., None]
    tb = np.broadcast_to(t, shape)[..., None]
    if isinstance(flow, MaskingFlow):
        m = flow.mask_token
        rates = (xt_b == x1_b) * (j == m) * 1.0 + (xt_b == m) * (j == x1_b) * (tb / (1.0 - tb))
    elif isinstance(flow, UniformFlow):
        S = flow.S
        rates = (xt_b == x1_b) * 1.0 + (j == x1_b) * ((S * tb + 1.0 - tb) / (1.0 - tb))
    elif isinstance(flow, TabularFlow):
        p = np.broadcast_to(flow.probs(t, x1), shape + (n,))
        p_here = _gather(p, xt)[..., None]
        alive = (p > MASS_THRESHOLD) & (p_here > MASS_THRESHOLD)
        upper = j > xt_b
        ratio = p / np.where(alive, p_here, 1.0)
        rates = np.where(alive, np.where(upper, 1.0, ratio), 0.0)
    else:
        raise NotAvailableError(f"no detailed-balance construction for {flow!r}")
    return _zero_diagonal(rates.astype(float), xt)


def conditional_rates(plan: RatePlan, t, xt, x1) -> np.ndarray:
    rates = r_star(plan.flow, t, xt, x1)
    if plan.eta > 0:
        rates = rates + plan.eta * r_db(plan.flow, t, xt, x1)
    return rates


def unconditional_rates(plan: RatePlan, x1_probs: np.ndarray, t, xt) -> np.ndarray:
    """E_{x1 ~ x1_probs}[R(xt, . | x1)] per dimension.

    ``x1_probs`` has shape ``xt.shape + (S,)``; a trailing MASK column is only
    tolerated if it carries no mass.
    """
    flow = plan.flow
    x1_probs = np.asarray(x1_probs, dtype=float)
    if x1_probs.shape[-1] == flow.S + 1 and flow.mask_token is not None:
        if np.any(x1_probs[..., flow.S] > 0):
            raise InvalidDenoiserError("denoiser assigns probability to MASK")
        x1_probs = x1_probs[..., : flow.S]
    if x1_probs.shape[-1] != flow.S:
        raise InvalidDenoiserError(f"expected {flow.S} clean-token probabilities, got {x1_probs.shape[-1]}")
    xt = np.asarray(xt)
    t = np.asarray(t, dtype=float)
    if type(flow) in (MaskingFlow, UniformFlow):
        return _closed_form_rates(plan, x1_probs, t, xt)
    t_b = t[..., None] if t.ndim else t
    cand = np.arange(flow.S)
    # (..., S_x1, n)
    per_x1 = conditional_rates(plan, t_b, xt[..., None], cand)
    return np.einsum("...k,...kj->...j", x1_probs, per_x1)


def unconditional_rates_by_enumeration(plan: RatePlan, x1_probs: np.ndarray, t, xt) -> np.ndarray:
    """Same as :func:`unconditional_rates` but always sums over every candidate x1."""
    xt, t = np.asarray(xt), np.asarray(t, dtype=float)
    t_b = t[..., None] if t.ndim else t
    per_x1 = conditional_rates(plan, t_b, xt[..., None], np.arange(plan.flow.S))
    return np.einsum("...k,...kj->...j", np.asarray(x1_probs, dtype=float), per_x1)


def _closed_form_rates(plan: RatePlan, x1_probs, t, xt):
    flow, eta = plan.flow, plan.eta
    shape = np.broadcast_shapes(xt.shape, x1_probs.shape[:-1], t.shape)
    xt = np.broadcast_to(xt, shape)
    t = np.broadcast_to(t, shape)[..., None]
    x1_probs = np.broadcast_to(x1_probs, shape + (flow.S,))
    here = np.take_along_axis(x1_probs, np.minimum(xt, flow.S - 1)[..., None], axis=-1)
    out = np.zeros(shape + (flow.n_states,))
    if isinstance(flow, MaskingFlow):
        masked = (xt == flow.mask_token)[..., None]
        out[..., : flow.S] = np.where(masked, (1.0 + eta * t) / (1.0 - t) * x1_probs, 0.0)
        out[..., flow.S] = np.where(masked[..., 0], 0.0, eta * here[..., 0])
    else:
        S = flow.S
        out[:] = (1.0 + eta * (S * t + 1.0 - t)) / (1.0 - t) * x1_probs + eta * here
    return _zero_diagonal(out, xt)


def rate_matrix(plan: RatePlan, t, x1) -> np.ndarray:
    """Full conditional rate matrix(es) with diagonal, shape ``x1.shape + (n, n)``."""
    x1 = np.asarray(x1)
    n = plan.flow.n_states
    states = np.arange(n)
    rates = conditional_rates(plan, t, states, x1[..., None])
    return with_diagonal(rates, states)


def star_matrix(flow: ConditionalFlow, t, x1) -> np.ndarray:
    states = np.arange(flow.n_states)
    return with_diagonal(r_star(flow, t, states, np.asarray(x1)[..., None]), states)


def db_matrix(flow: ConditionalFlow, t, x1) -> np.ndarray:
    states = np.arange(flow.n_states)
    return with_diagonal(r_db(flow, t, states, np.asarray(x1)[..., None]), states)


# -- row-level API --------------------------------------------------------------


def _row(rates: np.ndarray, xt_tok: int) -> RateRow:
    return RateRow(int(xt_tok), with_diagonal(rates, np.int64(xt_tok)))


def r_star_row(flow: ConditionalFlow, t: float, xt_tok: int, x1_tok: int) -> RateRow:
    _check_time(t)
    flow.alphabet.check(xt_tok)
    return _row(r_star(flow, float(t), np.int64(xt_tok), np.int64(x1_tok)), xt_tok)


def r_db_row(flow: ConditionalFlow, t: float, xt_tok: int, x1_tok: int) -> RateRow:
    _check_time(t)
    flow.alphabet.check(xt_tok)
    return _row(r_db(flow, float(t), np.int64(xt_tok), np.int64(x1_tok)), xt_tok)


def conditional_rate_row(plan: RatePlan, t: float, xt_tok: int, x1_tok: int) -> RateRow:
    _check_time(t)
    plan.flow.alphabet.check(xt_tok)
    return _row(conditional_rates(plan, float(t), np.int64(xt_tok), np.int64(x1_tok)), xt_tok)


def unconditional_rate_row(plan: RatePlan, denoiser, t: float, xt, dim: int) -> RateRow:
    """Row of the generative rate for dimension ``dim`` of the sequence ``xt``."""
    _check_time(t)
    xt = np.asarray(xt, dtype=np.int64)
    plan.flow.alphabet.check(xt)
    probs = denoiser.predict(xt[None], float(t))[0]  # (D, S)
    rates = unconditional_rates(plan, probs[dim], float(t), xt[dim])
    return _row(rates, xt[dim])


def db_residual(flow: ConditionalFlow, t: float, x1_tok: int,
                row_fn: Callable[[ConditionalFlow, float, int, int], RateRow]) -> float:
    """max_{i,j} |p(i) R(i,j) - p(j) R(j,i)| for the rows produced by ``row_fn``."""
    _check_time(t)
    n = flow.n_states
    R = np.stack([row_fn(flow, t, i, x1_tok).off_diagonal for i in range(n)])
    p = flow.probs(float(t), np.int64(x1_tok))
    flux = p[:, None] * R
    return float(np.max(np.abs(flux - flux.T)))


# -- continuous-time diffusion comparison -----------------------------------------


def diffusion_implied_rate_matrix(S: int, t: float, x1: int) -> np.ndarray:
    """Conditional rate implied by time-reversing uniform corruption.

    Corruption rate beta(t) (1 1^T - S I) with beta(t) = 1/(S t) reproduces the
    linear uniform flow; the reversed, x1-conditioned rate is
    R(i, j | x1) = R_corrupt(j, i) p(j | x1) / p(i | x1).
    """
    beta = 1.0 / (S * t)
    corrupt = beta * (np.ones((S, S)) - S * np.eye(S))
    p = UniformFlow(S).probs(t, np.int64(x1))
    R = corrupt.T * p[None, :] / p[:, None]
    np.fill_diagonal(R, 0.0)
    np.fill_diagonal(R, -R.sum(axis=1))
    return R


def uniform_db_general(S: int, t: float, x1: int, b: float, c: float) -> np.ndarray:
    """a [i=x1] + b [j=x1] + c [i!=x1][j!=x1] with a fixed by detailed balance."""
    a = (1.0 - t) / S * b / (t + (1.0 - t) / S)
    i = np.arange(S)[:, None]
    j = np.arange(S)[None, :]
    R = a * (i == x1) + b * (j == x1) + c * ((i != x1) & (j != x1))
    R = R.astype(float)
    np.fill_diagonal(R, 0.0)
    np.fill_diagonal(R, -R.sum(axis=1))
    return R
