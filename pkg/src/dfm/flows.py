"""Per-dimension conditional probability flows p(x_t | x_1), noise priors and data tables.

Tokens are integer codes. Data tokens occupy ``0..S-1``; when an alphabet has a
mask symbol its code is ``S``. Arrays of sequences have shape ``(..., D)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import (
    CapacityError,
    InvalidAlphabetError,
    InvalidScheduleError,
    NotAvailableError,
)
from .utils import as_rng, categorical, decode_rows, encode_rows

EPS = 1e-3
ENUMERATION_LIMIT = 10**7
FD_STEP = 1e-6


@dataclass(frozen=True)
class Alphabet:
    size: int
    mask: bool = False

    def __post_init__(self):
        if self.size < 2:
            raise InvalidAlphabetError(f"need at least 2 data states, got {self.size}")

    @property
    def n_states(self) -> int:
        return self.size + 1 if self.mask else self.size

    @property
    def mask_token(self) -> Optional[int]:
        return self.size if self.mask else None

    def check(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.n_states):
            raise InvalidAlphabetError(
                f"token out of range for alphabet S={self.size} mask={self.mask}"
            )
        return tokens


def clamp_time(t, eps: float = EPS):
    return np.clip(t, eps, 1.0 - eps)


class ConditionalFlow:
    """Base class. Subclasses implement :meth:`probs` and :meth:`probs_dt`.

    Both return arrays of shape ``x1.shape + (n_states,)`` giving
    ``p(x_t = j | x_1)`` and its time derivative for every destination ``j``.
    ``t`` is a scalar or an array broadcastable against ``x1``.
    """

    kind = "base"

    def __init__(self, alphabet: Alphabet):
        self.alphabet = alphabet

    @property
    def S(self) -> int:
        return self.alphabet.size

    @property
    def n_states(self) -> int:
        return self.alphabet.n_states

    @property
    def mask_token(self) -> Optional[int]:
        return self.alphabet.mask_token

    def probs(self, t, x1) -> np.ndarray:
        raise NotImplementedError

    def probs_dt(self, t, x1) -> np.ndarray:
        raise NotImplementedError

    def prior_probs(self) -> np.ndarray:
        raise NotImplementedError

    def _check_x1(self, x1) -> np.ndarray:
        x1 = np.asarray(x1)
        if x1.size and (x1.min() < 0 or x1.max() >= self.S):
            raise InvalidAlphabetError("clean data tokens must lie in 0..S-1")
        return x1

    def __repr__(self):
        return f"{type(self).__name__}(S={self.S})"


class MaskingFlow(ConditionalFlow):
    """p(x_t | x_1) = t * [x_t = x_1] + (1 - t) * [x_t = MASK]."""

    kind = "masking"

    def __init__(self, S: int):
        super().__init__(Alphabet(S, mask=True))

    def probs(self, t, x1):
        x1 = self._check_x1(x1)
        t = np.asarray(t, dtype=float)[..., None]
        out = np.zeros(np.broadcast_shapes(x1.shape, t.shape[:-1]) + (self.n_states,))
        out += t * (x1[..., None] == np.arange(self.n_states))
        out[..., self.S] += (1.0 - t[..., 0])
        return out

    def probs_dt(self, t, x1):
        x1 = self._check_x1(x1)
        shape = np.broadcast_shapes(x1.shape, np.shape(t))
        out = (np.broadcast_to(x1, shape)[..., None] == np.arange(self.n_states)).astype(float)
        out[..., self.S] -= 1.0
        return out

    def prior_probs(self):
        p = np.zeros(self.n_states)
        p[self.S] = 1.0
        return p


class UniformFlow(ConditionalFlow):
    """p(x_t | x_1) = t * [x_t = x_1] + (1 - t) / S."""

    kind = "uniform"

    def __init__(self, S: int):
        super().__init__(Alphabet(S, mask=False))

    def probs(self, t, x1):
        x1 = self._check_x1(x1)
        t = np.asarray(t, dtype=float)[..., None]
        return t * (x1[..., None] == np.arange(self.S)) + (1.0 - t) / self.S

    def probs_dt(self, t, x1):
        x1 = self._check_x1(x1)
        shape = np.broadcast_shapes(x1.shape, np.shape(t))
        return (np.broadcast_to(x1, shape)[..., None] == np.arange(self.S)) - 1.0 / self.S

    def prior_probs(self):
        return np.full(self.S, 1.0 / self.S)


class TabularFlow(ConditionalFlow):
    """A user-supplied schedule ``schedule(t, x1_token) -> probability vector``.

    Without ``schedule_dt`` the time derivative is a central finite difference
    with step ``FD_STEP`` (one-sided within ``FD_STEP`` of the endpoints).
    """

    kind = "tabular"

    def __init__(
        self,
        alphabet: Alphabet,
        schedule: Callable[[float, int], np.ndarray],
        schedule_dt: Optional[Callable[[float, int], np.ndarray]] = None,
        name: str = "tabular",
    ):
        super().__init__(alphabet)
        self.schedule = schedule
        self.schedule_dt = schedule_dt
        self.name = name
        self._validate()

    def _validate(self):
        n = self.n_states
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            for k in range(self.S):
                p = np.asarray(self.schedule(t, k), dtype=float)
                if p.shape != (n,):
                    raise InvalidScheduleError(
                        f"schedule must return {n} probabilities, got shape {p.shape}"
                    )
                if p.min() < 0 or abs(p.sum() - 1.0) > 1e-12:
                    raise InvalidScheduleError(f"schedule at t={t}, x1={k} is not a distribution")
        prior = np.asarray(self.schedule(0.0, 0), dtype=float)
        for k in range(1, self.S):
            if np.max(np.abs(np.asarray(self.schedule(0.0, k)) - prior)) > 1e-9:
                raise InvalidScheduleError("t=0 marginal depends on x1; no usable noise prior")

    def _vector(self, t: float, k: int) -> np.ndarray:
        return np.asarray(self.schedule(float(t), int(k)), dtype=float)

    def _vector_dt(self, t: float, k: int) -> np.ndarray:
        if self.schedule_dt is not None:
            return np.asarray(self.schedule_dt(float(t), int(k)), dtype=float)
        lo, hi = max(t - FD_STEP, 0.0), min(t + FD_STEP, 1.0)
        return (self._vector(hi, k) - self._vector(lo, k)) / (hi - lo)

    def _evaluate(self, fn, t, x1):
        x1 = self._check_x1(x1)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            table = np.stack([fn(float(t), k) for k in range(self.S)])
            return table[x1]
        tb, xb = np.broadcast_arrays(t, x1)
        out = np.empty(tb.shape + (self.n_states,))
        for idx in np.ndindex(tb.shape):
            out[idx] = fn(tb[idx], xb[idx])
        return out

    def probs(self, t, x1):
        return self._evaluate(self._vector, t, x1)

    def probs_dt(self, t, x1):
        return self._evaluate(self._vector_dt, t, x1)

    def prior_probs(self):
        return self._vector(0.0, 0)

    @classmethod
    def clone(cls, flow: ConditionalFlow, analytic_dt: bool = False) -> "TabularFlow":
        """Wrap an existing flow's schedule as a tabular one (used as a cross-check)."""
        dt = (lambda t, k: flow.probs_dt(t, np.int64(k))) if analytic_dt else None
        return cls(flow.alphabet, lambda t, k: flow.probs(t, np.int64(k)), dt, name=f"tabular[{flow.kind}]")


def make_flow(kind: str, S: int) -> ConditionalFlow:
    if kind == "masking":
        return MaskingFlow(S)
    if kind == "uniform":
        return UniformFlow(S)
    raise InvalidScheduleError(f"unknown flow kind {kind!r}")


# -- token-level helpers ------------------------------------------------------


def cond_prob(flow: ConditionalFlow, t: float, x1_tok: int, xt_tok: int) -> float:
    flow.alphabet.check(xt_tok)
    return float(flow.probs(t, np.int64(x1_tok))[int(xt_tok)])


def cond_prob_dt(flow: ConditionalFlow, t: float, x1_tok: int, xt_tok: int) -> float:
    flow.alphabet.check(xt_tok)
    return float(flow.probs_dt(t, np.int64(x1_tok))[int(xt_tok)])


def sample_corrupted(flow: ConditionalFlow, t, x1, rng=None) -> np.ndarray:
    """Draw x_t ~ p(. | x_1) independently per dimension.

    ``t`` is a scalar or has shape ``x1.shape[:-1]`` (one time per sequence).
    """
    rng = as_rng(rng)
    x1 = flow._check_x1(x1)
    t = np.asarray(t, dtype=float)
    if t.ndim:
        t = t[..., None]
    if isinstance(flow, MaskingFlow):
        keep = rng.random(x1.shape) < t
        return np.where(keep, x1, flow.mask_token)
    if isinstance(flow, UniformFlow):
        keep = rng.random(x1.shape) < t
        return np.where(keep, x1, rng.integers(0, flow.S, size=x1.shape))
    return categorical(rng, flow.probs(t, x1))


def sample_prior(flow: ConditionalFlow, shape, rng=None) -> np.ndarray:
    rng = as_rng(rng)
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    if isinstance(flow, MaskingFlow):
        return np.full(shape, flow.mask_token, dtype=np.int64)
    if isinstance(flow, UniformFlow):
        return rng.integers(0, flow.S, size=shape)
    prior = flow.prior_probs()
    return categorical(rng, np.broadcast_to(prior, shape + prior.shape))


# -- data distributions -------------------------------------------------------


@dataclass
class TabularDistribution:
    """Explicit p_data over sequences of length D: ``tokens[k]`` has mass ``probs[k]``."""

    S: int
    tokens: np.ndarray
    probs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        self.probs = np.asarray(self.probs, dtype=float)
        if self.tokens.shape[0] != self.probs.shape[0]:
            raise ValueError("tokens and probs disagree in length")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.S):
            raise InvalidAlphabetError("data support must not contain MASK or out-of-range tokens")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities must be non-negative and sum to 1 (sum={self.probs.sum()!r})")

    @property
    def D(self) -> int:
        return self.tokens.shape[1]

    def __len__(self):
        return len(self.probs)

    def sample(self, n: int, rng=None) -> np.ndarray:
        rng = as_rng(rng)
        idx = rng.choice(len(self.probs), size=n, p=self.probs)
        return self.tokens[idx]

    def table(self) -> np.ndarray:
        """Dense array of shape (S,)*D."""
        out = np.zeros((self.S,) * self.D)
        np.add.at(out, tuple(self.tokens.T), self.probs)
        return out

    def marginals(self) -> np.ndarray:
        """Per-dimension marginals, shape (D, S)."""
        out = np.zeros((self.D, self.S))
        for d in range(self.D):
            np.add.at(out[d], self.tokens[:, d], self.probs)
        return out

    def canonical(self) -> "TabularDistribution":
        """Merge duplicate rows, drop zero-mass rows and sort lexicographically."""
        codes = encode_rows(self.tokens, self.S)
        uniq, inv = np.unique(codes, return_inverse=True)
        p = np.zeros(len(uniq))
        np.add.at(p, inv, self.probs)
        keep = p > 0
        return TabularDistribution(self.S, decode_rows(uniq[keep], self.S, self.D), p[keep], dict(self.meta))

    @classmethod
    def from_samples(cls, samples, S: int) -> "TabularDistribution":
        samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
        codes, counts = np.unique(encode_rows(samples, S), return_counts=True)
        return cls(S, decode_rows(codes, S, samples.shape[1]), counts / counts.sum())

    def to_dict(self) -> dict:
        return {
            "S": int(self.S),
            "D": int(self.D),
            "entries": [
                {"tokens": [int(v) for v in row], "p": float(p)}
                for row, p in zip(self.tokens, self.probs)
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TabularDistribution":
        entries = obj["entries"]
        tokens = np.array([e["tokens"] for e in entries], dtype=np.int64).reshape(len(entries), obj["D"])
        return cls(int(obj["S"]), tokens, np.array([e["p"] for e in entries], dtype=float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TabularDistribution":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        c = self.canonical()
        blob = json.dumps(c.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SampledDistribution:
    """Black-box data source; exact-oracle operations reject it."""

    S: int
    D: int
    sampler: Callable[[int, np.random.Generator], np.ndarray]

    def sample(self, n: int, rng=None) -> np.ndarray:
        return np.asarray(self.sampler(n, as_rng(rng)), dtype=np.int64)


def require_tabular(dist) -> TabularDistribution:
    if not isinstance(dist, TabularDistribution):
        raise NotAvailableError("this operation needs a tabular data distribution")
    return dist


def marginal_pt(dist: TabularDistribution, flow: ConditionalFlow, t: float) -> np.ndarray:
    """p_t over every state in the (possibly mask-extended) alphabet, shape (n,)*D."""
    dist = require_tabular(dist)
    n, D = flow.n_states, dist.D
    if n**D > ENUMERATION_LIMIT:
        raise CapacityError(f"{n}^{D} states exceeds the enumeration limit {ENUMERATION_LIMIT}")
    per_dim = flow.probs(float(t), dist.tokens)  # (K, D, n)
    out = np.zeros((n,) * D)
    chunk = max(1, ENUMERATION_LIMIT // n**D)
    for start in range(0, len(dist), chunk):
        acc = dist.probs[start:start + chunk]
        acc = acc.reshape(-1)
        for d in range(D):
            acc = acc[..., None] * per_dim[start:start + chunk, d].reshape((-1,) + (1,) * d + (n,))
        out += acc.sum(axis=0)
    return out
