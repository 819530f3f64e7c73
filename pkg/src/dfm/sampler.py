"""Generative CTMC simulation with factorized Euler steps and masking-specific fast paths.

States are integer arrays of shape ``(B, D)``; every step function advances a
whole batch of independent trajectories by one time step.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IncompatibleConfigError, IncompleteSampleError
from .flows import EPS, MaskingFlow, sample_prior
from .rates import RatePlan, conditional_rates, unconditional_rates
from .utils import as_rng, categorical, encode_rows

SCHEMES = ("euler", "sample-then-plug", "masking-fast", "purity")
FINAL_FILLS = ("argmax", "sample", "none")


@dataclass
class SamplerConfig:
    dt: float = 1e-3
    eta: float = 0.0
    scheme: str = "euler"
    temperature: float = 1.0
    final_fill: str = "argmax"
    seed: int = 0
    eps: float = EPS
    t_final: float = 1.0
    chunk_size: int = 50_000
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.dt < 1.0:
            raise ValueError("dt must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.final_fill not in FINAL_FILLS:
            raise ValueError(f"unknown final_fill {self.final_fill!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.eps < self.t_final <= 1.0:
            raise ValueError("t_final must lie in (eps, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(plan: RatePlan, scheme: str) -> None:
    if scheme in ("masking-fast", "purity") and not isinstance(plan.flow, MaskingFlow):
        raise IncompatibleConfigError(f"scheme {scheme!r} needs a masking flow, got {plan.flow!r}")


# -- single steps ---------------------------------------------------------------


def step_probs(rates: np.ndarray, xt: np.ndarray, dt: float) -> np.ndarray:
    """delta(xt, .) + R dt with off-diagonals capped at 1 and the diagonal floored at 0."""
    probs = np.minimum(rates * dt, 1.0)
    hit = xt[..., None] == np.arange(rates.shape[-1])
    probs = np.where(hit, 0.0, probs)
    stay = np.maximum(1.0 - probs.sum(axis=-1, keepdims=True), 0.0)
    return np.where(hit, stay, probs)


def euler_from_probs(plan: RatePlan, x1_probs, t, xt, dt, rng):
    rates = unconditional_rates(plan, x1_probs, t, xt)
    return categorical(rng, step_probs(rates, xt, dt))


def conditional_step_table(plan: RatePlan, t, dt) -> np.ndarray:
    """Step probabilities for every (x_t token, x_1 token) pair, shape (n, S, n)."""
    states = np.arange(plan.flow.n_states)[:, None]
    rates = conditional_rates(plan, t, states, np.arange(plan.flow.S)[None, :])
    return step_probs(rates, np.broadcast_to(states, rates.shape[:-1]), dt)


def plug_from_probs(plan: RatePlan, x1_probs, t, xt, dt, rng):
    x1 = categorical(rng, x1_probs)
    return categorical(rng, conditional_step_table(plan, t, dt)[xt, x1])


def masking_from_probs(plan: RatePlan, x1_probs, t, xt, dt, rng):
    m = plan.flow.mask_token
    masked = xt == m
    p_unmask = min(1.0, dt * (1.0 + plan.eta * t) / (1.0 - t))
    p_remask = min(1.0, dt * plan.eta) if t + dt < 1.0 else 0.0
    u = rng.random(xt.shape)
    dest = categorical(rng, x1_probs)
    out = np.where(masked & (u < p_unmask), dest, xt)
    out = np.where(~masked & (u < p_remask), m, out)
    return out


def purity_scores(x1_probs: np.ndarray) -> np.ndarray:
    return np.max(x1_probs, axis=-1)


def purity_from_probs(plan: RatePlan, x1_probs, t, xt, dt, rng):
    m = plan.flow.mask_token
    B, D = xt.shape
    masked = xt == m
    p_unmask = min(1.0, dt * (1.0 + plan.eta * t) / (1.0 - t))
    p_remask = min(1.0, dt * plan.eta) if t + dt < 1.0 else 0.0
    count = rng.binomial(masked.sum(axis=1), p_unmask)
    score = np.where(masked, purity_scores(x1_probs), -np.inf)
    order = np.argsort(-score, axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(B)[:, None], order] = np.arange(D)
    chosen = masked & (ranks < count[:, None])
    dest = categorical(rng, x1_probs)
    out = np.where(chosen, dest, xt)
    remask = ~masked & (rng.random(xt.shape) < p_remask)
    return np.where(remask, m, out)


_FROM_PROBS = {
    "euler": euler_from_probs,
    "sample-then-plug": plug_from_probs,
    "masking-fast": masking_from_probs,
    "purity": purity_from_probs,
}


def _stepper(scheme):
    def step(plan, denoiser, t, xt, dt, rng, temperature=None):
        rng = as_rng(rng)
        xt = np.atleast_2d(np.asarray(xt, dtype=np.int64))
        if scheme in ("masking-fast", "purity"):
            check_compatible(plan, scheme)
        probs = denoiser.predict(xt, t, temperature)
        return _FROM_PROBS[scheme](plan, probs, t, xt, dt, rng)

    return step


euler_step = _stepper("euler")
sample_then_plug_step = _stepper("sample-then-plug")
masking_fast_step = _stepper("masking-fast")
purity_step = _stepper("purity")

euler_step.__doc__ = "Per-dimension categorical step with probabilities delta + R dt."
sample_then_plug_step.__doc__ = "Draw x1 from the denoiser, then step with the conditional rate at that x1."
masking_fast_step.__doc__ = "Unmask/remask Bernoulli step for masking flows; same law as euler_step."
purity_step.__doc__ = "Unmask the most confident masked dimensions first; count drawn from a binomial."


# -- trajectories -------------------------------------------------------------------


def time_grid(dt: float, eps: float = EPS, t_final: float = 1.0):
    """(start, end) times of every step.

    Rates are only evaluated at start times, which lie in [eps, min(1 - eps, t_final));
    the final step runs from the last start time to ``t_final``.
    """
    limit = min(1.0 - eps, t_final)
    n = int(np.floor((limit - eps) / dt + 1e-9)) + 1
    starts = eps + dt * np.arange(n)
    starts = starts[starts < t_final - 1e-12]
    ends = np.append(starts[1:], t_final)
    return starts, ends


@dataclass
class Trajectory:
    times: list
    states: list
    jump_count_per_dim: np.ndarray


@dataclass
class TrajectoryBatch:
    """Jump records for a batch; each event is (trajectory, time, dim, from, to)."""

    n: int
    D: int
    jump_counts: np.ndarray  # (n, D)
    initial: Optional[np.ndarray] = None
    events: Optional[dict] = None

    @property
    def total_jumps(self) -> np.ndarray:
        return self.jump_counts.sum(axis=1)

    def trajectory(self, i: int) -> Trajectory:
        if self.events is None or self.initial is None:
            raise ValueError("events were not recorded")
        sel = self.events["traj"] == i
        state = self.initial[i].copy()
        times, states = [], []
        for t, d, a, b in zip(self.events["t"][sel], self.events["dim"][sel],
                              self.events["from"][sel], self.events["to"][sel]):
            assert state[d] == a
            state[d] = b
            times.append(float(t))
            states.append(state.copy())
        return Trajectory(times, states, self.jump_counts[i].copy())

    def dump_jsonl(self, path) -> None:
        if self.events is None:
            raise ValueError("events were not recorded")
        ev = self.events
        with Path(path).open("w") as fh:
            for k in range(len(ev["t"])):
                fh.write(json.dumps({"traj": int(ev["traj"][k]), "t": float(ev["t"][k]), "dim": int(ev["dim"][k]),
                                     "from": int(ev["from"][k]), "to": int(ev["to"][k])}) + "\n")


@dataclass
class GenerateResult:
    samples: np.ndarray
    trajectories: TrajectoryBatch
    snapshots: dict = field(default_factory=dict)


class _Recorder:
    def __init__(self, x0, record_events):
        self.counts = np.zeros(x0.shape, dtype=np.int64)
        self.record = record_events
        self.chunks = []

    def __call__(self, before, after, t):
        changed = before != after
        self.counts += changed
        if self.record and changed.any():
            b, d = np.nonzero(changed)
            self.chunks.append((b, np.full(len(b), t), d, before[b, d], after[b, d]))

    def events(self, offset=0):
        if not self.record:
            return None
        keys = ("traj", "t", "dim", "from", "to")
        if not self.chunks:
            return {k: np.zeros(0, dtype=float if k == "t" else np.int64) for k in keys}
        cols = [np.concatenate(c) for c in zip(*self.chunks)]
        cols[0] = cols[0] + offset
        return dict(zip(keys, cols))


def _unique_rows(xt: np.ndarray, n_states: int):
    """(unique rows, inverse index) or (xt, None) when rows cannot be integer-coded."""
    if xt.shape[1] * np.log2(n_states) > 62 or len(xt) < 2:
        return xt, None
    codes = encode_rows(xt, n_states)
    _, first, inv = np.unique(codes, return_index=True, return_inverse=True)
    return xt[first], inv


def _advance(plan, denoiser, scheme, t, xt, h, temperature, rng):
    """One step for a batch; denoiser and Euler kernels are evaluated once per distinct state."""
    xu, inv = _unique_rows(xt, plan.flow.n_states)
    probs = denoiser.predict(xu, t, temperature)
    if scheme == "euler":
        kernel = step_probs(unconditional_rates(plan, probs, t, xu), xu, h)
        return categorical(rng, kernel if inv is None else kernel[inv])
    return _FROM_PROBS[scheme](plan, probs if inv is None else probs[inv], t, xt, h, rng)


def _generate_chunk(plan, denoiser, n, D, cfg, rng, snapshots, record_events):
    flow = plan.flow
    final_plan = plan.with_eta(0.0)
    xt = sample_prior(flow, (n, D), rng)
    rec = _Recorder(xt, record_events)
    x0 = xt.copy()
    snaps = {}
    pending = sorted(snapshots)
    starts, ends = time_grid(cfg.dt, cfg.eps, cfg.t_final)
    t_end = min(starts[-1], 1.0 - cfg.eps)
    for k, (t, t_next) in enumerate(zip(starts, ends)):
        while pending and t >= pending[0] - 1e-9:
            snaps[pending.pop(0)] = xt.copy()
        h = t_next - t
        last = k == len(starts) - 1
        nxt = _advance(final_plan if last else plan, denoiser, cfg.scheme, t, xt, h, cfg.temperature, rng)
        rec(xt, nxt, t_next)
        xt = nxt
    for s in pending:
        snaps[s] = xt.copy()
    if flow.mask_token is not None:
        residual = xt == flow.mask_token
        if residual.any():
            if cfg.final_fill == "none":
                raise IncompleteSampleError(f"{int(residual.sum())} MASK tokens remain")
            probs = denoiser.predict(xt, t_end, cfg.temperature)
            fill = probs.argmax(axis=-1) if cfg.final_fill == "argmax" else categorical(rng, probs)
            nxt = np.where(residual, fill, xt)
            rec(xt, nxt, cfg.t_final)
            xt = nxt
    return xt, x0, rec, snaps


def generate(plan: RatePlan, denoiser, n: int, D: int, cfg: SamplerConfig,
             snapshots: Sequence[float] = (), record_events: bool = False) -> GenerateResult:
    """Simulate ``n`` trajectories from the prior at t = eps up to ``cfg.t_final``.

    Rates are evaluated on the grid eps, eps + dt, ... <= 1 - eps and the final
    step carries the state from the last grid time to ``cfg.t_final`` with
    eta = 0 (no remasking or churn just before the output is read off). With
    the default ``t_final = 1`` the conditional step probability h / (1 - t)
    reaches 1 on that step.

    Trajectories are split into chunks of ``cfg.chunk_size``; chunk ``c`` draws
    from ``SeedSequence(cfg.seed).spawn(...)[c]``, so results do not depend on
    ``cfg.workers``. MASK tokens left at the end are resolved by
    ``cfg.final_fill`` and counted as jumps.
    """
    if plan.eta != cfg.eta:
        plan = plan.with_eta(cfg.eta)
    check_compatible(plan, cfg.scheme)
    n_chunks = max(1, -(-n // cfg.chunk_size))
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_chunks)
    sizes = [min(cfg.chunk_size, n - c * cfg.chunk_size) for c in range(n_chunks)] if n else [0]

    def run(c):
        return _generate_chunk(plan, denoiser, sizes[c], D, cfg, np.random.default_rng(seeds[c]),
                               snapshots, record_events)

    if cfg.workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(run, range(n_chunks)))
    else:
        parts = [run(c) for c in range(n_chunks)]

    samples = np.concatenate([p[0] for p in parts]).reshape(n, D)
    x0 = np.concatenate([p[1] for p in parts]).reshape(n, D)
    counts = np.concatenate([p[2].counts for p in parts]).reshape(n, D)
    events = None
    if record_events:
        offsets = np.cumsum([0] + sizes[:-1])
        evs = [p[2].events(off) for p, off in zip(parts, offsets)]
        events = {k: np.concatenate([e[k] for e in evs]) for k in evs[0]}
    snaps = {s: np.concatenate([p[3][s] for p in parts]).reshape(n, D) for s in snapshots}
    return GenerateResult(samples, TrajectoryBatch(n, D, counts, x0, events), snaps)
