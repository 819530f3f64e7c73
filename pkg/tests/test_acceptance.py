"""Acceptance criteria, one test per criterion.

Each test records its sub-checks with the ``criterion`` fixture; the terminal
summary prints one PASS/FAIL line per criterion followed by the measured values.
"""

import itertools
import time

import numpy as np
import pytest

from dfm.datasets import banded_chain, gaussian_mixture_labeled, iid_uniform, mixture_heads
from dfm.denoisers import ExactPosterior, MLPDenoiser, TrainConfig, ce_loss, exact_posterior, train
from dfm.evaluation import (
    d3pm_equivalence_check,
    expected_conditional_entropy,
    expected_hamming_uniform,
    jump_stats,
    kolmogorov_generation_error,
    masking_elbo,
    tv_distance,
)
from dfm.flows import MaskingFlow, TabularDistribution, TabularFlow, UniformFlow, make_flow, marginal_pt, \
    sample_corrupted
from dfm.multimodal import JointSamplerConfig, MixtureHeads, joint_generate, simulate_conditional_coords
from dfm.rates import (
    RatePlan,
    db_residual,
    diffusion_implied_rate_matrix,
    r_db_row,
    rate_matrix,
    uniform_db_general,
)
from dfm.sampler import SamplerConfig, generate

TOY = banded_chain(4, 3)
N_TRAJ = 50_000
ETAS = (0.0, 5.0, 15.0)
_RUNS: dict = {}


def toy_run(kind: str, eta: float, scheme: str = "euler"):
    """Cached 5e4-trajectory run on the S=4, D=3 toy with the exact posterior, dt = 1e-3."""
    key = (kind, eta, scheme)
    if key not in _RUNS:
        flow = make_flow(kind, 4)
        cfg = SamplerConfig(dt=1e-3, eta=eta, scheme=scheme, seed=2024)
        start = time.perf_counter()
        res = generate(RatePlan(flow), ExactPosterior(TOY, flow), N_TRAJ, 3, cfg, snapshots=(0.5,))
        _RUNS[key] = (res, time.perf_counter() - start)
    return _RUNS[key][0]


def run_seconds(keys) -> float:
    return sum(_RUNS[k][1] for k in keys if k in _RUNS)


def test_criterion_01_kolmogorov_generation(criterion):
    log = criterion(1, "RK4 of dp/dt = R^T p reproduces p_t|1 (masking/uniform, S<=5, eta in {0,1,10})")
    start = time.perf_counter()
    for cls, S in itertools.product((MaskingFlow, UniformFlow), (2, 3, 4, 5)):
        flow = cls(S)
        err = kolmogorov_generation_error([RatePlan(flow, eta) for eta in (0.0, 1.0, 10.0)])
        log.check(f"{cls.__name__} S={S}", err < 1e-4, f"max pointwise error {err:.2e} (< 1e-4)")
    elapsed = time.perf_counter() - start
    log.check("runtime", elapsed < 10, f"{elapsed:.1f} s (< 10 s)")
    log.assert_all()


def test_criterion_02_marginal_correctness(criterion):
    log = criterion(2, "final and t=0.5 marginals of the toy within TV 0.02 (exact posterior, dt=1e-3, 5e4 runs)")
    for kind in ("masking", "uniform"):
        flow = make_flow(kind, 4)
        mid = marginal_pt(TOY, flow, 0.5).ravel()
        for eta in ETAS:
            res = toy_run(kind, eta)
            tv = tv_distance(res.samples, TOY)
            tv_mid = tv_distance(res.snapshots[0.5], mid, S=flow.n_states, D=3)
            log.check(f"{kind} eta={eta:g} final", tv <= 0.02, f"TV {tv:.4f} (<= 0.02)")
            log.check(f"{kind} eta={eta:g} t=0.5", tv_mid <= 0.02, f"TV {tv_mid:.4f} (<= 0.02)")
    elapsed = run_seconds([(k, e, "euler") for k in ("masking", "uniform") for e in ETAS])
    log.check("runtime", elapsed < 300, f"{elapsed:.0f} s (< 300 s)")
    log.assert_all()


def test_criterion_03_eta_invariance(criterion):
    log = criterion(3, "final distributions agree across eta (pairwise TV <= 0.03); jumps increase with eta")
    for kind in ("masking", "uniform"):
        runs = {eta: toy_run(kind, eta) for eta in ETAS}
        for a, b in itertools.combinations(ETAS, 2):
            tv = tv_distance(runs[a].samples, TabularDistribution.from_samples(runs[b].samples, 4))
            log.check(f"{kind} eta {a:g} vs {b:g}", tv <= 0.03, f"TV {tv:.4f} (<= 0.03)")
        means = [jump_stats(runs[eta].trajectories).mean for eta in ETAS]
        log.check(f"{kind} jumps increasing", all(np.diff(means) > 0),
                  "mean jumps " + ", ".join(f"{m:.2f}" for m in means))
    log.assert_all()


def test_criterion_04_jump_optimality(criterion):
    log = criterion(4, "eta=0: masking makes exactly D jumps; uniform matches E[Hamming(x0, x1)]")
    flow = MaskingFlow(4)
    res = generate(RatePlan(flow), ExactPosterior(TOY, flow), 10_000, 3, SamplerConfig(dt=1e-3, seed=7))
    counts = res.trajectories.total_jumps
    frac = np.mean(counts == 3)
    log.check("masking", frac == 1.0, f"{frac:.2%} of 10^4 trajectories made exactly 3 jumps")
    flow = UniformFlow(4)
    res = generate(RatePlan(flow), ExactPosterior(TOY, flow), 10_000, 3, SamplerConfig(dt=1e-3, seed=8))
    js = jump_stats(res.trajectories)
    expected = expected_hamming_uniform(TOY)
    log.check("uniform", abs(js.mean - expected) <= 3 * js.stderr,
              f"mean {js.mean:.4f} +- {js.stderr:.4f} vs analytic {expected:.4f} (3 SE)")
    log.assert_all()


def test_criterion_05_detailed_balance(criterion):
    log = criterion(5, "R^DB satisfies detailed balance; uniform S=3 diffusion rate = R* + R^DB(1/(3t))")
    rng = np.random.default_rng(5)
    flows = {"masking": MaskingFlow(4), "uniform": UniformFlow(4),
             "general (tabular)": TabularFlow.clone(UniformFlow(4), analytic_dt=True)}
    for name, flow in flows.items():
        worst = max(db_residual(flow, float(rng.uniform(0.01, 0.99)), int(rng.integers(0, 4)), r_db_row)
                    for _ in range(1000))
        log.check(name, worst < 1e-10, f"max residual {worst:.1e} over 10^3 (t, x1) (< 1e-10)")
    worst = 0.0
    for t, x1 in itertools.product(np.linspace(0.02, 0.98, 49), range(3)):
        star = rate_matrix(RatePlan(UniformFlow(3)), t, np.int64(x1))
        b = 1.0 / (3 * t)
        diff = diffusion_implied_rate_matrix(3, t, x1) - (star + uniform_db_general(3, t, x1, b, b))
        worst = max(worst, float(np.max(np.abs(diff))))
    log.check("diffusion identity", worst < 1e-9, f"max entry difference {worst:.1e} (< 1e-9)")
    log.assert_all()


def test_criterion_06_d3pm_equivalence(criterion):
    log = criterion(6, "masking DFM and D3PM reverse kernels coincide")
    for T, k in ((10, 1), (1000, 500), (1000, 999)):
        gap = d3pm_equivalence_check(T, k)
        log.check(f"T={T} t_index={k}", gap < 1e-9, f"discrepancy {gap:.1e} (< 1e-9)")
    log.assert_all()


def test_criterion_07_training(criterion, coin_pair):
    log = criterion(7, "MLP gradients, trained-denoiser accuracy on the S=2 D=2 toy, exact CE = conditional entropy")
    start = time.perf_counter()
    rng = np.random.default_rng(70)

    mlp = MLPDenoiser(3, 2, 4, hidden=16, seed=3)
    flow = MaskingFlow(3)
    x1 = rng.integers(0, 3, size=(8, 2))
    t = rng.uniform(0.01, 0.99, size=8)
    xt = sample_corrupted(flow, t, x1, rng)
    _, grads = mlp.loss_and_grad(xt, t, x1, None)
    worst, h = 0.0, 1e-5
    for name in sorted(mlp.params):
        for _ in range(10):
            idx = tuple(rng.integers(0, s) for s in mlp.params[name].shape)
            mlp.params[name][idx] += h
            up = mlp.loss_and_grad(xt, t, x1, None)[0]
            mlp.params[name][idx] -= 2 * h
            down = mlp.loss_and_grad(xt, t, x1, None)[0]
            mlp.params[name][idx] += h
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - grads[name][idx]) / max(abs(fd), abs(grads[name][idx]), 1e-8))
    log.check("gradient check", worst < 1e-4, f"max relative error {worst:.1e} (< 1e-4)")

    flow = UniformFlow(2)
    mlp = MLPDenoiser(2, 2, 2, hidden=64, seed=0)
    train(mlp, coin_pair, flow, TrainConfig(steps=20_000, batch_size=256, learning_rate=0.05, seed=0))
    t = rng.uniform(1e-3, 1 - 1e-3, 100)
    xt = sample_corrupted(flow, t, coin_pair.sample(100, rng), rng)
    tv = 0.5 * np.abs(exact_posterior(coin_pair, flow, t, xt) - mlp.predict(xt, t)).sum(-1).max(-1)
    log.check("trained MLP vs exact posterior", tv.max() <= 0.05,
              f"max TV {tv.max():.4f} over 100 (t, x_t) after 20k steps (<= 0.05)")

    den = ExactPosterior(coin_pair, flow)
    batches = [ce_loss(den, flow, coin_pair.sample(500, rng), rng)[0] for _ in range(80)]
    mc, se = np.mean(batches), np.std(batches, ddof=1) / np.sqrt(len(batches))
    nodes, weights = np.polynomial.legendre.leggauss(64)
    a, b = 1e-3, 1 - 1e-3
    ts = (b - a) / 2 * nodes + (a + b) / 2
    oracle = sum(w * expected_conditional_entropy(coin_pair, flow, s) for w, s in zip(weights, ts)) / 2 / 2
    log.check("exact CE = conditional entropy", abs(mc - oracle) < 3 * se,
              f"CE {mc:.4f} +- {se:.4f} vs enumerated {oracle:.4f} nats/token (3 SE)")
    elapsed = time.perf_counter() - start
    log.check("runtime", elapsed < 300, f"{elapsed:.0f} s (< 300 s)")
    log.assert_all()


def test_criterion_08_masking_elbo(criterion):
    log = criterion(8, "masking ELBO: fair coins give 1 bit/token; a trained model's bound is no better than exact")
    data = iid_uniform(2, 3)
    flow = MaskingFlow(2)
    exact = masking_elbo(ExactPosterior(data, flow), data, flow, 20_000, np.random.default_rng(80))
    log.check("fair coins", abs(exact.bits_per_token - 1.0) <= 3 * exact.stderr,
              f"{exact.bits_per_token:.4f} +- {exact.stderr:.4f} bits/token (1.0 within 3 SE)")
    mlp = MLPDenoiser(2, 3, flow.n_states, hidden=32, seed=1)
    train(mlp, data, flow, TrainConfig(steps=2000, batch_size=128, learning_rate=0.05, seed=1))
    trained = masking_elbo(mlp, data, flow, 20_000, np.random.default_rng(81))
    se = np.hypot(exact.stderr, trained.stderr)
    log.check("trained >= exact", trained.bits_per_token >= exact.bits_per_token - 3 * se,
              f"trained {trained.bits_per_token:.4f} vs exact {exact.bits_per_token:.4f} (one-sided, 3 SE)")
    log.assert_all()


def test_criterion_09_multimodal(criterion):
    log = criterion(9, "joint flow: coordinate moments, fix-tokens means, cogenerate label freqs, joint toy TV")
    start = time.perf_counter()
    rng = np.random.default_rng(90)
    n = 100_000
    x1 = 2.0
    path = simulate_conditional_coords(np.full(n, x1), rng.standard_normal(n), np.linspace(0, 1, 1001))
    for t in (0.25, 0.5, 0.75):
        x = path[min(path, key=lambda s: abs(s - t))]
        mean_se = x.std() / np.sqrt(n)
        var_se = x.var() * np.sqrt(2.0 / (n - 1))
        log.check(f"moments t={t}", abs(x.mean() - t * x1) < 3 * mean_se and abs(x.var() - (1 - t) ** 2) < 3 * var_se,
                  f"mean {x.mean():.4f} (vs {t * x1:.4f}), var {x.var():.4f} (vs {(1 - t) ** 2:.4f})")

    data = gaussian_mixture_labeled(n=5000, weights=(0.3, 0.7), seed=9)
    heads = mixture_heads(data)
    means = np.asarray(data.meta["means"]).ravel()
    for k in (0, 1):
        res = joint_generate(heads, "fix-tokens", 10_000, 1, 1, JointSamplerConfig(seed=91 + k), tokens=[k])
        se = res.coords.std() / np.sqrt(10_000)
        log.check(f"fix-tokens label {k}", abs(res.coords.mean() - means[k]) < 3 * se,
                  f"mean {res.coords.mean():.4f} vs {means[k]:.4f} (3 SE = {3 * se:.4f})")
    res = joint_generate(heads, "cogenerate", 10_000, 1, 1, JointSamplerConfig(seed=93))
    freq = np.bincount(res.tokens[:, 0], minlength=2) / 10_000
    log.check("cogenerate label frequencies", np.max(np.abs(freq - [0.3, 0.7])) <= 0.02,
              f"{np.round(freq, 4).tolist()} vs [0.3, 0.7] (within 0.02)")

    weights = np.array([0.4, 0.1, 0.15, 0.35])  # cells (x=-1,a=0), (-1,1), (1,0), (1,1)
    toy = MixtureHeads([[-1.0], [-1.0], [1.0], [1.0]], [[0], [1], [0], [1]], weights, 0.0, 2)
    res = joint_generate(toy, "cogenerate", 20_000, 1, 1, JointSamplerConfig(seed=94))
    cell = (res.coords[:, 0] > 0).astype(int) * 2 + res.tokens[:, 0]
    tv = tv_distance(np.bincount(cell, minlength=4) / 20_000, weights, S=4, D=1)
    log.check("joint toy", tv <= 0.03, f"TV {tv:.4f} (<= 0.03)")
    elapsed = time.perf_counter() - start
    log.check("runtime", elapsed < 300, f"{elapsed:.0f} s (< 300 s)")
    log.assert_all()


def test_criterion_10_scheme_equivalence(criterion):
    log = criterion(10, "Euler, sample-then-plug and masking-fast agree (TV <= 0.02); purity keeps TV <= 0.03")
    schemes = ("euler", "sample-then-plug", "masking-fast")
    samples = {s: toy_run("masking", 0.0, s).samples for s in schemes}
    for a, b in itertools.combinations(schemes, 2):
        tv = tv_distance(samples[a], TabularDistribution.from_samples(samples[b], 4))
        log.check(f"{a} vs {b}", tv <= 0.02, f"TV {tv:.4f} (<= 0.02)")
    tv = tv_distance(toy_run("masking", 0.0, "purity").samples, TOY)
    log.check("purity vs p_data", tv <= 0.03, f"TV {tv:.4f} (<= 0.03)")
    log.assert_all()


@pytest.fixture(scope="module", autouse=True)
def _release_runs():
    yield
    _RUNS.clear()
