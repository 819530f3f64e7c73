"""Synthetic data families; discrete ones are exact tables, the labelled mixture is a joint sample set."""

from __future__ import annotations

import itertools

import numpy as np

from .flows import TabularDistribution
from .multimodal import JointDataset, MixtureHeads, standardize

FAMILIES = ("point_mass", "iid_uniform", "markov_chain", "banded_chain", "parity", "gaussian_mixture_labeled")


def point_mass(S: int, D: int, x=None, seed: int = 0) -> TabularDistribution:
    x = np.random.default_rng(seed).integers(0, S, size=D) if x is None else np.asarray(x, dtype=np.int64)
    if x.shape != (D,):
        raise ValueError(f"point must have length {D}")
    return TabularDistribution(S, x[None], np.ones(1), {"family": "point_mass"})


def _all_sequences(S: int, D: int) -> np.ndarray:
    return np.array(list(itertools.product(range(S), repeat=D)), dtype=np.int64).reshape(-1, D)


def iid_uniform(S: int, D: int) -> TabularDistribution:
    seqs = _all_sequences(S, D)
    return TabularDistribution(S, seqs, np.full(len(seqs), 1.0 / len(seqs)), {"family": "iid_uniform"})


def markov_chain(S: int, D: int, seed: int = 0, transition=None, initial=None,
                 concentration: float = 0.5) -> TabularDistribution:
    """First-order chain along the sequence; rows are Dirichlet draws unless given."""
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.full(S, concentration), size=S) if transition is None else np.asarray(transition, float)
    p0 = rng.dirichlet(np.ones(S)) if initial is None else np.asarray(initial, float)
    if T.shape != (S, S) or p0.shape != (S,):
        raise ValueError("transition must be (S, S) and initial (S,)")
    T = T / T.sum(axis=1, keepdims=True)
    p0 = p0 / p0.sum()
    seqs = _all_sequences(S, D)
    p = p0[seqs[:, 0]]
    for d in range(1, D):
        p = p * T[seqs[:, d - 1], seqs[:, d]]
    keep = p > 0
    return TabularDistribution(S, seqs[keep], p[keep] / p[keep].sum(), {"family": "markov_chain"})


def banded_chain(S: int, D: int, stay: float = 0.7) -> TabularDistribution:
    """Uniform start, then each token repeats with prob ``stay`` or increments mod S."""
    T = stay * np.eye(S) + (1.0 - stay) * np.roll(np.eye(S), 1, axis=1)
    return markov_chain(S, D, transition=T, initial=np.ones(S))


def parity(S: int, D: int) -> TabularDistribution:
    """Uniform over sequences whose token sum is even."""
    seqs = _all_sequences(S, D)
    seqs = seqs[seqs.sum(axis=1) % 2 == 0]
    return TabularDistribution(S, seqs, np.full(len(seqs), 1.0 / len(seqs)), {"family": "parity"})


def gaussian_mixture_labeled(n: int = 1000, means=(-1.5, 1.5), weights=(0.5, 0.5), sigma: float = 0.5,
                             seed: int = 0, standardize_coords: bool = True) -> JointDataset:
    """One coordinate drawn from the component labelled by the single token.

    The generating parameters are stored in ``meta`` in the units of the stored
    coordinates (after standardisation when it is applied).
    """
    rng = np.random.default_rng(seed)
    means = np.asarray(means, dtype=float).reshape(len(weights), -1)
    weights = np.asarray(weights, dtype=float)
    labels = rng.choice(len(weights), size=n, p=weights / weights.sum())
    coords = means[labels] + sigma * rng.standard_normal((n, means.shape[1]))
    shift, scale = np.zeros(means.shape[1]), np.ones(means.shape[1])
    if standardize_coords:
        coords, shift, scale = standardize(coords)
    meta = {
        "family": "gaussian_mixture_labeled",
        "means": ((means - shift) / scale).tolist(),
        "sigma": float(sigma / scale.mean()),
        "weights": weights.tolist(),
        "shift": shift.tolist(),
        "scale": scale.tolist(),
    }
    return JointDataset(coords, labels[:, None], len(weights), meta)


def mixture_heads(data: JointDataset) -> MixtureHeads:
    """Exact heads for a dataset made by :func:`gaussian_mixture_labeled`."""
    m = data.meta
    if m.get("family") != "gaussian_mixture_labeled":
        raise ValueError("exact heads need the generating parameters of a labelled mixture")
    K = len(m["weights"])
    return MixtureHeads(m["means"], np.arange(K)[:, None], m["weights"], m["sigma"], data.S)


def make_dataset(family: str, **params):
    builders = {
        "point_mass": point_mass,
        "iid_uniform": iid_uniform,
        "markov_chain": markov_chain,
        "banded_chain": banded_chain,
        "parity": parity,
        "gaussian_mixture_labeled": gaussian_mixture_labeled,
    }
    if family not in builders:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    return builders[family](**params)
