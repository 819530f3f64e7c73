"""Small numerical helpers shared by the sampler, denoisers and evaluation."""

from __future__ import annotations

import numpy as np


def as_rng(rng=None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one index per row of ``probs`` (last axis), rows need not be normalised."""
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # u can land exactly on the total when trailing entries are zero
    return np.minimum(idx, probs.shape[-1] - 1)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    m = np.max(logits, axis=axis, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def one_hot(tokens: np.ndarray, n: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    return (tokens[..., None] == np.arange(n)).astype(float)


def encode_rows(tokens: np.ndarray, base: int) -> np.ndarray:
    """Map each row of an integer array to a single integer (mixed radix)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    weights = base ** np.arange(tokens.shape[-1] - 1, -1, -1, dtype=np.int64)
    return tokens @ weights


def decode_rows(codes: np.ndarray, base: int, length: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty(codes.shape + (length,), dtype=np.int64)
    rem = codes.copy()
    for d in range(length - 1, -1, -1):
        out[..., d] = rem % base
        rem //= base
    return out


def sinusoidal_features(t: np.ndarray, n_features: int = 8) -> np.ndarray:
    """sin/cos features of time on [0, 1]; ``n_features`` must be even."""
    t = np.asarray(t, dtype=float)[..., None]
    freqs = np.pi * 2.0 ** np.arange(n_features // 2)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)], axis=-1)
