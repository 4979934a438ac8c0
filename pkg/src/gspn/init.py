"""Data-driven initialisation of mixture emissions."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.cluster.vq import kmeans2

from .graph import AttributeSchema

MAX_INIT_VARIANCE = 10.0
MIN_INIT_VARIANCE = 1e-4


def fill_column_means(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace unobserved entries with the observed column mean (0 if a column is empty)."""
    obs = mask & np.isfinite(x)
    counts = obs.sum(axis=0)
    means = np.where(counts > 0, np.where(obs, x, 0.0).sum(axis=0) / np.maximum(counts, 1), 0.0)
    return np.where(obs, x, means)


def kmeans_gaussians(x: np.ndarray, mask: np.ndarray, C: int, rng: np.random.Generator):
    """Per-cluster means and standard deviations of the observed values.

    Rows are clustered with k-means++ after mean-filling missing entries.
    Clusters with fewer than two observations of an attribute borrow the global
    variance; variances are clipped to [MIN_INIT_VARIANCE, MAX_INIT_VARIANCE].
    """
    x = np.asarray(x, dtype=np.float64)
    obs = mask & np.isfinite(x)
    filled = fill_column_means(x, mask)
    n, d = filled.shape
    global_var = np.array([np.var(x[obs[:, j], j]) if obs[:, j].sum() > 1 else 1.0 for j in range(d)])
    global_var = np.clip(global_var, MIN_INIT_VARIANCE, MAX_INIT_VARIANCE)
    if n >= C:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centroids, labels = kmeans2(filled, C, minit="++", seed=rng)
    else:
        labels = np.arange(n)
        centroids = np.resize(filled, (C, d)) if n else np.zeros((C, d))
    mu = np.empty((C, d))
    var = np.empty((C, d))
    for i in range(C):
        members = labels == i
        for j in range(d):
            vals = x[members & obs[:, j], j]
            if len(vals) == 0:
                mu[i, j] = centroids[i, j]
                var[i, j] = global_var[j]
            else:
                mu[i, j] = vals.mean()
                var[i, j] = vals.var() if len(vals) > 1 else global_var[j]
    if C > 1:
        # identical centroids would leave states exchangeable
        mu += 1e-3 * np.sqrt(global_var) * rng.standard_normal((C, d))
    return mu, np.sqrt(np.clip(var, MIN_INIT_VARIANCE, MAX_INIT_VARIANCE))


def perturbed_frequencies(values: np.ndarray, arity: int, C: int, rng: np.random.Generator,
                          noise: float = 0.1) -> np.ndarray:
    """(C, arity) tables: Laplace-smoothed empirical frequencies times random jitter."""
    values = values[np.isfinite(values)].astype(np.int64)
    freq = np.bincount(values, minlength=arity) + 1.0
    freq = freq / freq.sum()
    table = freq[None, :] * (1.0 + noise * rng.random((C, arity)))
    return table / table.sum(axis=1, keepdims=True)


def init_emissions(schema: AttributeSchema, x: np.ndarray, mask: np.ndarray, C: int,
                   rng: np.random.Generator):
    """(mu, sigma, cat) for a fresh mixture over the rows of ``x``."""
    cols = schema.continuous
    if cols:
        mu, sigma = kmeans_gaussians(x[:, cols], mask[:, cols], C, rng)
    else:
        mu = sigma = np.zeros((C, 0))
    cat = {}
    for a in schema.categorical:
        obs = mask[:, a]
        cat[a] = perturbed_frequencies(x[obs, a], schema.attributes[a].arity, C, rng)
    return mu, sigma, cat
