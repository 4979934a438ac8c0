"""Structure-agnostic density baselines: a single diagonal Gaussian and an EM-fitted mixture.

Both treat every vertex as an independent row and marginalise unobserved
entries. Categorical attributes, if any, get categorical emissions so the
mixture family matches the Naive Bayes emissions of the GSPN.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import ParamStore
from .graph import AttributeSchema, Dataset
from .init import fill_column_means, init_emissions
from .model import GspnParams
from .queries import MissingNLL, conditional_missing_nll

SIGMA_FLOOR = 1e-4
_LOG_2PI = np.log(2 * np.pi)


@dataclass
class MixtureParams:
    schema: AttributeSchema
    weights: np.ndarray          # (C,)
    mu: np.ndarray               # (C, n_continuous)
    sigma: np.ndarray            # (C, n_continuous)
    cat: dict = field(default_factory=dict)  # attribute -> (C, arity)
    history: list = field(default_factory=list)

    @property
    def C(self) -> int:
        return len(self.weights)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "cat": {str(a): t.tolist() for a, t in self.cat.items()}, "history": self.history}


def stack_rows(ds: Dataset):
    x = np.concatenate([g.x for g in ds.graphs]) if len(ds) else np.zeros((0, ds.schema.d))
    mask = np.concatenate([g.mask for g in ds.graphs]) if len(ds) else np.zeros((0, ds.schema.d), bool)
    return x, mask


def component_log_probs(p: MixtureParams, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(N, C) log P(x_obs | Q=i); unobserved entries contribute 0."""
    out = np.zeros((x.shape[0], p.C))
    cols = p.schema.continuous
    if cols:
        xc = np.where(mask[:, cols], x[:, cols], 0.0)
        z = (xc[:, None, :] - p.mu[None]) / p.sigma[None]
        lp = -0.5 * z * z - np.log(p.sigma)[None] - 0.5 * _LOG_2PI
        out += (lp * mask[:, None, cols]).sum(axis=2)
    for a, table in p.cat.items():
        obs = mask[:, a]
        idx = np.where(obs, x[:, a], 0).astype(np.int64)
        out += np.where(obs[:, None], np.log(table[:, idx].T), 0.0)
    return out


def row_log_likelihood(p: MixtureParams, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return logsumexp(component_log_probs(p, x, mask) + np.log(p.weights), axis=1)


def responsibilities(p: MixtureParams, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    joint = component_log_probs(p, x, mask) + np.log(p.weights)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def fit_gaussian(ds: Dataset) -> MixtureParams:
    """Maximum-likelihood diagonal Gaussian (and categorical frequencies) over observed entries."""
    x, mask = stack_rows(ds)
    cols = ds.schema.continuous
    mu, sigma = np.zeros((1, len(cols))), np.ones((1, len(cols)))
    for j, a in enumerate(cols):
        vals = x[mask[:, a], a]
        if len(vals) < 2:
            raise ValueError(f"attribute {a} needs at least 2 observed values, got {len(vals)}")
        mu[0, j] = vals.mean()
        sigma[0, j] = vals.std()
        if sigma[0, j] < SIGMA_FLOOR:
            warnings.warn(f"attribute {a} is degenerate; sigma floored at {SIGMA_FLOOR}")
            sigma[0, j] = SIGMA_FLOOR
    cat = {}
    for a in ds.schema.categorical:
        vals = x[mask[:, a], a].astype(np.int64)
        counts = np.bincount(vals, minlength=ds.schema.attributes[a].arity).astype(np.float64)
        cat[a] = (counts / max(counts.sum(), 1.0))[None, :]
    return MixtureParams(ds.schema, np.ones(1), mu, sigma, cat)


def fit_gmm(ds: Dataset, C: int, max_iters: int = 200, tol: float = 1e-8, seed: int = 0) -> MixtureParams:
    """EM for a diagonal mixture with unobserved entries marginalised.

    The E-step uses observed coordinates only; the M-step replaces each
    unobserved coordinate by its expected sufficient statistics under the
    current component, which keeps the observed-data log-likelihood
    non-decreasing. ``history`` holds the mean row log-likelihood before each
    update and after the last one.
    """
    if C < 1:
        raise ValueError("C must be positive")
    x, mask = stack_rows(ds)
    if x.shape[0] == 0:
        raise ValueError("cannot fit a mixture to empty data")
    rng = np.random.default_rng(seed)
    mu, sigma, cat = init_emissions(ds.schema, x, mask, C, rng)
    p = MixtureParams(ds.schema, np.full(C, 1.0 / C), mu, sigma, cat)
    cols = ds.schema.continuous
    xc = np.where(mask[:, cols], x[:, cols], 0.0)
    mc = mask[:, cols].astype(np.float64)
    prev = -np.inf
    for _ in range(max_iters):
        ll = row_log_likelihood(p, x, mask)
        cur = float(ll.mean())
        p.history.append(cur)
        if cur - prev < tol:
            break
        prev = cur
        r = responsibilities(p, x, mask)                      # (N, C)
        nk = r.sum(axis=0)
        nk_safe = np.maximum(nk, 1e-300)
        weights = nk / nk.sum()
        mu_new, sigma_new = p.mu.copy(), p.sigma.copy()
        if cols:
            # E[x_a | Q=i] = mu_ia for unobserved a (diagonal covariance)
            ex = mc[:, None, :] * xc[:, None, :] + (1 - mc[:, None, :]) * p.mu[None]
            mu_new = (r[:, :, None] * ex).sum(axis=0) / nk_safe[:, None]
            sq = mc[:, None, :] * (xc[:, None, :] - mu_new[None]) ** 2 + \
                (1 - mc[:, None, :]) * ((p.mu[None] - mu_new[None]) ** 2 + p.sigma[None] ** 2)
            var = (r[:, :, None] * sq).sum(axis=0) / nk_safe[:, None]
            sigma_new = np.maximum(np.sqrt(var), SIGMA_FLOOR)
        cat_new = {}
        for a, table in p.cat.items():
            obs = mask[:, a]
            onehot = np.zeros((x.shape[0], table.shape[1]))
            onehot[obs, x[obs, a].astype(np.int64)] = 1.0
            # unobserved rows contribute their expected one-hot, table[i]
            stats = r.T @ onehot + r[~obs].sum(axis=0)[:, None] * table
            cat_new[a] = stats / np.maximum(stats.sum(axis=1, keepdims=True), 1e-300)
        p = MixtureParams(ds.schema, weights, mu_new, sigma_new, cat_new, p.history)
    else:
        p.history.append(float(row_log_likelihood(p, x, mask).mean()))
    return p


def baseline_missing_nll(p: MixtureParams, ds: Dataset) -> MissingNLL:
    """Held-out NLL given each row's own observed entries (no structure)."""
    x, mask = stack_rows(ds)
    heldout = ~mask & np.isfinite(x)
    log_mis = component_log_probs(p, np.where(heldout, x, 0.0), heldout)
    return conditional_missing_nll(np.log(responsibilities(p, x, mask)), log_mis, heldout)


def gspn_from_mixture(p: MixtureParams, layers: int = 1) -> GspnParams:
    """A GSPN (no shortcut) whose leaf prior and every emission are copied from ``p``.

    With ``layers=1`` and edgeless graphs it defines the same density as ``p``.
    """
    C = p.C
    store = ParamStore()
    store.add("prior0", ad.unconstrain(p.weights, "softmax-vector"), "softmax-vector")
    for l in range(layers + 1):
        if p.schema.continuous:
            store.add(f"mu/{l}", p.mu, "none")
            store.add(f"sigma/{l}", ad.unconstrain(p.sigma, "softplus-positive"), "softplus-positive")
        for a, table in p.cat.items():
            store.add(f"cat/{l}/{a}", ad.unconstrain(table, "softmax-rows"), "softmax-rows")
    for l in range(1, layers + 1):
        store.add(f"theta/{l}", np.zeros((C, C)), "softmax-rows")
    return GspnParams(p.schema, C, layers, False, store)
