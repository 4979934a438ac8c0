"""Tractable queries on a trained GSPN: missing-attribute NLL, imputation, what-if edits."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .graph import Categorical, DatasetError, Graph
from .model import Batch, GspnConfig, GspnParams, emission_log_probs, forward_values


@dataclass
class MissingNLL:
    per_vertex: np.ndarray   # NaN for vertices without held-out entries
    mean: float              # over vertices with held-out entries (headline)
    per_attribute: float     # total NLL / number of held-out entries
    num_entries: int


def held_out(g: Graph) -> np.ndarray:
    """Entries that are unobserved but carry a ground-truth value."""
    return ~g.mask & np.isfinite(g.x)


def conditional_missing_nll(log_post: np.ndarray, log_mis: np.ndarray, heldout: np.ndarray) -> MissingNLL:
    """-log sum_i P(x_mis | Q=i) h(i) per row, from log posteriors and held-out log emissions."""
    nll = -logsumexp(log_mis + log_post, axis=1)
    rows = heldout.any(axis=1)
    per_vertex = np.where(rows, nll, np.nan)
    n_entries = int(heldout.sum())
    if n_entries == 0:
        raise ValueError("no masked entries with known values to evaluate")
    return MissingNLL(per_vertex, float(nll[rows].mean()), float(nll[rows].sum() / n_entries), n_entries)


def missing_nll(g: Graph, params: GspnParams, cfg: Optional[GspnConfig] = None) -> MissingNLL:
    """NLL of the held-out values of each vertex given all observed evidence in its tree.

    The posterior h^L_v is computed from observed entries only; the held-out
    block is then scored under the top-layer emission mixed by h^L_v.
    """
    heldout = held_out(g)
    if not heldout.any():
        raise ValueError("graph has no masked entries with known values")
    batch = Batch.from_graphs([g])
    bound = params.store.bind()
    out = forward_values(batch, params, bound)
    em = params.emission(bound, params.layers)
    log_mis = emission_log_probs(em, np.where(heldout, g.x, 0.0), heldout).data
    with np.errstate(divide="ignore"):
        log_post = np.log(out.h[-1].data)
    return conditional_missing_nll(log_post, log_mis, heldout)


def impute(g: Graph, params: GspnParams, cfg: Optional[GspnConfig] = None) -> np.ndarray:
    """Fill unobserved entries from the top-layer posterior.

    Continuous: sum_i mu_i h^L_v(i) (conditional mean). Categorical: the argmax
    of the posterior-mixed category probabilities sum_i P(.|Q=i) h^L_v(i).
    Observed entries are returned unchanged.
    """
    out = forward_values(Batch.from_graphs([g]), params, params.store.bind())
    h = out.h[-1].data
    em = params.emission(params.constrained(), params.layers)
    filled = g.x.copy()
    cols = params.schema.continuous
    if cols:
        mu = np.asarray(getattr(em.mu, "data", em.mu))
        means = h @ mu
        for j, a in enumerate(cols):
            miss = ~g.mask[:, a]
            filled[miss, a] = means[miss, j]
    for a in params.schema.categorical:
        table = np.asarray(getattr(em.cat[a], "data", em.cat[a]))
        miss = ~g.mask[:, a]
        filled[miss, a] = np.argmax(h[miss] @ table, axis=1)
    return filled


def hop_distances(g: Graph, source: int) -> np.ndarray:
    """Directed hop distance from ``source`` along edges; -1 where unreachable."""
    dist = np.full(g.num_vertices, -1, dtype=np.int64)
    out_adj: list = [[] for _ in range(g.num_vertices)]
    for u, v in g.edges:
        out_adj[u].append(v)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in out_adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def perturbation_query(g: Graph, params: GspnParams, cfg: Optional[GspnConfig], vertex: int,
                       attribute: int, value: float) -> np.ndarray:
    """Per-vertex change in pseudo log-likelihood after setting one attribute to ``value``.

    The edited entry is treated as observed. Vertices more than L hops
    downstream of the edit are unaffected, bit for bit.
    """
    schema = params.schema
    if not 0 <= vertex < g.num_vertices:
        raise IndexError(f"vertex {vertex} out of range")
    if not 0 <= attribute < schema.d:
        raise IndexError(f"attribute {attribute} out of range")
    if not schema.check_value(attribute, value):
        raise DatasetError(f"value {value!r} does not conform to {schema.attributes[attribute].to_json()}")
    x = g.x.copy()
    mask = g.mask.copy()
    x[vertex, attribute] = value
    mask[vertex, attribute] = True
    edited = g.replace(x=x, mask=mask)
    bound = params.store.bind()
    before = forward_values(Batch.from_graphs([g]), params, bound).pll.data
    after = forward_values(Batch.from_graphs([edited]), params, bound).pll.data
    return after - before
