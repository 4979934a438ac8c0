"""Naive Bayes GSPN: a hierarchy of mixture SPNs over graph-induced computational trees.

For every vertex v and height l, the posterior h[l][v] over C latent states is
computed by Bayes' rule from a prior and the vertex's (observed) attributes.
At height 0 the prior is the shared leaf prior; above it, the prior is the
average over in-neighbours u of theta[l]^T h[l-1][u], or the leaf prior again
when v has no in-neighbours. Trees of height l reuse all height l-1 results,
so one pass costs O(L * (|E| + N * C^2)).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, BoundParams, ParamStore, Value
from .circuit import EmissionParams
from .graph import AttributeSchema, Dataset, Graph
from .init import init_emissions

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gspn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class GspnConfig:
    layers: int = 2
    states: int = 5
    shortcut: bool = False
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    val_fraction: float = 0.1
    # supervised readout
    readout_states: int = 8
    pooling: str = "mean"
    readout_learning_rate: float = 0.05

    def __post_init__(self):
        if self.layers < 1 or self.states < 1:
            raise ValueError("layers and states must be >= 1")
        if self.shortcut and self.layers < 2:
            raise ValueError("shortcut emissions need at least 2 layers")
        if self.pooling not in ("mean", "sum"):
            raise ValueError(f"pooling must be 'mean' or 'sum', got {self.pooling!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GspnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- parameters

@dataclass
class GspnParams:
    schema: AttributeSchema
    states: int
    layers: int
    shortcut: bool
    store: ParamStore

    @property
    def emission_layers(self) -> list[int]:
        top = self.layers if self.shortcut else self.layers + 1
        return list(range(top))

    def emission(self, bound, layer: int) -> EmissionParams:
        """Emission of height ``layer`` from bound Values (or plain arrays via ``constrained``)."""
        if self.shortcut and layer == self.layers:
            return shortcut_emission([self.emission(bound, l) for l in range(1, self.layers)])
        cat = {a: bound[f"cat/{layer}/{a}"] for a in self.schema.categorical}
        if self.schema.continuous:
            return EmissionParams(self.schema, bound[f"mu/{layer}"], bound[f"sigma/{layer}"], cat)
        empty = np.zeros((self.states, 0))
        return EmissionParams(self.schema, empty, empty, cat)

    def constrained(self) -> dict:
        return {k: self.store.constrained(k) for k in self.store.names()}

    def copy(self) -> "GspnParams":
        return GspnParams(self.schema, self.states, self.layers, self.shortcut, self.store.copy())


def shortcut_emission(emissions: Sequence[EmissionParams]) -> EmissionParams:
    """Top-layer emission as the average of the given per-layer emissions.

    Gaussians: mean of the means, variance sum(sigma_l^2) / n^2 (the variance of
    the average of n independent Gaussians). Categoricals: mean of the tables.
    """
    n = len(emissions)
    if n < 1:
        raise ValueError("shortcut emission needs at least one lower layer (layers >= 2)")
    first = emissions[0]
    mu = emissions[0].mu
    var = ad.square(ad.as_value(emissions[0].sigma))
    for e in emissions[1:]:
        mu = ad.add(mu, e.mu)
        var = ad.add(var, ad.square(ad.as_value(e.sigma)))
    mu = ad.mul(mu, 1.0 / n)
    sigma = ad.mul(ad.sqrt(var), 1.0 / n)
    cat = {}
    for a in first.cat:
        acc = first.cat[a]
        for e in emissions[1:]:
            acc = ad.add(acc, e.cat[a])
        cat[a] = ad.mul(acc, 1.0 / n)
    return EmissionParams(first.schema, mu, sigma, cat)


def init_params(schema: AttributeSchema, cfg: GspnConfig, x: np.ndarray, mask: np.ndarray,
                rng: np.random.Generator) -> GspnParams:
    """Emissions from k-means / perturbed frequencies on the given rows; theta biased to the identity."""
    C, L = cfg.states, cfg.layers
    store = ParamStore()
    store.add("prior0", np.zeros(C), "softmax-vector")
    mu, sigma, cat = init_emissions(schema, x, mask, C, rng)
    params = GspnParams(schema, C, L, cfg.shortcut, store)
    for l in params.emission_layers:
        if schema.continuous:
            store.add(f"mu/{l}", mu, "none")
            store.add(f"sigma/{l}", ad.unconstrain(sigma, "softplus-positive"), "softplus-positive")
        for a, table in cat.items():
            store.add(f"cat/{l}/{a}", np.log(table), "softmax-rows")
    for l in range(1, L + 1):
        store.add(f"theta/{l}", np.eye(C) + 0.01 * rng.standard_normal((C, C)), "softmax-rows")
    return params


def random_params(schema: AttributeSchema, cfg: GspnConfig, rng: np.random.Generator,
                  scale: float = 1.0) -> GspnParams:
    """Parameters with random raw values; used for property and gradient tests."""
    C, L = cfg.states, cfg.layers
    store = ParamStore()
    store.add("prior0", scale * rng.standard_normal(C), "softmax-vector")
    params = GspnParams(schema, C, L, cfg.shortcut, store)
    nc = len(schema.continuous)
    for l in params.emission_layers:
        if nc:
            store.add(f"mu/{l}", 2 * scale * rng.standard_normal((C, nc)))
            store.add(f"sigma/{l}", 0.5 * scale * rng.standard_normal((C, nc)), "softplus-positive")
        for a in schema.categorical:
            store.add(f"cat/{l}/{a}", scale * rng.standard_normal((C, schema.attributes[a].arity)),
                      "softmax-rows")
    for l in range(1, L + 1):
        store.add(f"theta/{l}", scale * rng.standard_normal((C, C)), "softmax-rows")
    return params


# --------------------------------------------------------------------------- batching

@dataclass
class Batch:
    """Disjoint union of graphs, laid out for vectorised message passing."""

    x: np.ndarray
    mask: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    inv_deg: np.ndarray
    is_leaf: np.ndarray
    graph_id: np.ndarray
    num_graphs: int
    labels: Optional[np.ndarray] = None

    @property
    def num_vertices(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "Batch":
        sizes = np.array([g.num_vertices for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]) if len(graphs) else np.zeros(0, np.int64)
        d = graphs[0].d if graphs else 0
        x = np.concatenate([g.x for g in graphs]) if graphs else np.zeros((0, d))
        mask = np.concatenate([g.mask for g in graphs]) if graphs else np.zeros((0, d), bool)
        edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]) if graphs \
            else np.zeros((0, 2), np.int64)
        n = int(sizes.sum())
        deg = np.bincount(edges[:, 1], minlength=n).astype(np.float64)
        labels = None
        if graphs and all(g.label is not None for g in graphs):
            labels = np.array([g.label for g in graphs], dtype=np.int64)
        return cls(x=x, mask=mask, src=edges[:, 0].copy(), dst=edges[:, 1].copy(),
                   inv_deg=np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0),
                   is_leaf=(deg == 0).astype(np.float64),
                   graph_id=np.repeat(np.arange(len(graphs)), sizes), num_graphs=len(graphs),
                   labels=labels)


# --------------------------------------------------------------------------- forward pass

@dataclass
class ForwardResult:
    h: list            # per height: (N, C) Value of posteriors
    log_prior: list    # per height: (N, C) Value of log priors
    log_emission: list  # per height: (N, C) Value of sum_a log P(x_a | state), observed a only
    pll: Value         # (N,) per-vertex root log-likelihood


def emission_log_probs(em: EmissionParams, x: np.ndarray, mask: np.ndarray) -> Value:
    table = em.log_table(x, mask)
    acc = table[0]
    for t in table[1:]:
        acc = ad.add(acc, t)
    return acc


def aggregate_prior_values(theta: Value, h_prev: Value, batch: Batch, prior0: Value) -> Value:
    """Per-vertex prior at the next height; leaves (no in-neighbours) get ``prior0``."""
    msg = ad.rowmix(h_prev, theta)
    summed = ad.segment_sum(ad.take(msg, batch.src, axis=0), batch.dst, batch.num_vertices)
    agg = ad.mul(summed, batch.inv_deg[:, None])
    return ad.add(agg, ad.mul(batch.is_leaf[:, None], ad.reshape(prior0, (1, -1))))


def _normalised_log_joint(log_em: Value, log_prior: Value) -> tuple[Value, Value]:
    """(per-vertex log marginal, posterior). The prior is renormalised in log-space so an
    all-unobserved vertex scores exactly 0."""
    joint = ad.add(log_em, log_prior)
    ll = ad.sub(ad.logsumexp(joint, axis=1), ad.logsumexp(log_prior, axis=1))
    return ll, ad.softmax(joint, axis=1)


def forward_values(batch: Batch, params: GspnParams, bound) -> ForwardResult:
    prior0 = bound["prior0"]
    log_prior0 = ad.reshape(ad.log(prior0), (1, -1))
    hs, lps, lems = [], [], []
    ll = None
    for l in range(params.layers + 1):
        em = params.emission(bound, l)
        log_em = emission_log_probs(em, batch.x, batch.mask)
        if l == 0:
            log_prior = ad.add(np.zeros((batch.num_vertices, 1)), log_prior0)
        else:
            log_prior = ad.log(aggregate_prior_values(bound[f"theta/{l}"], hs[-1], batch, prior0))
        ll, h = _normalised_log_joint(log_em, log_prior)
        hs.append(h)
        lps.append(log_prior)
        lems.append(log_em)
    return ForwardResult(hs, lps, lems, ll)


@dataclass
class LayerPosteriors:
    h: np.ndarray        # (L+1, N, C)
    prior: np.ndarray    # (L+1, N, C)
    pll: np.ndarray      # (N,)


def forward_pass(g: Graph, params: GspnParams, cfg: Optional[GspnConfig] = None) -> LayerPosteriors:
    batch = Batch.from_graphs([g])
    out = forward_values(batch, params, params.store.bind())
    return LayerPosteriors(np.stack([h.data for h in out.h]),
                           np.exp(np.stack([p.data for p in out.log_prior])), out.pll.data.copy())


def aggregate_prior(theta: np.ndarray, child_posteriors: Sequence[np.ndarray]) -> np.ndarray:
    """pi(i) = (1/T) sum_t sum_k theta[k, i] h_t(k) for a non-empty set of children."""
    child_posteriors = np.atleast_2d(np.asarray(child_posteriors, dtype=np.float64))
    if child_posteriors.shape[0] == 0 or child_posteriors.size == 0:
        raise ValueError("aggregate_prior needs at least one child; in-degree-0 vertices are leaves")
    msgs = ad.rowmix(child_posteriors, np.asarray(theta, dtype=np.float64))
    total = ad.segment_sum(msgs, np.zeros(len(child_posteriors), dtype=np.int64), 1)
    return total.data[0] / len(child_posteriors)


def pseudo_log_likelihood(g: Graph, params: GspnParams, cfg: Optional[GspnConfig] = None):
    """(per-vertex log-likelihood vector, total) of the pseudo log-likelihood objective."""
    pll = forward_pass(g, params, cfg).pll
    return pll, float(pll.sum())


def vertex_embeddings(g: Graph, params: GspnParams, cfg: Optional[GspnConfig] = None) -> np.ndarray:
    """Row v is [h^0_v, ..., h^L_v]."""
    h = forward_pass(g, params, cfg).h
    return np.concatenate(list(h), axis=1)


# --------------------------------------------------------------------------- training

@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: int = -1

    def as_dict(self) -> dict:
        return asdict(self)


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    """(train, validation) index arrays; no validation split below 10 graphs."""
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n >= 10 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def mean_pll(ds: Dataset, indices, params: GspnParams, chunk: int = 512) -> float:
    """Mean per-vertex pseudo log-likelihood over the given graphs."""
    total, count = 0.0, 0
    bound = params.store.bind()
    for start in range(0, len(indices), chunk):
        batch = Batch.from_graphs([ds.graphs[i] for i in indices[start:start + chunk]])
        if batch.num_vertices == 0:
            continue
        total += float(forward_values(batch, params, bound).pll.data.sum())
        count += batch.num_vertices
    return total / max(count, 1)


def pll_objective(batch: Batch, params: GspnParams, bound) -> Value:
    return ad.mean(forward_values(batch, params, bound).pll)


def train_unsupervised(ds: Dataset, cfg: GspnConfig, params: Optional[GspnParams] = None):
    """Adam ascent on the mean per-vertex pseudo log-likelihood, with early stopping.

    Returns (best parameters, TrainingHistory). Early stopping watches the
    validation split (``cfg.val_fraction`` of the graphs) or, for datasets under
    10 graphs, the training objective.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not any(g.mask.any() for g in ds.graphs):
        raise ValueError("dataset has no observed attribute values; nothing to learn from")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(len(ds), cfg.val_fraction, rng)
    batches = minibatches(train_idx, cfg.batch_size, rng)
    if params is None:
        first = Batch.from_graphs([ds.graphs[i] for i in batches[0]])
        params = init_params(ds.schema, cfg, first.x, first.mask, rng)
    watch_idx = val_idx if len(val_idx) else train_idx
    state = AdamState(lr=cfg.learning_rate)
    history = TrainingHistory()
    best, best_score, bad_epochs = params.copy(), mean_pll(ds, watch_idx, params), 0
    history.best_epoch = 0
    history.epochs.append({"epoch": 0, "train_pll": mean_pll(ds, train_idx, params),
                           "val_pll": best_score if len(val_idx) else None})
    for epoch in range(1, cfg.epochs + 1):
        for idx in batches:
            batch = Batch.from_graphs([ds.graphs[i] for i in idx])
            bound = params.store.bind()
            obj = pll_objective(batch, params, bound)
            grads = ad.grad(obj, bound)
            store, state = ad.adam_step(params.store, grads, state)
            params = GspnParams(params.schema, params.states, params.layers, params.shortcut, store)
            history.steps.append(float(obj.data))
        batches = minibatches(train_idx, cfg.batch_size, rng)
        train_score = mean_pll(ds, train_idx, params)
        score = mean_pll(ds, val_idx, params) if len(val_idx) else train_score
        history.epochs.append({"epoch": epoch, "train_pll": train_score,
                               "val_pll": score if len(val_idx) else None})
        log.info("epoch %d train_pll %.6f watch_pll %.6f", epoch, train_score, score)
        if score > best_score:
            best, best_score, bad_epochs = params.copy(), score, 0
            history.best_epoch = epoch
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    return best, history


# --------------------------------------------------------------------------- checkpoints

def _store_to_json(store: ParamStore) -> dict:
    return {name: {"constraint": store.constraints[name], "shape": list(store.raw[name].shape),
                   "raw": store.raw[name].ravel().tolist(),
                   "value": store.constrained(name).ravel().tolist()}
            for name in store.names()}


def _store_from_json(obj: dict) -> ParamStore:
    store = ParamStore()
    for name, item in obj.items():
        store.add(name, np.array(item["raw"], dtype=np.float64).reshape(item["shape"]), item["constraint"])
    return store


def save_checkpoint(path, params: GspnParams, cfg: GspnConfig, readout=None) -> None:
    """JSON checkpoint: schema, config and every parameter (raw and constrained)."""
    obj = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "schema": params.schema.to_json(), "config": asdict(cfg),
           "params": _store_to_json(params.store)}
    if readout is not None:
        obj["readout"] = {"pooling": readout.pooling, "readout_states": readout.readout_states,
                          "num_classes": readout.num_classes, "params": _store_to_json(readout.store)}
    Path(path).write_text(json.dumps(obj), encoding="utf-8")


def load_checkpoint(path):
    """(GspnParams, GspnConfig, ReadoutParams or None); raw values round-trip bit-exactly."""
    from .readout import ReadoutParams

    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a GSPN checkpoint")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {obj.get('version')}")
    cfg = GspnConfig.from_dict(obj["config"])
    schema = AttributeSchema.from_json(obj["schema"])
    params = GspnParams(schema, cfg.states, cfg.layers, cfg.shortcut, _store_from_json(obj["params"]))
    readout = None
    if "readout" in obj:
        r = obj["readout"]
        readout = ReadoutParams(r["pooling"], r["readout_states"], r["num_classes"], cfg.layers,
                                cfg.states, _store_from_json(r["params"]))
    return params, cfg, readout
