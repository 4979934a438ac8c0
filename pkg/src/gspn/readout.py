"""Supervised graph-level readout.

A root mixture over the target Y with ``readout_states`` latent states. Its
prior pools every vertex posterior at heights 1..L:

    pi_r = Omega(sum_u sum_l vartheta[l]^T h[l][u])

with Omega = 1 / (L * N) (mean pooling, vartheta rows on the simplex) or a
softmax (sum pooling, vartheta unconstrained).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamStore, Value
from .graph import Dataset, Graph
from .model import (Batch, GspnConfig, GspnParams, LayerPosteriors, TrainingHistory, forward_values,
                    init_params, minibatches, split_indices, train_unsupervised)

log = logging.getLogger(__name__)


@dataclass
class ReadoutParams:
    pooling: str
    readout_states: int
    num_classes: int
    layers: int
    states: int
    store: ParamStore

    def copy(self) -> "ReadoutParams":
        return ReadoutParams(self.pooling, self.readout_states, self.num_classes, self.layers,
                             self.states, self.store.copy())


def init_readout(cfg: GspnConfig, num_classes: int, rng: np.random.Generator) -> ReadoutParams:
    store = ParamStore()
    constraint = "softmax-rows" if cfg.pooling == "mean" else "none"
    for l in range(1, cfg.layers + 1):
        store.add(f"vartheta/{l}", 0.5 * rng.standard_normal((cfg.states, cfg.readout_states)), constraint)
    store.add("target", rng.standard_normal((cfg.readout_states, num_classes)), "softmax-rows")
    return ReadoutParams(cfg.pooling, cfg.readout_states, num_classes, cfg.layers, cfg.states, store)


def pooled_prior(hs: list, batch: Batch, rp: ReadoutParams, bound) -> Value:
    """(num_graphs, readout_states) prior of the readout mixture."""
    acc = None
    for l in range(1, rp.layers + 1):
        pooled = ad.segment_sum(hs[l], batch.graph_id, batch.num_graphs)
        term = ad.rowmix(pooled, bound[f"vartheta/{l}"])
        acc = term if acc is None else ad.add(acc, term)
    if rp.pooling == "mean":
        sizes = np.bincount(batch.graph_id, minlength=batch.num_graphs).astype(np.float64)
        if np.any(sizes == 0):
            raise ValueError("readout needs graphs with at least one vertex")
        return ad.mul(acc, (1.0 / (rp.layers * sizes))[:, None])
    return ad.softmax(acc, axis=1)


def readout_prior(h_all, rp: ReadoutParams) -> np.ndarray:
    """Readout prior for one graph from its LayerPosteriors (or an (L+1, N, C) array)."""
    h = h_all.h if isinstance(h_all, LayerPosteriors) else np.asarray(h_all)
    n = h.shape[1]
    if n == 0:
        raise ValueError("readout needs a graph with at least one vertex")
    batch = Batch(x=np.zeros((n, 0)), mask=np.zeros((n, 0), bool), src=np.zeros(0, np.int64),
                  dst=np.zeros(0, np.int64), inv_deg=np.zeros(n), is_leaf=np.ones(n),
                  graph_id=np.zeros(n, np.int64), num_graphs=1)
    bound = rp.store.bind()
    return pooled_prior([ad.Value(layer) for layer in h], batch, rp, bound).data[0]


def _log_class_probs(pi_r: Value, target: Value) -> Value:
    """(G, classes) log P(y | graph); the prior is renormalised in log-space."""
    log_pi = ad.log(pi_r)
    joint = ad.add(ad.reshape(log_pi, log_pi.shape + (1,)), ad.reshape(ad.log(target), (1,) + target.shape))
    return ad.sub(ad.logsumexp(joint, axis=1), ad.logsumexp(log_pi, axis=1, keepdims=True))


def class_log_probs(batch: Batch, params: GspnParams, rp: ReadoutParams, bound_g, bound_r) -> Value:
    hs = forward_values(batch, params, bound_g).h
    return _log_class_probs(pooled_prior(hs, batch, rp, bound_r), bound_r["target"])


def graph_predict(g: Graph, params: GspnParams, rp: ReadoutParams) -> np.ndarray:
    """P(y | x_1, ..., x_N) as a vector over classes; argmax is the predicted class."""
    if g.num_vertices == 0:
        raise ValueError("cannot classify an empty graph")
    batch = Batch.from_graphs([g])
    return np.exp(class_log_probs(batch, params, rp, params.store.bind(), rp.store.bind()).data[0])


def predict_dataset(ds: Dataset, params: GspnParams, rp: ReadoutParams, indices=None,
                    chunk: int = 256) -> np.ndarray:
    indices = np.arange(len(ds)) if indices is None else np.asarray(indices)
    bg, br = params.store.bind(), rp.store.bind()
    out = []
    for start in range(0, len(indices), chunk):
        batch = Batch.from_graphs([ds.graphs[i] for i in indices[start:start + chunk]])
        out.append(np.exp(class_log_probs(batch, params, rp, bg, br).data))
    return np.concatenate(out) if out else np.zeros((0, rp.num_classes))


def _scores(ds, indices, params, rp):
    probs = predict_dataset(ds, params, rp, indices)
    y = np.array([ds.graphs[i].label for i in indices])
    acc = float(np.mean(probs.argmax(axis=1) == y)) if len(y) else 0.0
    ll = float(np.mean(np.log(probs[np.arange(len(y)), y]))) if len(y) else 0.0
    return acc, ll


def train_supervised(ds: Dataset, cfg: GspnConfig, mode: str = "joint",
                     params: Optional[GspnParams] = None):
    """Maximise sum_g log P(y_g | x_g).

    ``joint`` updates the GSPN and the readout together; ``frozen`` trains only
    the readout on top of ``params`` (trained unsupervised first when not
    given). Early stopping on validation accuracy, ties broken by validation
    log-likelihood. Returns (GspnParams, ReadoutParams, TrainingHistory).
    """
    if mode not in ("joint", "frozen"):
        raise ValueError(f"mode must be 'joint' or 'frozen', got {mode!r}")
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if any(g.label is None for g in ds.graphs):
        raise ValueError("supervised training needs a label on every graph")
    num_classes = ds.num_classes or (max(g.label for g in ds.graphs) + 1)
    if mode == "frozen" and params is None:
        params, _ = train_unsupervised(ds, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    train_idx, val_idx = split_indices(len(ds), cfg.val_fraction, rng)
    batches = minibatches(train_idx, cfg.batch_size, rng)
    if params is None:
        first = Batch.from_graphs([ds.graphs[i] for i in batches[0]])
        params = init_params(ds.schema, cfg, first.x, first.mask, rng)
    rp = init_readout(cfg, num_classes, rng)
    watch = val_idx if len(val_idx) else train_idx
    g_state, r_state = AdamState(lr=cfg.learning_rate), AdamState(lr=cfg.readout_learning_rate)
    history = TrainingHistory()
    best = (params.copy(), rp.copy())
    best_score = _scores(ds, watch, params, rp)
    history.epochs.append({"epoch": 0, "val_acc": best_score[0], "val_ll": best_score[1]})
    history.best_epoch = 0
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in batches:
            batch = Batch.from_graphs([ds.graphs[i] for i in idx])
            bg, br = params.store.bind(), rp.store.bind()
            logp = class_log_probs(batch, params, rp, bg, br)
            obj = ad.mean(ad.index(logp, (np.arange(len(idx)), batch.labels)))
            obj.backward()
            r_grads = {k: v.grad for k, v in br.leaves.items()}
            store, r_state = ad.adam_step(rp.store, r_grads, r_state)
            rp = ReadoutParams(rp.pooling, rp.readout_states, rp.num_classes, rp.layers, rp.states, store)
            if mode == "joint":
                g_grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                           for k, v in bg.leaves.items()}
                store, g_state = ad.adam_step(params.store, g_grads, g_state)
                params = GspnParams(params.schema, params.states, params.layers, params.shortcut, store)
            history.steps.append(float(obj.data))
        batches = minibatches(train_idx, cfg.batch_size, rng)
        score = _scores(ds, watch, params, rp)
        history.epochs.append({"epoch": epoch, "val_acc": score[0], "val_ll": score[1]})
        log.info("epoch %d val_acc %.4f val_ll %.6f", epoch, *score)
        if score > best_score:
            best, best_score, bad = (params.copy(), rp.copy()), score, 0
            history.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best[0], best[1], history
