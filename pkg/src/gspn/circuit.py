"""Probabilistic circuits over the attributes of a single vertex.

A circuit is a list of units in topological order (children before parents,
root last). Leaves are indexed by (attribute, state): the leaf distribution is
the emission of that attribute under mixture state ``state``. Evaluation is in
log-space, vectorised over rows, and marginalises unobserved attributes by
giving their leaves the value log 1 = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .graph import AttributeSchema, Categorical


class ImpossibleEvidence(ValueError):
    """The evidence has probability zero under the model."""


@dataclass(frozen=True)
class Leaf:
    attribute: int
    state: int


@dataclass(frozen=True)
class Product:
    children: tuple


@dataclass(frozen=True)
class Sum:
    children: tuple
    slot: int


Unit = Union[Leaf, Product, Sum]


@dataclass
class Circuit:
    units: list
    weights: dict = field(default_factory=dict)
    scopes: list = field(init=False)

    def __post_init__(self):
        if not self.units:
            raise ValueError("circuit has no units")
        scopes = []
        has_parent = [False] * len(self.units)
        for uid, unit in enumerate(self.units):
            if isinstance(unit, Leaf):
                scopes.append(frozenset([unit.attribute]))
                continue
            if not unit.children:
                raise ValueError(f"unit {uid} has no children")
            for c in unit.children:
                if not 0 <= c < uid:
                    raise ValueError(f"unit {uid}: child {c} breaks topological order")
                has_parent[c] = True
            scopes.append(frozenset().union(*(scopes[c] for c in unit.children)))
            if isinstance(unit, Sum):
                w = self.weights.get(unit.slot)
                if w is not None and len(w) != len(unit.children):
                    raise ValueError(f"sum unit {uid}: weight slot {unit.slot} has {len(w)} entries "
                                     f"for {len(unit.children)} children")
        orphans = [u for u, p in enumerate(has_parent[:-1]) if not p]
        if orphans:
            raise ValueError(f"units {orphans} are not reachable from the root")
        self.scopes = scopes

    @property
    def root(self) -> int:
        return len(self.units) - 1

    def sum_units(self) -> list[int]:
        return [u for u, unit in enumerate(self.units) if isinstance(unit, Sum)]


def build_naive_bayes(schema: AttributeSchema, C: int) -> Circuit:
    """One root sum over C products; product i factorises all d attributes under state i."""
    if C < 1:
        raise ValueError("C must be positive")
    units: list = []
    products = []
    for i in range(C):
        leaves = []
        for a in range(schema.d):
            leaves.append(len(units))
            units.append(Leaf(a, i))
        products.append(len(units))
        units.append(Product(tuple(leaves)))
    units.append(Sum(tuple(products), 0))
    return Circuit(units, {0: np.full(C, 1.0 / C)})


def check_smooth(c: Circuit) -> bool:
    return all(len({c.scopes[ch] for ch in c.units[u].children}) == 1 for u in c.sum_units())


def check_decomposable(c: Circuit) -> bool:
    for unit in c.units:
        if isinstance(unit, Product):
            seen: set = set()
            for ch in unit.children:
                if seen & c.scopes[ch]:
                    return False
                seen |= c.scopes[ch]
    return True


# --------------------------------------------------------------------------- emissions

@dataclass
class EmissionParams:
    """Per-state emission parameters.

    ``mu``/``sigma`` are (C, n_continuous) in the order of ``schema.continuous``;
    ``cat`` maps a categorical attribute index to its (C, arity) probability table.
    Entries may be numpy arrays or autodiff Values.
    """

    schema: AttributeSchema
    mu: object
    sigma: object
    cat: dict

    @property
    def C(self) -> int:
        if self.schema.continuous:
            return np.shape(_data(self.mu))[0]
        return np.shape(_data(next(iter(self.cat.values()))))[0]

    def validate(self, atol: float = 1e-9) -> None:
        if self.schema.continuous and np.any(_data(self.sigma) <= 0):
            raise ValueError("emission sigma must be positive")
        for a, table in self.cat.items():
            t = _data(table)
            if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=atol):
                raise ValueError(f"categorical emission for attribute {a} is not on the simplex")

    def log_table(self, x: np.ndarray, mask: np.ndarray) -> list:
        """Per attribute, an (N, C) Value of log P(x_a | state); unobserved entries are 0."""
        out: list = [None] * self.schema.d
        if self.schema.continuous:
            cols = self.schema.continuous
            xc = np.where(mask[:, cols], x[:, cols], 0.0)
            lp = ad.gaussian_log_pdf(xc[:, None, :], ad.as_value(self.mu)[None], ad.as_value(self.sigma)[None])
            lp = ad.mul(lp, mask[:, None, cols].astype(np.float64))
            for j, a in enumerate(cols):
                out[a] = lp[:, :, j]
        for a in self.schema.categorical:
            idx = np.where(mask[:, a], x[:, a], 0).astype(np.int64)
            with np.errstate(divide="ignore"):
                logt = ad.log(ad.as_value(self.cat[a]))
            lp = ad.transpose(ad.take(logt, idx, axis=1))
            out[a] = ad.where(mask[:, a][:, None], lp, 0.0)
        return out


def _data(v):
    return v.data if isinstance(v, Value) else np.asarray(v)


def _rows(x, mask):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if x.shape != mask.shape:
        raise ValueError("x and mask shapes differ")
    return x, mask


# --------------------------------------------------------------------------- evaluation

def _evaluate(c: Circuit, table: list, log_weights: dict, renormalise: bool = True) -> list:
    """Bottom-up log values of every unit.

    With ``renormalise`` each sum subtracts the log total of its weights, so
    weights that sum to 1 only up to round-off still give exactly 0 for a row
    with no evidence.
    """
    vals: list = []
    for uid, unit in enumerate(c.units):
        if isinstance(unit, Leaf):
            vals.append(table[unit.attribute][:, unit.state])
        elif isinstance(unit, Product):
            acc = vals[unit.children[0]]
            for ch in unit.children[1:]:
                acc = ad.add(acc, vals[ch])
            vals.append(acc)
        else:
            kids = ad.stack([vals[ch] for ch in unit.children], axis=1)
            lw = log_weights[uid]
            out = ad.logsumexp(ad.add(kids, lw), axis=1)
            if renormalise:
                out = ad.sub(out, ad.logsumexp(lw, axis=lw.data.ndim - 1))
            vals.append(out)
    return vals


def _log_weights(c: Circuit, prior, n: int) -> dict:
    lw = {}
    for uid in c.sum_units():
        unit = c.units[uid]
        w = prior if uid == c.root and prior is not None else c.weights.get(unit.slot)
        if w is None:
            raise ValueError(f"sum unit {uid}: no weights for slot {unit.slot}")
        wd = _data(w)
        if np.any(wd < 0) or abs(float(wd.sum()) - 1.0) > 1e-9:
            raise ValueError(f"sum unit {uid}: weights are not on the simplex")
        with np.errstate(divide="ignore"):
            lw[uid] = ad.log(ad.as_value(w))
    return lw


def _raise_impossible(c, table, ll, mask):
    row = int(np.flatnonzero(~np.isfinite(ll))[0])
    for a, lp in enumerate(table):
        if mask[row, a] and np.all(~np.isfinite(lp.data[row])):
            raise ImpossibleEvidence(f"row {row}, attribute {a}: observed value has zero probability")
    raise ImpossibleEvidence(f"row {row}: evidence has zero probability")


def log_likelihood(c: Circuit, em: EmissionParams, prior, x, mask) -> Value:
    """log P(x_obs) per row; the root sum unit's weights are taken from ``prior``."""
    x, mask = _rows(x, mask)
    table = em.log_table(x, mask)
    lw = _log_weights(c, prior, x.shape[0])
    return _evaluate(c, table, lw)[c.root]


def sum_posteriors(c: Circuit, em: EmissionParams, prior, x, mask, unit: Optional[int] = None) -> np.ndarray:
    """Posterior over the children of a sum unit (default: the root), one row per input row.

    Computed by a single backward pass: the posterior weight of child i is
    d log P(x) / d log w_i, renormalised for non-root units.
    """
    x, mask = _rows(x, mask)
    unit = c.root if unit is None else unit
    if not isinstance(c.units[unit], Sum):
        raise ValueError(f"unit {unit} is not a sum unit")
    table = [ad.Value(t.data) for t in em.log_table(x, mask)]
    lw = _log_weights(c, prior, x.shape[0])
    target = Value(np.broadcast_to(lw[unit].data, (x.shape[0], len(c.units[unit].children))).copy())
    lw[unit] = target
    ll = _evaluate(c, table, lw, renormalise=False)[c.root]
    if not np.all(np.isfinite(ll.data)):
        _raise_impossible(c, table, ll.data, mask)
    ad.sum(ll).backward()
    g = target.grad
    return g / g.sum(axis=1, keepdims=True)
