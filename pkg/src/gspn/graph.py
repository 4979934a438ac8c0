"""Graph and dataset data model, JSON ingestion, masking and synthetic generators."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class DatasetError(ValueError):
    """Raised when a dataset file or object violates the data model."""


@dataclass(frozen=True)
class Categorical:
    arity: int

    def __post_init__(self):
        if int(self.arity) != self.arity or self.arity < 2:
            raise DatasetError(f"categorical arity must be an integer >= 2, got {self.arity}")

    def to_json(self) -> dict:
        return {"kind": "categorical", "arity": int(self.arity)}


@dataclass(frozen=True)
class Continuous:
    def to_json(self) -> dict:
        return {"kind": "continuous"}


AttributeKind = Union[Categorical, Continuous]


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.attributes:
            raise DatasetError("schema needs at least one attribute")
        for kind in self.attributes:
            if not isinstance(kind, (Categorical, Continuous)):
                raise DatasetError(f"unknown attribute kind {kind!r}")

    @property
    def d(self) -> int:
        return len(self.attributes)

    @property
    def continuous(self) -> list[int]:
        return [a for a, k in enumerate(self.attributes) if isinstance(k, Continuous)]

    @property
    def categorical(self) -> list[int]:
        return [a for a, k in enumerate(self.attributes) if isinstance(k, Categorical)]

    def to_json(self) -> list:
        return [k.to_json() for k in self.attributes]

    @classmethod
    def from_json(cls, obj) -> "AttributeSchema":
        if not isinstance(obj, list):
            raise DatasetError("schema must be a list of attribute kinds")
        kinds = []
        for a, item in enumerate(obj):
            kind = item.get("kind") if isinstance(item, dict) else None
            if kind == "categorical":
                kinds.append(Categorical(item.get("arity")))
            elif kind == "continuous":
                kinds.append(Continuous())
            else:
                raise DatasetError(f"schema attribute {a}: unknown kind {kind!r}")
        return cls(tuple(kinds))

    def check_value(self, a: int, value: float) -> bool:
        kind = self.attributes[a]
        if isinstance(kind, Categorical):
            return float(value).is_integer() and 0 <= value < kind.arity
        return math.isfinite(value)


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed attributed graph.

    ``x`` holds categorical values as float-encoded category indices. A False
    entry in ``mask`` marks the attribute as unobserved; the value underneath
    may still carry a held-out ground truth (NaN when none is known).
    """

    num_vertices: int
    edges: np.ndarray
    x: np.ndarray
    mask: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        # private copies: freezing them must not freeze the caller's arrays
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        x = np.array(self.x, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        n = int(self.num_vertices)
        if x.ndim != 2 or x.shape[0] != n:
            raise DatasetError(f"attribute matrix must have {n} rows, got shape {x.shape}")
        if mask.shape != x.shape:
            raise DatasetError("mask shape differs from attribute shape")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise DatasetError(f"edge endpoint out of range [0, {n})")
            if np.any(edges[:, 0] == edges[:, 1]):
                v = int(edges[edges[:, 0] == edges[:, 1]][0, 0])
                raise DatasetError(f"self-loop on vertex {v}")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise DatasetError("duplicate edge")
        for arr in (edges, x, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "num_vertices", n)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mask", mask)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_vertices == other.num_vertices
            and self.label == other.label
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.x, other.x, equal_nan=True)
        )

    def replace(self, **changes) -> "Graph":
        fields = dict(num_vertices=self.num_vertices, edges=self.edges, x=self.x,
                      mask=self.mask, label=self.label)
        fields.update(changes)
        return Graph(**fields)

    def validate(self, schema: AttributeSchema, index: int = 0) -> None:
        if self.d != schema.d:
            raise DatasetError(f"graph {index}: expected {schema.d} attributes, got {self.d}")
        for a, kind in enumerate(schema.attributes):
            col, obs = self.x[:, a], self.mask[:, a]
            bad = obs & ~np.isfinite(col)
            if isinstance(kind, Categorical):
                known = np.isfinite(col)
                bad |= known & ((col < 0) | (col >= kind.arity) | (col != np.round(col)))
            if bad.any():
                v = int(np.flatnonzero(bad)[0])
                raise DatasetError(
                    f"graph {index}, vertex {v}, attribute {a}: invalid value {col[v]!r} "
                    f"for {kind.to_json()}")


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: AttributeSchema
    graphs: tuple = field(default_factory=tuple)
    num_classes: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.num_classes is not None and self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        for i, g in enumerate(self.graphs):
            g.validate(self.schema, i)
            if g.label is not None and self.num_classes is not None:
                if not 0 <= g.label < self.num_classes:
                    raise DatasetError(f"graph {i}: label {g.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.graphs)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.schema == other.schema and self.num_classes == other.num_classes
                and len(self.graphs) == len(other.graphs)
                and all(a == b for a, b in zip(self.graphs, other.graphs)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.schema, [self.graphs[i] for i in indices], self.num_classes)

    def stats(self) -> dict:
        """Summary counts, including vertices whose attributes are all unobserved."""
        n_vertices = sum(g.num_vertices for g in self.graphs)
        fully_missing = sum(int((~g.mask).all(axis=1).sum()) for g in self.graphs)
        n_missing = sum(int((~g.mask).sum()) for g in self.graphs)
        return {"graphs": len(self.graphs), "vertices": n_vertices,
                "edges": sum(len(g.edges) for g in self.graphs),
                "missing_entries": n_missing, "fully_missing_vertices": fully_missing}


def in_neighbors(g: Graph, v: int) -> list[int]:
    """Sorted ids of all u with an edge u -> v."""
    if not 0 <= v < g.num_vertices:
        raise IndexError(f"vertex {v} out of range [0, {g.num_vertices})")
    return sorted(int(u) for u in g.edges[g.edges[:, 1] == v, 0])


# --------------------------------------------------------------------------- JSON

def _parse_graph(obj, schema: AttributeSchema, index: int) -> Graph:
    if not isinstance(obj, dict) or "n" not in obj:
        raise DatasetError(f"graph {index}: expected an object with key 'n'")
    n = obj["n"]
    if not isinstance(n, int) or n < 0:
        raise DatasetError(f"graph {index}: 'n' must be a non-negative integer")
    edges = [tuple(e) for e in obj.get("edges", [])]
    for u, v in obj.get("undirected_edges", []) or []:
        edges.append((u, v))
        edges.append((v, u))
    rows = obj.get("x", [])
    if len(rows) != n:
        raise DatasetError(f"graph {index}: 'x' has {len(rows)} rows, expected {n}")
    x = np.full((n, schema.d), np.nan)
    for v, row in enumerate(rows):
        if len(row) != schema.d:
            raise DatasetError(f"graph {index}, vertex {v}: expected {schema.d} values, got {len(row)}")
        for a, val in enumerate(row):
            if val is not None:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise DatasetError(f"graph {index}, vertex {v}, attribute {a}: non-numeric value {val!r}")
                x[v, a] = float(val)
    if "mask" in obj:
        mask = np.asarray(obj["mask"], dtype=bool)
        if mask.shape != x.shape:
            raise DatasetError(f"graph {index}: 'mask' shape {mask.shape} differs from 'x' {x.shape}")
    else:
        mask = ~np.isnan(x)
    try:
        g = Graph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2), x, mask, obj.get("y"))
    except DatasetError as exc:
        raise DatasetError(f"graph {index}: {exc}") from None
    return g


def dataset_from_json(obj) -> Dataset:
    if not isinstance(obj, dict) or "schema" not in obj:
        raise DatasetError("dataset must be an object with a 'schema' key")
    schema = AttributeSchema.from_json(obj["schema"])
    graphs = [_parse_graph(g, schema, i) for i, g in enumerate(obj.get("graphs", []))]
    ds = Dataset(schema, graphs, obj.get("num_classes"))
    if ds.stats()["fully_missing_vertices"]:
        warnings.warn(f"{ds.stats()['fully_missing_vertices']} vertices have every attribute missing")
    return ds


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise DatasetError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line.strip()}") from None
    return dataset_from_json(obj)


def _json_value(val: float, kind) -> Optional[float]:
    if math.isnan(val):
        return None
    return int(val) if isinstance(kind, Categorical) else float(val)


def dataset_to_json(ds: Dataset) -> dict:
    graphs = []
    for g in ds.graphs:
        item = {"n": g.num_vertices, "edges": g.edges.tolist(),
                "x": [[_json_value(v, k) for v, k in zip(row, ds.schema.attributes)] for row in g.x]}
        if not np.array_equal(g.mask, ~np.isnan(g.x)):
            item["mask"] = g.mask.astype(int).tolist()
        if g.label is not None:
            item["y"] = g.label
        graphs.append(item)
    out = {"schema": ds.schema.to_json(), "graphs": graphs}
    if ds.num_classes is not None:
        out["num_classes"] = ds.num_classes
    return out


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(ds)), encoding="utf-8")


# --------------------------------------------------------------------------- masking

def gamma_marsaglia_tsang(rng: np.random.Generator, shape: float, rate: float) -> float:
    """One Gamma(shape, rate) draw by Marsaglia & Tsang (2000).

    Uses only ``rng.standard_normal`` and ``rng.random`` so the stream is
    reproducible; shape < 1 is handled with the U**(1/shape) boost.
    """
    if shape <= 0 or rate <= 0:
        raise ValueError("shape and rate must be positive")
    boost = 1.0
    if shape < 1.0:
        boost = rng.random() ** (1.0 / shape)
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        z = rng.standard_normal()
        v = 1.0 + c * z
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * z ** 4 or math.log(u) < 0.5 * z * z + d * (1.0 - v + math.log(v)):
            return boost * d * v / rate


def masked_count(p: float, d: int) -> int:
    return int(math.floor(min(max(p, 0.0), 1.0) * d))


def apply_missing_mask(ds: Dataset, concentration: float, rate: float, seed: int) -> Dataset:
    """Hide floor(p * d) attributes per vertex, with p ~ Gamma(concentration, rate) clamped to [0, 1].

    Attribute values are left in place as held-out ground truth.
    """
    if concentration <= 0 or rate <= 0:
        raise ValueError("concentration and rate must be positive")
    rng = np.random.default_rng(seed)
    d = ds.schema.d
    graphs = []
    for g in ds.graphs:
        mask = g.mask.copy()
        for v in range(g.num_vertices):
            k = masked_count(gamma_marsaglia_tsang(rng, concentration, rate), d)
            if k:
                mask[v, rng.permutation(d)[:k]] = False
        graphs.append(g.replace(mask=mask))
    return Dataset(ds.schema, graphs, ds.num_classes)


# --------------------------------------------------------------------------- synthetic data

def synth_community_graphs(num_graphs: int, vertices_per_graph: int, num_communities: int,
                           noise: float, seed: int, *, num_attributes: int = 1,
                           p_in: float = 0.3, p_out: float = 0.005,
                           dominance: float = 0.75) -> Dataset:
    """Graphs whose vertex attributes depend on the communities of their in-neighbors.

    Each graph picks a dominant community; each vertex joins it with probability
    ``dominance`` and otherwise a uniformly random community. Undirected edges
    appear with probability ``p_in`` inside a community and ``p_out`` across.
    Every attribute of v is drawn from N(mean community id of v's in-neighbors,
    noise**2); vertices without in-neighbors use their own community id. The
    graph label is the majority community (ties go to the smallest id).
    """
    if min(num_graphs, vertices_per_graph, num_communities, num_attributes) < 1 or noise < 0:
        raise ValueError("counts must be positive and noise non-negative")
    rng = np.random.default_rng(seed)
    n = vertices_per_graph
    iu, ju = np.triu_indices(n, k=1)
    graphs = []
    for _ in range(num_graphs):
        dominant = rng.integers(num_communities)
        other = rng.integers(num_communities, size=n)
        comm = np.where(rng.random(n) < dominance, dominant, other)
        same = comm[iu] == comm[ju]
        keep = rng.random(len(iu)) < np.where(same, p_in, p_out)
        pairs = np.stack([iu[keep], ju[keep]], axis=1)
        edges = np.concatenate([pairs, pairs[:, ::-1]])
        edges = edges[np.lexsort((edges[:, 0], edges[:, 1]))]
        total = np.zeros(n)
        count = np.zeros(n)
        np.add.at(total, edges[:, 1], comm[edges[:, 0]])
        np.add.at(count, edges[:, 1], 1)
        mean = np.where(count > 0, total / np.maximum(count, 1), comm)
        x = mean[:, None] + noise * rng.standard_normal((n, num_attributes))
        label = int(np.argmax(np.bincount(comm, minlength=num_communities)))
        graphs.append(Graph(n, edges, x, np.ones_like(x, dtype=bool), label))
    schema = AttributeSchema(tuple(Continuous() for _ in range(num_attributes)))
    return Dataset(schema, graphs, num_communities)


def iid_rows_dataset(x: np.ndarray, schema: Optional[AttributeSchema] = None) -> Dataset:
    """One single-vertex, edgeless graph per row of ``x`` (NaN = missing)."""
    x = np.asarray(x, dtype=np.float64)
    if schema is None:
        schema = AttributeSchema(tuple(Continuous() for _ in range(x.shape[1])))
    graphs = [Graph(1, np.zeros((0, 2), dtype=np.int64), row[None, :], ~np.isnan(row[None, :]))
              for row in x]
    return Dataset(schema, graphs)
