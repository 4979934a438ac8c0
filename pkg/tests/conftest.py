"""Shared fixtures, random instance builders and independent reference oracles."""
from __future__ import annotations

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from gspn.graph import AttributeSchema, Categorical, Continuous, Graph, in_neighbors
from gspn.model import GspnConfig, random_params

KIND_POOL = (Continuous(), Categorical(3), Continuous(), Categorical(2))


# --------------------------------------------------------------------------- random instances

def random_schema(rng: np.random.Generator, max_attributes: int = 4) -> AttributeSchema:
    d = int(rng.integers(1, max_attributes + 1))
    return AttributeSchema(KIND_POOL[:d])


def random_values(rng: np.random.Generator, schema: AttributeSchema, n: int) -> np.ndarray:
    x = np.zeros((n, schema.d))
    for a, kind in enumerate(schema.attributes):
        if isinstance(kind, Categorical):
            x[:, a] = rng.integers(0, kind.arity, n)
        else:
            x[:, a] = rng.normal(size=n)
    return x


def random_graph(rng: np.random.Generator, schema: AttributeSchema, n: int, p_edge: float = 0.4,
                 p_obs: float = 0.7, dag: bool = False) -> Graph:
    """Random directed graph; with ``dag`` every edge goes from a lower to a higher id."""
    pairs = [(u, v) for u in range(n) for v in range(n)
             if u != v and (not dag or u < v) and rng.random() < p_edge]
    x = random_values(rng, schema, n)
    mask = rng.random(x.shape) < p_obs
    return Graph(n, np.array(pairs, dtype=np.int64).reshape(-1, 2), x, mask)


def random_instance(rng: np.random.Generator, max_vertices: int = 6, dag: bool = False):
    """(graph, config, params) with N <= max_vertices, C in {2, 3}, L in {1, 2, 3}."""
    n = int(rng.integers(2, max_vertices + 1))
    C = int(rng.choice([2, 3]))
    L = int(rng.choice([1, 2, 3]))
    schema = random_schema(rng)
    g = random_graph(rng, schema, n, dag=dag)
    cfg = GspnConfig(layers=L, states=C, shortcut=bool(L >= 2 and rng.random() < 0.5))
    return g, cfg, random_params(schema, cfg, rng)


def relabel(g: Graph, perm: np.ndarray, rng: np.random.Generator) -> Graph:
    """Graph with vertex ``v`` renamed ``perm[v]`` and the edge list shuffled."""
    inv = np.argsort(perm)
    edges = perm[g.edges] if len(g.edges) else g.edges
    edges = edges[rng.permutation(len(edges))]
    return Graph(g.num_vertices, edges, g.x[inv], g.mask[inv], g.label)


# --------------------------------------------------------------------------- reference oracle

def ref_emission(values: dict, schema: AttributeSchema, layer: int, layers: int, shortcut: bool):
    """(mu, var, tables) of a height, with the shortcut written out in closed form."""
    if shortcut and layer == layers:
        lower = [ref_emission(values, schema, l, layers, False) for l in range(1, layers)]
        n = len(lower)
        mu = sum(e[0] for e in lower) / n
        var = sum(e[1] for e in lower) / n ** 2
        tables = {a: sum(e[2][a] for e in lower) / n for a in schema.categorical}
        return mu, var, tables
    mu = values.get(f"mu/{layer}")
    sigma = values.get(f"sigma/{layer}")
    var = None if sigma is None else sigma ** 2
    return mu, var, {a: values[f"cat/{layer}/{a}"] for a in schema.categorical}


def ref_log_emission(emission, schema: AttributeSchema, x_row, m_row, C: int) -> np.ndarray:
    mu, var, tables = emission
    out = np.zeros(C)
    for i in range(C):
        for j, a in enumerate(schema.continuous):
            if m_row[a]:
                out[i] += norm.logpdf(x_row[a], mu[i, j], np.sqrt(var[i, j]))
        for a in schema.categorical:
            if m_row[a]:
                out[i] += np.log(tables[a][i, int(x_row[a])])
    return out


def ref_tree_posterior(g: Graph, values: dict, schema, C: int, layers: int, shortcut: bool,
                       v: int, height: int):
    """(posterior, log-likelihood) of the sum unit at the root of v's height-``height`` tree.

    The computational tree is unfolded recursively with no reuse across nodes.
    """
    kids = in_neighbors(g, v)
    if height == 0 or not kids:
        prior = values["prior0"]
    else:
        theta = values[f"theta/{height}"]
        prior = np.mean([theta.T @ ref_tree_posterior(g, values, schema, C, layers, shortcut, u,
                                                      height - 1)[0] for u in kids], axis=0)
    em = ref_emission(values, schema, height, layers, shortcut)
    joint = np.log(prior) + ref_log_emission(em, schema, g.x[v], g.mask[v], C)
    ll = logsumexp(joint)
    return np.exp(joint - ll), ll


def ref_forward(g: Graph, params):
    """(h of shape (L+1, N, C), per-vertex pseudo log-likelihood) by tree unfolding."""
    values = params.constrained()
    C, L = params.states, params.layers
    h = np.zeros((L + 1, g.num_vertices, C))
    pll = np.zeros(g.num_vertices)
    for l in range(L + 1):
        for v in range(g.num_vertices):
            h[l, v], ll = ref_tree_posterior(g, values, params.schema, C, L, params.shortcut, v, l)
            if l == L:
                pll[v] = ll
    return h, pll


def assert_simplex(p, atol: float = 1e-9, axis: int = -1):
    p = np.asarray(p)
    assert np.all(p >= -atol), "negative probability"
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=atol, rtol=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------- acceptance report

_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker
        ok = report.outcome == "passed"
        prev = _ACCEPTANCE.get(number)
        _ACCEPTANCE[number] = (title, ok and (prev is None or prev[1]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}")
