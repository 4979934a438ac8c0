import numpy as np
import pytest

from conftest import assert_simplex, random_graph, relabel
from gspn import autodiff as ad
from gspn.graph import AttributeSchema, Categorical, Continuous, Dataset, Graph, synth_community_graphs
from gspn.model import Batch, GspnConfig, forward_pass, random_params, train_unsupervised
from gspn.readout import (class_log_probs, graph_predict, init_readout, predict_dataset, readout_prior,
                          train_supervised)

SCHEMA = AttributeSchema((Continuous(), Categorical(3)))


def setup(seed, pooling="mean", L=2, C=3, Cg=4, classes=3):
    rng = np.random.default_rng(seed)
    cfg = GspnConfig(layers=L, states=C, readout_states=Cg, pooling=pooling)
    return rng, cfg, random_params(SCHEMA, cfg, rng), init_readout(cfg, classes, rng)


class TestReadoutPrior:
    @pytest.mark.parametrize("pooling", ["mean", "sum"])
    def test_simplex_on_random_inputs(self, pooling):
        for seed in range(30):
            rng, cfg, params, rp = setup(seed, pooling)
            rp.store.raw.update({k: 3 * rng.standard_normal(v.shape) for k, v in rp.store.raw.items()})
            g = random_graph(rng, SCHEMA, int(rng.integers(1, 9)))
            assert_simplex(readout_prior(forward_pass(g, params), rp))

    def test_uniform_symmetry(self):
        _, cfg, _, rp = setup(0, "mean", L=2, C=3, Cg=4)
        for l in (1, 2):
            rp.store.raw[f"vartheta/{l}"] = np.zeros((3, 4))
        h = np.full((3, 5, 3), 1 / 3)
        np.testing.assert_allclose(readout_prior(h, rp), 0.25, atol=1e-15)

    def test_single_vertex_single_layer(self):
        rng, cfg, _, rp = setup(1, "mean", L=1, C=3, Cg=4)
        vt = rp.store.constrained("vartheta/1")
        h = np.zeros((2, 1, 3))
        h[1, 0, 0] = 1.0
        np.testing.assert_allclose(readout_prior(h, rp), vt[0], atol=1e-15)

    def test_mean_pooling_by_hand(self):
        rng, cfg, _, rp = setup(2, "mean", L=2, C=3, Cg=4)
        h = rng.dirichlet(np.ones(3), size=(3, 6))
        expected = sum(h[l].sum(axis=0) @ rp.store.constrained(f"vartheta/{l}") for l in (1, 2)) / (2 * 6)
        np.testing.assert_allclose(readout_prior(h, rp), expected, atol=1e-14)

    def test_sum_pooling_by_hand(self):
        rng, cfg, _, rp = setup(3, "sum", L=2, C=3, Cg=4)
        h = rng.dirichlet(np.ones(3), size=(3, 6))
        z = sum(h[l].sum(axis=0) @ rp.store.raw[f"vartheta/{l}"] for l in (1, 2))
        np.testing.assert_allclose(readout_prior(h, rp), np.exp(z - z.max()) / np.exp(z - z.max()).sum(),
                                   atol=1e-14)

    def test_empty_graph(self):
        _, _, params, rp = setup(4)
        with pytest.raises(ValueError):
            readout_prior(np.zeros((3, 0, 3)), rp)
        with pytest.raises(ValueError, match="empty"):
            graph_predict(Graph(0, [], np.zeros((0, 2)), np.zeros((0, 2), bool)), params, rp)


class TestGraphPredict:
    def test_identical_target_rows(self):
        rng, cfg, params, rp = setup(5)
        rp.store.raw["target"] = np.tile(rng.normal(size=3), (4, 1))
        row = rp.store.constrained("target")[0]
        for _ in range(5):
            g = random_graph(rng, SCHEMA, int(rng.integers(1, 7)))
            np.testing.assert_allclose(graph_predict(g, params, rp), row, atol=1e-14)

    def test_single_readout_state(self):
        rng, cfg, params, rp = setup(6, Cg=1)
        g = random_graph(rng, SCHEMA, 4)
        np.testing.assert_allclose(graph_predict(g, params, rp), rp.store.constrained("target")[0], atol=1e-14)

    @pytest.mark.parametrize("pooling", ["mean", "sum"])
    def test_vertex_permutation_bit_identical(self, pooling):
        rng, cfg, params, rp = setup(7, pooling)
        g = random_graph(rng, SCHEMA, 9)
        h = relabel(g, rng.permutation(9), rng)
        assert np.array_equal(graph_predict(g, params, rp), graph_predict(h, params, rp))

    def test_batched_equals_single(self):
        rng, cfg, params, rp = setup(8)
        graphs = [random_graph(rng, SCHEMA, int(rng.integers(1, 6)), p_obs=1.0) for _ in range(5)]
        ds = Dataset(SCHEMA, graphs)
        np.testing.assert_allclose(predict_dataset(ds, params, rp),
                                   np.stack([graph_predict(g, params, rp) for g in graphs]), atol=1e-14)

    @pytest.mark.parametrize("pooling", ["mean", "sum"])
    def test_gradient(self, pooling):
        rng, cfg, params, rp = setup(9, pooling, L=2, C=2, Cg=3, classes=2)
        batch = Batch.from_graphs([random_graph(rng, SCHEMA, 4), random_graph(rng, SCHEMA, 3)])
        labels = np.array([0, 1])
        bg = params.store.bind()

        def objective(br):
            logp = class_log_probs(batch, params, rp, bg, br)
            return ad.sum(ad.index(logp, (np.arange(2), labels)))
        assert ad.finite_diff_check(objective, rp.store, precision=np.longdouble) < 1e-4
        br = rp.store.bind()

        def through_gspn(b):
            return ad.sum(ad.index(class_log_probs(batch, params, rp, b, br), (np.arange(2), labels)))
        assert ad.finite_diff_check(through_gspn, params.store, precision=np.longdouble) < 1e-4


def _labelled(n=60, seed=0):
    return synth_community_graphs(n, 12, 2, 0.1, seed)


class TestTrainSupervised:
    def test_joint_learns_separable_task(self):
        ds = _labelled()
        cfg = GspnConfig(layers=2, states=3, readout_states=4, epochs=30, patience=30, batch_size=8)
        params, rp, history = train_supervised(ds.subset(range(40)), cfg, "joint")
        probs = predict_dataset(ds.subset(range(40, 60)), params, rp)
        y = np.array([g.label for g in ds.graphs[40:]])
        assert np.mean(probs.argmax(axis=1) == y) > 0.8
        losses = np.array(history.steps)
        k = len(losses) // 4
        assert losses[-k:].mean() > losses[:k].mean()  # log-likelihood rises

    def test_frozen_keeps_gspn_fixed(self):
        ds = _labelled(30)
        cfg = GspnConfig(layers=1, states=2, readout_states=3, epochs=3, batch_size=8)
        base, _ = train_unsupervised(ds, cfg)
        params, rp, _ = train_supervised(ds, cfg, "frozen", base)
        assert all(np.array_equal(params.store.raw[k], base.store.raw[k]) for k in base.store.names())

    def test_frozen_on_random_labels_is_near_chance(self):
        ds = _labelled(200, seed=1)
        rng = np.random.default_rng(0)
        graphs = [g.replace(label=int(rng.integers(2))) for g in ds.graphs]
        shuffled = Dataset(ds.schema, graphs, 2)
        cfg = GspnConfig(layers=1, states=3, readout_states=3, epochs=10, batch_size=16, patience=5)
        params, rp, _ = train_supervised(shuffled.subset(range(100)), cfg, "frozen")
        probs = predict_dataset(shuffled.subset(range(100, 200)), params, rp)
        y = np.array([g.label for g in graphs[100:]])
        assert abs(np.mean(probs.argmax(axis=1) == y) - 0.5) < 0.15

    def test_deterministic(self):
        ds = _labelled(20)
        cfg = GspnConfig(layers=1, states=2, readout_states=2, epochs=3, batch_size=8, seed=4)
        a = train_supervised(ds, cfg, "joint")
        b = train_supervised(ds, cfg, "joint")
        assert a[2].steps == b[2].steps
        assert all(np.array_equal(a[1].store.raw[k], b[1].store.raw[k]) for k in a[1].store.names())

    def test_missing_labels(self):
        ds = _labelled(5)
        unlabelled = Dataset(ds.schema, [g.replace(label=None) for g in ds.graphs])
        with pytest.raises(ValueError, match="label"):
            train_supervised(unlabelled, GspnConfig(epochs=1))

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            train_supervised(_labelled(5), GspnConfig(epochs=1), "staged")
