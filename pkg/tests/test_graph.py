import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gspn.graph import (AttributeSchema, Categorical, Continuous, Dataset, DatasetError, Graph,
                        apply_missing_mask, dataset_from_json, dataset_to_json, gamma_marsaglia_tsang,
                        in_neighbors, iid_rows_dataset, load_dataset, masked_count, save_dataset,
                        synth_community_graphs)


def _write(tmp_path, obj, name="ds.json"):
    path = tmp_path / name
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return path


MIXED = [{"kind": "continuous"}, {"kind": "categorical", "arity": 3}]


class TestSchema:
    def test_needs_an_attribute(self):
        with pytest.raises(DatasetError):
            AttributeSchema(())

    def test_arity_at_least_two(self):
        with pytest.raises(DatasetError):
            Categorical(1)

    def test_json_round_trip(self):
        schema = AttributeSchema.from_json(MIXED)
        assert schema.to_json() == MIXED
        assert schema.continuous == [0] and schema.categorical == [1]

    def test_unknown_kind(self):
        with pytest.raises(DatasetError, match="unknown kind"):
            AttributeSchema.from_json([{"kind": "ordinal"}])


class TestGraph:
    def test_rejects_self_loop(self):
        with pytest.raises(DatasetError, match="self-loop"):
            Graph(2, [(1, 1)], np.zeros((2, 1)), np.ones((2, 1), bool))

    def test_rejects_duplicate_edge(self):
        with pytest.raises(DatasetError, match="duplicate"):
            Graph(2, [(0, 1), (0, 1)], np.zeros((2, 1)), np.ones((2, 1), bool))

    def test_rejects_out_of_range_endpoint(self):
        with pytest.raises(DatasetError, match="out of range"):
            Graph(2, [(0, 2)], np.zeros((2, 1)), np.ones((2, 1), bool))

    def test_arrays_are_frozen_copies(self):
        x = np.zeros((2, 1))
        g = Graph(2, [], x, np.ones((2, 1), bool))
        x[0, 0] = 5.0
        assert g.x[0, 0] == 0.0
        with pytest.raises(ValueError):
            g.x[0, 0] = 1.0

    def test_masked_entries_carry_no_constraint(self):
        schema = AttributeSchema((Categorical(2),))
        g = Graph(1, [], np.array([[np.nan]]), np.zeros((1, 1), bool))
        g.validate(schema)


class TestInNeighbors:
    def test_sorted(self):
        g = Graph(3, [(2, 1), (0, 1)], np.zeros((3, 1)), np.ones((3, 1), bool))
        assert in_neighbors(g, 1) == [0, 2]

    def test_empty(self):
        g = Graph(3, [(2, 1)], np.zeros((3, 1)), np.ones((3, 1), bool))
        assert in_neighbors(g, 0) == []

    def test_direction(self):
        g = Graph(2, [(1, 0), (0, 1)], np.zeros((2, 1)), np.ones((2, 1), bool))
        assert in_neighbors(g, 0) == [1]

    def test_out_of_range(self):
        g = Graph(2, [], np.zeros((2, 1)), np.ones((2, 1), bool))
        with pytest.raises(IndexError):
            in_neighbors(g, 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.data())
    def test_partition_of_edges(self, n, data):
        pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
        chosen = data.draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
        g = Graph(n, chosen, np.zeros((n, 1)), np.ones((n, 1), bool))
        assert sum(len(in_neighbors(g, v)) for v in range(n)) == len(chosen)


class TestLoad:
    def test_undirected_expanded(self, tmp_path):
        path = _write(tmp_path, {"schema": [{"kind": "continuous"}],
                                 "graphs": [{"n": 2, "undirected_edges": [[0, 1]], "x": [[0.0], [1.0]]}]})
        g = load_dataset(path).graphs[0]
        assert sorted(map(tuple, g.edges.tolist())) == [(0, 1), (1, 0)]

    def test_empty_graph_list(self, tmp_path):
        ds = load_dataset(_write(tmp_path, {"schema": [{"kind": "continuous"}], "graphs": []}))
        assert len(ds) == 0

    def test_category_out_of_range_names_attribute(self, tmp_path):
        path = _write(tmp_path, {"schema": MIXED, "graphs": [{"n": 1, "x": [[0.0, 5]]}]})
        with pytest.raises(DatasetError, match="graph 0, vertex 0, attribute 1"):
            load_dataset(path)

    def test_parse_error_has_line_context(self, tmp_path):
        path = _write(tmp_path, '{"schema": [{"kind": "continuous"}],\n "graphs": [,]}')
        with pytest.raises(DatasetError, match=r":2:"):
            load_dataset(path)

    def test_null_is_missing(self, tmp_path):
        path = _write(tmp_path, {"schema": MIXED, "graphs": [{"n": 2, "x": [[0.5, None], [None, 2]]}]})
        g = load_dataset(path).graphs[0]
        np.testing.assert_array_equal(g.mask, [[True, False], [False, True]])

    def test_fully_missing_vertices_flagged(self, tmp_path):
        path = _write(tmp_path, {"schema": MIXED, "graphs": [{"n": 2, "x": [[None, None], [1.0, 0]]}]})
        with pytest.warns(UserWarning, match="1 vertices"):
            ds = load_dataset(path)
        assert ds.stats()["fully_missing_vertices"] == 1

    def test_label_range_checked(self):
        with pytest.raises(DatasetError, match="label"):
            dataset_from_json({"schema": MIXED, "num_classes": 2,
                               "graphs": [{"n": 1, "x": [[0.0, 1]], "y": 2}]})

    def test_round_trip_preserves_held_out_truth(self, tmp_path):
        ds = apply_missing_mask(synth_community_graphs(3, 5, 2, 0.1, 0, num_attributes=4), 1.5, 0.5, 1)
        save_dataset(ds, tmp_path / "a.json")
        assert load_dataset(tmp_path / "a.json") == ds

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_round_trip_random(self, seed):
        rng = np.random.default_rng(seed)
        schema = AttributeSchema((Continuous(), Categorical(4)))
        graphs = []
        for _ in range(int(rng.integers(0, 4))):
            n = int(rng.integers(0, 5))
            x = np.column_stack([rng.normal(size=n), rng.integers(0, 4, n)]).astype(float)
            x[rng.random(x.shape) < 0.3] = np.nan
            pairs = [(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < 0.3]
            graphs.append(Graph(n, pairs, x, ~np.isnan(x), int(rng.integers(0, 3))))
        ds = Dataset(schema, graphs, 3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert dataset_from_json(json.loads(json.dumps(dataset_to_json(ds)))) == ds


class TestMasking:
    def test_deterministic(self):
        ds = synth_community_graphs(4, 6, 2, 0.1, 0, num_attributes=5)
        a = apply_missing_mask(ds, 1.5, 0.5, 7)
        b = apply_missing_mask(ds, 1.5, 0.5, 7)
        assert a == b
        assert a != apply_missing_mask(ds, 1.5, 0.5, 8)

    def test_values_untouched_and_input_unchanged(self):
        ds = synth_community_graphs(4, 6, 2, 0.1, 0, num_attributes=5)
        masked = apply_missing_mask(ds, 1.5, 0.5, 7)
        for g, h in zip(ds.graphs, masked.graphs):
            np.testing.assert_array_equal(g.x, h.x)
            assert g.mask.all()
        assert any((~h.mask).any() for h in masked.graphs)

    def test_count_rule(self):
        assert masked_count(0.5, 6) == 3
        assert masked_count(-0.1, 6) == 0
        assert masked_count(0.0, 6) == 0
        assert masked_count(4.2, 6) == 6
        assert masked_count(0.99, 6) == 5

    def test_per_vertex_counts_follow_the_draws(self):
        ds = synth_community_graphs(2, 10, 2, 0.1, 0, num_attributes=6)
        masked = apply_missing_mask(ds, 1.5, 0.5, 3)
        rng = np.random.default_rng(3)
        for g in masked.graphs:
            for v in range(g.num_vertices):
                k = masked_count(gamma_marsaglia_tsang(rng, 1.5, 0.5), 6)
                if k:
                    rng.permutation(6)
                assert int((~g.mask[v]).sum()) == k

    @pytest.mark.parametrize("shape,rate", [(1.5, 0.5), (0.5, 2.0), (4.0, 1.0)])
    def test_gamma_moments(self, shape, rate):
        rng = np.random.default_rng(0)
        draws = np.array([gamma_marsaglia_tsang(rng, shape, rate) for _ in range(20000)])
        assert abs(draws.mean() - shape / rate) < 0.05 * shape / rate
        assert abs(draws.var() - shape / rate ** 2) < 0.1 * shape / rate ** 2

    def test_invalid_parameters(self):
        ds = synth_community_graphs(1, 3, 1, 0.0, 0)
        with pytest.raises(ValueError):
            apply_missing_mask(ds, 0.0, 0.5, 0)


class TestSynthetic:
    def test_degenerate_single_community(self):
        ds = synth_community_graphs(3, 8, 1, 0.0, 0)
        values = np.concatenate([g.x.ravel() for g in ds.graphs])
        assert np.all(values == values[0])

    def test_deterministic(self):
        a = json.dumps(dataset_to_json(synth_community_graphs(5, 7, 3, 0.2, 11)))
        b = json.dumps(dataset_to_json(synth_community_graphs(5, 7, 3, 0.2, 11)))
        assert a == b

    def test_community_means_differ_by_about_one(self):
        # recover communities from the generator's stream: in-neighbors share a community with
        # high probability, so the attribute mean over vertices with mostly-0 vs mostly-1
        # neighborhoods separates by close to 1.
        ds = synth_community_graphs(200, 20, 2, 0.1, 5)
        lo, hi = [], []
        for g in ds.graphs:
            (lo if g.label == 0 else hi).append(np.median(g.x))
        assert abs((np.mean(hi) - np.mean(lo)) - 1.0) < 0.1

    def test_edges_are_undirected_pairs(self):
        g = synth_community_graphs(1, 15, 2, 0.1, 2).graphs[0]
        pairs = set(map(tuple, g.edges.tolist()))
        assert all((v, u) in pairs for u, v in pairs)

    def test_iid_rows(self):
        ds = iid_rows_dataset(np.array([[1.0, np.nan], [2.0, 3.0]]))
        assert len(ds) == 2 and ds.graphs[0].num_vertices == 1
        assert not ds.graphs[0].mask[0, 1]
