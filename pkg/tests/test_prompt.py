import numpy as np
import pytest

from dualprompt.autodiff import Tape, Tensor, apply, backward, grad_check
from dualprompt.errors import DimensionError
from dualprompt.graph import build_graph
from dualprompt.prompt import (
    AnchorSet,
    PromptParams,
    align_features,
    init_prompt_params,
    load_anchors,
    position_embedding,
    position_encoding,
    prompt_feature,
    prompt_graph,
    save_anchors,
    scale_encoding,
    select_anchors,
)
from dualprompt.reachability import build_cache, build_transition

from conftest import path_graph, random_graph, star_graph, triangle_graph


def _cache(graph, T=3):
    return build_cache(build_transition(graph), T)


def _params(d=3, m=2, d_h=4, seed=0, **kw):
    return init_prompt_params(d, m, d_h, seed, **kw)


class TestAnchors:
    def test_star_center_top(self):
        cache = _cache(star_graph(4), T=1)
        anchors = select_anchors(cache, t=1, m=1)
        assert anchors.anchor_ids.tolist() == [0]

    def test_all_isolated_tie_break(self):
        g = build_graph(np.empty((0, 2)), np.zeros((5, 1)))
        cache = _cache(g, T=1)
        anchors = select_anchors(cache, t=1, m=2)
        assert anchors.anchor_ids.tolist() == [0, 1]

    def test_m_equals_n_permutation(self):
        g = random_graph(20, 0.2, seed=0)
        cache = _cache(g, T=2)
        anchors = select_anchors(cache, t=2, m=20)
        assert sorted(anchors.anchor_ids.tolist()) == list(range(20))

    def test_m_out_of_range(self):
        cache = _cache(star_graph(3), T=1)
        with pytest.raises(ValueError):
            select_anchors(cache, t=1, m=10)

    def test_sorted_descending(self):
        g = random_graph(30, 0.15, seed=1)
        cache = _cache(g, T=2)
        anchors = select_anchors(cache, t=2, m=10)
        from dualprompt.reachability import total_reach
        totals = total_reach(cache, 2)[anchors.anchor_ids]
        assert np.all(np.diff(totals) <= 1e-15)

    def test_json_round_trip(self, tmp_path):
        cache = _cache(star_graph(4), T=1)
        anchors = select_anchors(cache, t=1, m=3)
        save_anchors(anchors, tmp_path / "anchors.json")
        back = load_anchors(tmp_path / "anchors.json", t=1)
        assert np.array_equal(back.anchor_ids, anchors.anchor_ids)


class TestPositionEncoding:
    def test_isolated_node_zero(self):
        g = build_graph(np.array([[1, 2]]), np.zeros((3, 1)))
        cache = _cache(g, T=1)
        anchors = AnchorSet(anchor_ids=np.array([0]), t=1)
        assert position_encoding(cache, anchors, 0, 1).tolist() == [0.0]

    def test_forced_step(self):
        cache = _cache(path_graph(3), T=1)
        anchors = AnchorSet(anchor_ids=np.array([1]), t=1)
        assert position_encoding(cache, anchors, 0, 1).tolist() == [1.0]

    def test_star_leaf_two_step_zero_at_center(self):
        # leaf -> center -> some leaf: cannot sit at the center after 2 steps
        cache = _cache(star_graph(4), T=2)
        anchors = AnchorSet(anchor_ids=np.array([0]), t=2)
        assert position_encoding(cache, anchors, 1, 2).tolist() == [0.0]


class TestPositionEmbedding:
    def test_zero_encoding_zero_bias(self):
        p = _params()
        p.b_pos.values[:] = 0.0
        out = position_embedding(np.zeros(2), p)
        assert np.allclose(out.values, 0.0)

    def test_zero_weight_gives_tanh_bias(self):
        p = _params()
        p.W_pos.values[:] = 0.0
        out = position_embedding(np.array([0.3, -2.0]), p)
        assert np.allclose(out.values, np.tanh(p.b_pos.values))

    def test_hand_computed_scaling(self):
        # enc=[1,0]: population std 0.5, so scaled ~= [2, 0]
        p = _params(d=3, m=2)
        p.W_pos.values[:] = 0.0
        p.W_pos.values[0, 0] = 1.0
        p.W_pos.values[1, 1] = 1.0
        p.b_pos.values[:] = 0.0
        out = position_embedding(np.array([1.0, 0.0]), p)
        expected = np.tanh([2.0 / (1 + 2e-6), 0.0, 0.0])
        assert np.allclose(out.values, expected, atol=1e-5)

    def test_output_strictly_inside_unit_box(self):
        rng = np.random.default_rng(0)
        p = _params(d=5, m=4)
        for _ in range(50):
            out = position_embedding(rng.normal(size=4) * 10, p)
            assert np.all(np.abs(out.values) < 1.0)

    def test_sigma_zero_single_component(self):
        p = _params(d=3, m=1)
        out = position_embedding(np.array([0.5]), p)
        assert np.all(np.isfinite(out.values))

    def test_gradients_match_fd(self):
        enc = np.array([0.4, 0.1])
        p = _params(d=3, m=2, seed=5)

        def f(w):
            probe = PromptParams(
                W_pos=w, b_pos=p.b_pos, W_prompt=p.W_prompt,
                b_prompt=p.b_prompt, W_normal=p.W_normal,
                b_normal=p.b_normal, w_pos=p.w_pos, epsilon=p.epsilon,
            )
            return apply("sum", [position_embedding(enc, probe)])

        assert grad_check(f, Tensor(p.W_pos.values)) <= 1e-4

        def g(b):
            probe = PromptParams(
                W_pos=p.W_pos, b_pos=b, W_prompt=p.W_prompt,
                b_prompt=p.b_prompt, W_normal=p.W_normal,
                b_normal=p.b_normal, w_pos=p.w_pos, epsilon=p.epsilon,
            )
            return apply("sum", [position_embedding(enc, probe)])

        assert grad_check(g, Tensor(p.b_pos.values)) <= 1e-4


class TestPromptFeature:
    def test_zero_weight(self):
        task = Tensor(np.array([1.0, 2.0]))
        pos = Tensor(np.array([0.5, 0.5]))
        assert np.array_equal(prompt_feature(task, pos, 0.0).values, [1.0, 2.0])

    def test_zero_task(self):
        task = Tensor(np.zeros(2))
        pos = Tensor(np.array([0.5, -0.5]))
        assert np.array_equal(prompt_feature(task, pos, 1.0).values, [0.5, -0.5])

    def test_arithmetic(self):
        task = Tensor(np.array([1.0, 1.0]))
        pos = Tensor(np.array([0.5, -0.5]))
        assert np.allclose(prompt_feature(task, pos, 0.1).values, [1.05, 0.95])

    def test_linear_in_position(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            task = Tensor(rng.normal(size=4))
            pos = Tensor(rng.normal(size=4))
            w = float(rng.normal())
            lhs = prompt_feature(task, pos, w).values - \
                prompt_feature(task, Tensor(np.zeros(4)), w).values
            assert np.allclose(lhs, w * pos.values, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            prompt_feature(Tensor(np.zeros(3)), Tensor(np.zeros(2)), 1.0)


class TestAlignFeatures:
    def test_zero_params_zero_output(self):
        p = _params(d=2, m=2, d_h=3)
        for t in (p.W_prompt, p.b_prompt, p.W_normal, p.b_normal):
            t.values[:] = 0.0
        out = align_features(Tensor(np.ones((4, 2))), np.array([0, 1, 0, 1]), p)
        assert np.allclose(out.values, 0.0)

    def test_identity_normal_map(self):
        p = _params(d=3, m=2, d_h=3)
        p.W_normal.values[:] = np.eye(3)
        p.b_normal.values[:] = 0.0
        feats = np.random.default_rng(0).normal(size=(2, 3))
        out = align_features(Tensor(feats), np.array([0, 0]), p)
        assert np.allclose(out.values, feats)

    def test_rows_use_their_own_map(self):
        p = _params(d=2, m=2, d_h=2)
        p.W_normal.values[:] = np.eye(2)
        p.b_normal.values[:] = 0.0
        p.W_prompt.values[:] = 2.0 * np.eye(2)
        p.b_prompt.values[:] = 1.0
        feats = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = align_features(Tensor(feats), np.array([1, 0]), p)
        assert np.allclose(out.values[0], 2.0 * feats[0] + 1.0)
        assert np.allclose(out.values[1], feats[1])

    def test_gradients_match_fd(self):
        p = _params(d=2, m=2, d_h=3, seed=9)
        feats = np.random.default_rng(1).normal(size=(3, 2))
        flags = np.array([1, 0, 1])

        def f(w):
            probe = PromptParams(
                W_pos=p.W_pos, b_pos=p.b_pos, W_prompt=w,
                b_prompt=p.b_prompt, W_normal=p.W_normal,
                b_normal=p.b_normal, w_pos=p.w_pos, epsilon=p.epsilon,
            )
            out = align_features(Tensor(feats), flags, probe)
            return apply("mean", [apply("square", [out])])

        assert grad_check(f, Tensor(p.W_prompt.values)) <= 1e-4


class TestPromptGraph:
    def _setup(self, graph):
        cache = _cache(graph, T=2)
        anchors = select_anchors(cache, t=2, m=2)
        params = _params(d=graph.num_features, m=2, d_h=4)
        task_row = np.random.default_rng(0).normal(size=graph.num_features)
        return cache, anchors, params, task_row

    def test_empty_targets(self):
        g = triangle_graph(d=3)
        cache, anchors, params, row = self._setup(g)
        aug, ids = prompt_graph(g, np.array([], dtype=np.int64), row, cache,
                                anchors, params)
        assert aug is g
        assert ids.size == 0

    def test_counts_single_target(self):
        g = triangle_graph(d=3)
        cache, anchors, params, row = self._setup(g)
        aug, ids = prompt_graph(g, np.array([1]), row, cache, anchors, params)
        assert aug.num_nodes == 4
        assert aug.num_edges == g.num_edges + 1
        assert ids.tolist() == [3]

    def test_prompt_degree_one_own_target(self):
        g = random_graph(12, 0.3, seed=2, d=3)
        cache, anchors, params, row = self._setup(g)
        targets = np.array([4, 7])
        aug, ids = prompt_graph(g, targets, row, cache, anchors, params)
        for pid, tgt in zip(ids, targets):
            nbrs = aug.neighbors(int(pid))
            assert nbrs.tolist() == [tgt]

    def test_original_rows_unchanged_and_input_untouched(self):
        g = random_graph(10, 0.3, seed=5, d=3)
        before = (g.csr_offsets.copy(), g.csr_targets.copy(), g.features.copy())
        cache, anchors, params, row = self._setup(g)
        aug, ids = prompt_graph(g, np.array([0, 3, 9]), row, cache, anchors,
                                params)
        assert np.array_equal(g.csr_offsets, before[0])
        assert np.array_equal(g.csr_targets, before[1])
        assert np.array_equal(g.features, before[2])
        # deleting prompt rows recovers the input graph exactly
        for u in range(g.num_nodes):
            orig = g.neighbors(u).tolist()
            kept = [v for v in aug.neighbors(u) if v < g.num_nodes]
            assert kept == orig
        assert np.array_equal(aug.features[: g.num_nodes], g.features)

    def test_duplicate_targets_rejected(self):
        g = triangle_graph(d=3)
        cache, anchors, params, row = self._setup(g)
        with pytest.raises(ValueError):
            prompt_graph(g, np.array([0, 0]), row, cache, anchors, params)

    def test_feature_values_follow_combination(self):
        g = path_graph(4, d=3)
        cache, anchors, params, row = self._setup(g)
        aug, ids = prompt_graph(g, np.array([2]), row, cache, anchors, params)
        enc = position_encoding(cache, anchors, 2, anchors.t)
        pos = np.tanh(
            params.W_pos.values @ scale_encoding(enc, params.epsilon)
            + params.b_pos.values
        )
        expected = row + params.w_pos * pos
        assert np.allclose(aug.features[ids[0]], expected, atol=1e-12)


def test_anchor_determinism():
    g = random_graph(25, 0.2, seed=4)
    cache = _cache(g, T=2)
    a = select_anchors(cache, 2, 5)
    b = select_anchors(cache, 2, 5)
    assert np.array_equal(a.anchor_ids, b.anchor_ids)
