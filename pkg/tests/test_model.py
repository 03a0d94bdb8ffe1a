import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convseg.errors import (CategoryMismatchError, ConfigError, DimensionError, NeighborhoodError,
                            ParameterError)
from convseg.gradcheck import check_case
from convseg.knn_graph import knn_brute_force
from convseg.model import (CATEGORIES, CategoryConfig, LayerParams, check_params,
                           component_aggregate, default_dropout, edge_conv, forward_with_cache,
                           layer_shapes, model_forward, model_init, model_init_shapes)


def layer(c_in, c_out, rng, bn=True):
    lp = LayerParams(rng.normal(size=(2 * c_in, c_out)), rng.normal(size=c_out))
    if bn:
        lp.gamma, lp.beta = np.ones(c_out), np.zeros(c_out)
        lp.running_mean, lp.running_var = np.zeros(c_out), np.ones(c_out)
    return lp


class TestConfig:
    def test_dropout_defaults(self):
        assert default_dropout("chair") == 0.6
        for cat in CATEGORIES[1:]:
            assert CategoryConfig(cat, 3).dropout_rate == 0.4

    @pytest.mark.parametrize("kw", [dict(category="sofa"), dict(num_parts=1),
                                    dict(dropout_rate=1.0), dict(k_neighbors=0),
                                    dict(edge_conv_channels=()), dict(activation="tanh"),
                                    dict(component_vote="median")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            CategoryConfig(**{"category": "lamp", "num_parts": 3, **kw})

    def test_dict_round_trip(self):
        cfg = CategoryConfig("bed", 3, k_neighbors=7, head_channels=(5,))
        assert CategoryConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            CategoryConfig.from_dict({"category": "bed", "num_parts": 3, "width": 2})


class TestInit:
    def test_shapes_default(self):
        shapes = dict((p, (i, o)) for p, i, o in layer_shapes(CategoryConfig("chair", 4)))
        assert shapes["edge0"] == (6, 64) and shapes["edge1"] == (128, 64)
        assert shapes["global"] == (192, 1024)
        assert shapes["head0"] == (1216, 512) and shapes["head1"] == (512, 256)
        assert shapes["out"] == (256, 4)

    def test_matches_declared_shapes(self, small_config):
        mp = model_init(small_config, 0)
        want = model_init_shapes(small_config)
        assert {k: v.shape for k, v in mp.params.items()} == want["params"]
        assert {k: v.shape for k, v in mp.buffers.items()} == want["buffers"]
        check_params(mp)

    def test_seed_determinism(self, small_config):
        a, b, c = model_init(small_config, 3), model_init(small_config, 3), model_init(small_config, 4)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert not np.array_equal(a.params["edge0.weight"], c.params["edge0.weight"])

    def test_glorot_statistics(self):
        mp = model_init(CategoryConfig("chair", 4), 0)
        w = mp.params["global.weight"]
        limit = np.sqrt(6 / sum(w.shape))
        assert np.abs(w).max() <= limit
        sd = limit / np.sqrt(3)
        assert abs(w.mean()) < 3 * sd / np.sqrt(w.size)
        assert w.std() == pytest.approx(sd, rel=0.01)

    def test_no_bn(self):
        mp = model_init(CategoryConfig("lamp", 3, use_batch_norm=False, edge_conv_channels=(4,),
                                       global_channels=4, head_channels=()), 0)
        assert mp.buffers == {} and not any("gamma" in k for k in mp.params)

    def test_check_params_rejects(self, small_config):
        mp = model_init(small_config, 0)
        mp.params["out.weight"] = mp.params["out.weight"][:, :2]
        with pytest.raises(DimensionError, match="out.weight"):
            check_params(mp)
        mp = model_init(small_config, 0)
        del mp.buffers["global.running_var"]
        with pytest.raises(DimensionError):
            check_params(mp)


class TestEdgeConv:
    def test_hand_example(self):
        # two points on a line, k=1, identity-ish weights, no BN
        cfg = CategoryConfig("lamp", 3)
        x = np.array([[0.0], [2.0]])
        lp = LayerParams(np.array([[1.0], [1.0]]), np.array([0.0]))
        out, _ = edge_conv(x, knn_brute_force(x, 1), lp, cfg, "eval")
        # relu(x_i + (x_j - x_i)) = relu(x_j)
        assert out.ravel().tolist() == [2.0, 0.0]

    def test_degenerate_identical_points(self, rng):
        cfg = CategoryConfig("lamp", 3)
        x = np.tile([[0.3, -0.2, 0.5]], (6, 1))
        lp = layer(3, 4, rng, bn=False)
        out, _ = edge_conv(x, knn_brute_force(x, 3), lp, cfg, "eval")
        # every edge feature is [x, 0]: all rows equal
        want = np.maximum(x[0] @ lp.weight[:3] + lp.bias, 0)
        np.testing.assert_allclose(out, np.tile(want, (6, 1)), atol=1e-14)

    def test_permutation_equivariance(self, rng):
        cfg = CategoryConfig("lamp", 3)
        x = rng.normal(size=(15, 3))
        lp = layer(3, 5, rng)
        base, _ = edge_conv(x, knn_brute_force(x, 4), lp, cfg, "train")
        for _ in range(10):
            perm = rng.permutation(15)
            xp = x[perm]
            out, _ = edge_conv(xp, knn_brute_force(xp, 4), lp, cfg, "train")
            np.testing.assert_allclose(out, base[perm], atol=1e-12)

    def test_translation_invariant_without_center_term(self, rng):
        # x_j - x_i is translation invariant, so with a zero x_i block the output is too
        cfg = CategoryConfig("lamp", 3)
        x = rng.normal(size=(12, 3))
        lp = layer(3, 4, rng, bn=False)
        lp.weight[:3] = 0.0
        a, _ = edge_conv(x, knn_brute_force(x, 3), lp, cfg, "eval")
        b, _ = edge_conv(x + 5.0, knn_brute_force(x + 5.0, 3), lp, cfg, "eval")
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_dimension_errors(self, rng):
        cfg = CategoryConfig("lamp", 3)
        x = rng.normal(size=(5, 3))
        with pytest.raises(DimensionError):
            edge_conv(x, knn_brute_force(x[:4], 2), layer(3, 2, rng), cfg)
        with pytest.raises(DimensionError):
            edge_conv(x, knn_brute_force(x, 2), layer(2, 2, rng), cfg)

    def test_gradient(self):
        assert check_case("edge_conv", points=5) < 1e-6


class TestForward:
    def test_logit_shape_and_determinism(self, small_config, rng):
        mp = model_init(small_config, 0)
        pts = rng.normal(size=(30, 3))
        a = model_forward(pts, mp, "eval")
        assert a.shape == (30, 3)
        assert np.array_equal(a, model_forward(pts, mp, "eval"))

    def test_train_mode_needs_rng(self, small_config, rng):
        mp = model_init(small_config, 0)
        with pytest.raises(ParameterError):
            model_forward(rng.normal(size=(20, 3)), mp, "train")

    def test_train_updates_buffers_only_in_cache(self, small_config, rng):
        mp = model_init(small_config, 0)
        before = {k: v.copy() for k, v in mp.buffers.items()}
        _, cache = forward_with_cache(rng.normal(size=(20, 3)), mp, "train", rng)
        assert all(np.array_equal(mp.buffers[k], before[k]) for k in before)
        assert not np.array_equal(cache.new_buffers["global.running_mean"],
                                  before["global.running_mean"])
        _, cache = forward_with_cache(rng.normal(size=(20, 3)), mp, "eval")
        assert all(cache.new_buffers[k] is mp.buffers[k] for k in before)

    def test_point_permutation_equivariance_eval(self, small_config, rng):
        mp = model_init(small_config, 1)
        pts = rng.normal(size=(25, 3))
        base = model_forward(pts, mp, "eval")
        for _ in range(10):
            perm = rng.permutation(25)
            np.testing.assert_allclose(model_forward(pts[perm], mp, "eval"), base[perm],
                                       atol=1e-10)

    def test_too_few_points(self, small_config):
        with pytest.raises(NeighborhoodError):
            model_forward(np.zeros((4, 3)), model_init(small_config, 0))

    def test_bad_shape(self, small_config):
        with pytest.raises(DimensionError):
            model_forward(np.zeros((10, 2)), model_init(small_config, 0))

    def test_static_graph_reuses_coordinate_graph(self, rng):
        cfg = CategoryConfig("lamp", 3, k_neighbors=3, edge_conv_channels=(4, 4, 4),
                             global_channels=8, head_channels=(8,), static_graph=True)
        _, cache = forward_with_cache(rng.normal(size=(12, 3)), model_init(cfg, 0), "eval")
        assert all(g is cache.graphs[0] for g in cache.graphs)

    def test_dynamic_graph_is_rebuilt(self, small_config, rng):
        _, cache = forward_with_cache(rng.normal(size=(30, 3)), model_init(small_config, 0), "eval")
        assert cache.graphs[1] is not cache.graphs[0]
        np.testing.assert_array_equal(cache.graphs[1].neighbors,
                                      knn_brute_force(cache.edge[1].x, 4).neighbors)

    def test_no_head_layers(self, rng):
        cfg = CategoryConfig("lamp", 3, k_neighbors=2, edge_conv_channels=(4,),
                             global_channels=4, head_channels=())
        assert model_forward(rng.normal(size=(8, 3)), model_init(cfg, 0)).shape == (8, 3)

    def test_category_mismatch(self, small_config):
        with pytest.raises(CategoryMismatchError):
            model_init(small_config, 0).check_category("chair")

    @pytest.mark.slow
    def test_end_to_end_gradient(self):
        assert check_case("tiny_model", points=5) < 1e-4

    def test_end_to_end_gradient_leaky_no_bn(self, rng):
        from convseg import tensor_core as tc
        from convseg.model import model_backward, ModelParams
        cfg = CategoryConfig("lamp", 3, k_neighbors=2, edge_conv_channels=(3, 3),
                             global_channels=4, head_channels=(4,), activation="leaky_relu",
                             use_batch_norm=False, dropout_rate=0.0)
        base = model_init(cfg, 0)
        pts = rng.normal(size=(7, 3))
        labels = rng.integers(0, 3, size=7)

        def fn(p):
            mp = ModelParams(cfg, p, base.buffers)
            logits, cache = forward_with_cache(pts, mp, "eval")
            loss, d = tc.softmax_cross_entropy(logits, labels)
            return loss, model_backward(d, cache, mp)

        def kink(p):
            return forward_with_cache(pts, ModelParams(cfg, p, base.buffers), "eval")[1].kink_gap()
        assert tc.gradient_check(fn, base.params, kink_distance=kink) < 1e-4


class TestComponentAggregate:
    def test_mean_example(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 1.0], [5.0, 0.0]])
        assert component_aggregate(logits, [7, 7, 7, 3]) == {3: 0, 7: 0}
        assert component_aggregate(logits, [7, 7, 7, 3], "majority") == {3: 0, 7: 1}

    def test_tie_lowest_class(self):
        assert component_aggregate(np.array([[1.0, 1.0]]), [0]) == {0: 0}
        assert component_aggregate(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0], "majority") == {0: 0}

    def test_errors(self):
        with pytest.raises(ParameterError):
            component_aggregate(np.zeros((0, 2)), [])
        with pytest.raises(DimensionError):
            component_aggregate(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ParameterError):
            component_aggregate(np.zeros((1, 2)), [0], "max")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30), st.sampled_from(["mean", "majority"]))
    def test_point_order_invariance(self, seed, n, method):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(n, 4))
        ids = rng.integers(0, 5, size=n)
        perm = rng.permutation(n)
        assert component_aggregate(logits, ids, method) == component_aggregate(logits[perm], ids[perm], method)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 30))
    def test_single_point_components_are_argmax(self, seed, n):
        logits = np.random.default_rng(seed).normal(size=(n, 3))
        got = component_aggregate(logits, np.arange(n))
        assert got == {i: int(logits[i].argmax()) for i in range(n)}
