import numpy as np
import pytest

from stif import autodiff as ad
from stif.assoc_net import (PAD_LOGIT, AffinityMatrix, AssocNet, ConfigError, NetConfig,
                            dual_softmax, frame_arrays, init_params, param_shapes)
from stif.autodiff import Tensor
from stif.losses import tracking_loss
from stif.simulator import ScenarioConfig, generate, gt_association

SMALL = NetConfig(d=8, heads=2, n_spatial_layers=2, n_temporal_layers=2, affinity_layer_index=2,
                  K=6, d_reid=4, geo_hidden=6, ffn_hidden=10, affinity_hidden=4)


def _inputs(rng, n, cfg=SMALL):
    c2 = rng.uniform(0, 1600, (n, 4, 2))
    c3 = rng.standard_normal((n, 8, 3)) * 5
    reid = rng.standard_normal((n, cfg.d_reid))
    reid /= np.linalg.norm(reid, axis=1, keepdims=True)
    onehot = np.eye(cfg.n_categories)[rng.integers(0, cfg.n_categories, n)]
    return {"c2": c2, "c3": c3, "reid": reid, "onehot": onehot}


def _permute(inputs, perm):
    return {k: v[perm] for k, v in inputs.items()}


@pytest.fixture
def net():
    return AssocNet(SMALL, seed=3)


class TestConfig:
    def test_defaults(self):
        c = NetConfig()
        assert (c.d, c.heads, c.n_spatial_layers, c.n_temporal_layers, c.affinity_layer_index) == (64, 4, 3, 4, 2)
        assert (c.K, c.d_reid, c.n_attributes, c.tau) == (16, 32, 3, 5)

    @pytest.mark.parametrize("kw", [{"d": 10, "heads": 4}, {"affinity_layer_index": 5},
                                    {"affinity_layer_index": 0}, {"K": 0}, {"tau": 0}, {"cues": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            NetConfig(**kw).validate()

    def test_round_trip(self):
        assert NetConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_param_names_cover_init(self):
        assert list(init_params(SMALL)) == list(param_shapes(SMALL))


class TestEmbedding:
    def test_geometric_corner_permutation_invariant(self, net, rng):
        x = _inputs(rng, 3)
        a = net.embed_geometric(x["c2"], x["c3"]).data
        b = net.embed_geometric(x["c2"][:, rng.permutation(4)], x["c3"][:, rng.permutation(8)]).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_weights_zero_output(self, rng):
        z = AssocNet.zeros(SMALL)
        x = _inputs(rng, 2)
        assert not z.embed_geometric(x["c2"], x["c3"]).data.any()
        assert not z.embed_appearance(x["reid"], x["onehot"]).data.any()
        assert not z.fuse(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8)))).data.any()

    def test_geometric_non_finite(self, net, rng):
        x = _inputs(rng, 1)
        x["c3"][0, 0, 0] = np.nan
        with pytest.raises(ad.NumericError):
            net.embed_geometric(x["c2"], x["c3"])

    def test_yaw_changes_embedding(self, net):
        from stif.geometry import Box3D, corners3d
        c2 = np.array([[[0, 0], [0, 10], [10, 10], [10, 0]]], dtype=float)
        a = net.embed_geometric(c2, corners3d(Box3D(5, 1, 0, 4, 2, 1.5, 0.0))[None]).data
        b = net.embed_geometric(c2, corners3d(Box3D(5, 1, 0, 4, 2, 1.5, 0.7))[None]).data
        assert not np.allclose(a, b)

    def test_appearance_category_and_linearity(self, net, rng):
        r = rng.standard_normal((1, SMALL.d_reid))
        e0, e1 = np.eye(3)[[0]], np.eye(3)[[1]]
        assert not np.allclose(net.embed_appearance(r, e0).data, net.embed_appearance(r, e1).data)
        f0 = net.embed_appearance(np.zeros_like(r), e0).data
        f1 = net.embed_appearance(r, e0).data
        f3 = net.embed_appearance(2.5 * r, e0).data
        np.testing.assert_allclose(f3 - f0, 2.5 * (f1 - f0), atol=1e-12)

    def test_appearance_shape_error(self, net):
        with pytest.raises(ad.ShapeError):
            net.embed_appearance(np.zeros((1, 3)), np.eye(3)[[0]])

    def test_fuse_gradients_reach_both_cues(self, net, rng):
        a = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        g = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
        err = ad.gradcheck(lambda: ad.sum_(ad.square(net.fuse(a, g))), [a, g])
        assert err < 1e-4
        ad.sum_(ad.square(net.fuse(a, g))).backward()
        assert np.abs(a.grad).sum() > 0 and np.abs(g.grad).sum() > 0

    def test_cue_ablation_zeroes_input(self, rng):
        params = init_params(SMALL, 1)
        full = AssocNet(SMALL, params)
        app_only = AssocNet(NetConfig(**{**SMALL.to_dict(), "cues": "appearance"}), params)
        x = _inputs(rng, 3)
        y = _inputs(rng, 3)
        y["reid"], y["onehot"] = x["reid"], x["onehot"]  # different geometry only
        assert not np.allclose(full.embed(x).data, full.embed(y).data)
        np.testing.assert_array_equal(app_only.embed(x).data, app_only.embed(y).data)


class TestFlows:
    def test_spatial_single_object_depends_only_on_itself(self, net, rng):
        x = net.embed(_inputs(rng, 1))
        a = net.spatial(x).data
        b = net.spatial(x).data
        np.testing.assert_array_equal(a, b)

    def test_spatial_permutation_equivariance(self, net, rng):
        x = _inputs(rng, 5)
        perm = rng.permutation(5)
        a = net.spatial(net.embed(x)).data
        b = net.spatial(net.embed(_permute(x, perm))).data
        np.testing.assert_allclose(a[perm], b, atol=1e-12)

    def test_temporal_permutation_equivariance(self, net, rng):
        xc, xp = _inputs(rng, 4), _inputs(rng, 3)
        pc, pp = rng.permutation(4), rng.permutation(3)

        def run(c, p):
            cur = net.spatial(net.embed(c))
            prev = net.motion(net.spatial(net.embed(p)), 0.5)
            return net.temporal(cur, prev)

        agg1, g1 = run(xc, xp)
        agg2, g2 = run(_permute(xc, pc), _permute(xp, pp))
        np.testing.assert_allclose(agg1.data[pc], agg2.data, atol=1e-12)
        rows, cols = np.append(pc, 4), np.append(pp, 3)
        np.testing.assert_allclose(g1.data[np.ix_(rows, cols)], g2.data, atol=1e-12)

    def test_gamma_structure(self, net, rng):
        cur = net.spatial(net.embed(_inputs(rng, 1)))
        prev = net.motion(net.spatial(net.embed(_inputs(rng, 1))), 0.5)
        _, g = net.temporal(cur, prev)
        assert g.shape == (2, 2)
        assert g.data[0, 1] == net.params["affinity.birth"].data[0]
        assert g.data[1, 0] == net.params["affinity.death"].data[0]
        assert g.data[1, 1] == 0.0

    def test_swapping_previous_objects_swaps_columns(self, net, rng):
        xc, xp = _inputs(rng, 3), _inputs(rng, 3)
        cur = net.spatial(net.embed(xc))
        p1 = net.motion(net.spatial(net.embed(xp)), 1.0)
        p2 = net.motion(net.spatial(net.embed(_permute(xp, [1, 0, 2]))), 1.0)
        g1, g2 = net.temporal(cur, p1)[1].data, net.temporal(cur, p2)[1].data
        np.testing.assert_allclose(g1[:, [1, 0, 2, 3]], g2, atol=1e-12)

    def test_padding_neutrality_bit_exact(self, rng):
        params = init_params(SMALL, 5)
        small = AssocNet(NetConfig(**{**SMALL.to_dict(), "K": 6}), params)
        big = AssocNet(NetConfig(**{**SMALL.to_dict(), "K": 12}), params)
        xc, xp = _inputs(rng, 3), _inputs(rng, 4)
        outs = []
        for net in (small, big):
            K = net.config.K

            def padded(x, n):
                f = np.zeros((K, SMALL.d))
                f[:n] = net.embed(x).data
                f[n:] = rng.standard_normal((K - n, SMALL.d))  # garbage in padded rows
                m = np.zeros(K, dtype=bool)
                m[:n] = True
                return Tensor(f), m

            fc, mc = padded(xc, 3)
            fp, mp = padded(xp, 4)
            sc = net.spatial_flow(fc, mc)
            sp = net.motion_modeling(net.spatial_flow(fp, mp), 0.5, mp)
            agg, aff = net.temporal_flow(sc, sp, mc, mp)
            outs.append((sc.data[:3], agg.data[:3], aff))
        assert outs[0][0].tobytes() == outs[1][0].tobytes()
        assert outs[0][1].tobytes() == outs[1][1].tobytes()
        assert outs[0][2].logits.data.tobytes() == outs[1][2].logits.data.tobytes()
        dense = outs[1][2].dense()
        assert dense.shape == (13, 13)
        assert dense[5, 0] == PAD_LOGIT and dense[0, 5] == PAD_LOGIT

    def test_padded_rows_pass_through(self, net, rng):
        f = Tensor(rng.standard_normal((6, 8)))
        m = np.array([True, True, False, True, False, False])
        out = net.spatial_flow(f, m).data
        np.testing.assert_array_equal(out[~m], f.data[~m])

    def test_all_invalid_rejected(self, net):
        with pytest.raises(ValueError):
            net.spatial_flow(Tensor(np.zeros((6, 8))), np.zeros(6, dtype=bool))

    def test_motion(self, net, rng):
        s = net.spatial(net.embed(_inputs(rng, 3)))
        a, b = net.motion(s, 0.5).data, net.motion(s, 1.0).data
        assert not np.allclose(a, b)
        with pytest.raises(ValueError):
            net.motion(s, 0.0)
        s2 = Tensor(s.data.copy())
        s2.data[1] += 1.0
        c = net.motion(s2, 0.5).data
        np.testing.assert_array_equal(a[[0, 2]], c[[0, 2]])

    def test_motion_dt_weights_get_gradient(self, net, rng):
        s = net.spatial(net.embed(_inputs(rng, 3)))
        w = net.params["motion.0.w"]
        err = ad.gradcheck(lambda: ad.sum_(ad.square(net.motion(Tensor(s.data), 0.7))), [w])
        assert err < 1e-4
        w.grad = None
        ad.sum_(ad.square(net.motion(Tensor(s.data), 0.7))).backward()
        assert np.abs(w.grad[-1]).sum() > 0

    def test_empty_frame_rejected(self, net, rng):
        cur = net.spatial(net.embed(_inputs(rng, 2)))
        with pytest.raises(ValueError):
            net.temporal(cur, Tensor(np.zeros((0, 8))))


class TestHeads:
    def test_shapes_and_distribution(self, net, rng):
        v, a, r = net.heads(Tensor(rng.standard_normal((4, 8))))
        assert v.shape == (4, 3) and a.shape == (4, 3) and r.shape == (4, 7)
        p = ad.softmax(a, axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_final_layer(self, net, rng):
        for h in ("velocity", "refine"):
            net.params[f"heads.{h}.2.w"].data[:] = 0
            net.params[f"heads.{h}.2.b"].data[:] = 0
        v, _, r = net.heads(Tensor(rng.standard_normal((2, 8))))
        assert not v.data.any() and not r.data.any()

    def test_shape_error(self, net):
        with pytest.raises(ad.ShapeError):
            net.heads(Tensor(np.zeros((2, 5))))


class TestDualSoftmax:
    def test_uniform_two_by_two(self):
        np.testing.assert_allclose(dual_softmax(np.zeros((2, 2))), [[0.25]])

    def test_saturated(self):
        g = np.full((3, 3), -40.0)
        g[0, 1] = g[1, 0] = 40.0
        p = dual_softmax(g)
        np.testing.assert_allclose(p, [[0, 1], [1, 0]], atol=1e-12)


class TestComposedGradient:
    def test_pipeline_matches_finite_differences(self, rng):
        sc = generate(ScenarioConfig(n_objects=3, n_frames=3, seed=4, fp_rate=0.0, dropout_prob=0.0))
        net = AssocNet(NetConfig(**{**SMALL.to_dict(), "d_reid": 32}), seed=2)
        cur, prev = sc.det_frames[2], sc.det_frames[1]
        xc, xp = frame_arrays(cur, net.config), frame_arrays(prev, net.config)
        gt = gt_association(cur, prev)

        def fn():
            c = net.spatial(net.embed(xc))
            p = net.motion(net.spatial(net.embed(xp)), 0.5)
            return tracking_loss(net.temporal(c, p)[1], gt)

        err = ad.gradcheck(fn, net.parameters(), max_entries=6, rng=np.random.default_rng(0))
        assert err < 1e-4
