import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from span.conv import (
    ConvParams,
    ConvSpec,
    build_conv_rulebook,
    compute_output_coords,
    sac_backward,
    sac_forward,
    sac_apply,
    transpose_rulebook,
)
from span.errors import RulebookMismatch
from span.oracles import brute_force_conv_rulebook, dense_conv_oracle, embed_dense
from span.sparse import build_sparse_map

from conftest import random_coord_set


def pair_sets(rb):
    return [list(zip(ii.tolist(), io.tolist())) for ii, io in rb.pairs]


class TestOutputCoords:
    def test_identity_config(self):
        spec = ConvSpec(1, 1, 1)
        got = compute_output_coords([(0, 0), (4, 7)], spec)
        assert got.tolist() == [[0, 0], [4, 7]]

    def test_downsampling(self):
        got = compute_output_coords([(0, 0), (1, 1), (5, 3)], ConvSpec(2, 2, 1))
        assert got.tolist() == [[0, 0], [2, 1]]

    def test_dilated_negative_candidates_discarded(self):
        # oracle-derived: anchor convention admits (2,0) and (0,2) via the
        # single-axis offsets; (-2,-2) is clipped at the origin
        got = compute_output_coords([(0, 0), (2, 2)], ConvSpec(2, 1, 2))
        assert got.tolist() == [[0, 0], [2, 0], [0, 2], [2, 2]]

    def test_empty_input(self):
        assert len(compute_output_coords([], ConvSpec(3, 2, 1))) == 0


class TestRulebook:
    def test_identity_rulebook(self):
        rb = build_conv_rulebook([(0, 0), (4, 7)], ConvSpec(1, 1, 1))
        assert pair_sets(rb) == [[(0, 0), (1, 1)]]

    def test_downsampling_pairs(self):
        rb = build_conv_rulebook([(0, 0), (1, 1), (5, 3)], ConvSpec(2, 2, 1))
        # offsets row-major: (0,0), (1,0), (0,1), (1,1)
        assert pair_sets(rb) == [[(0, 0)], [], [], [(1, 0), (2, 1)]]

    def test_dilated_pairs(self):
        rb = build_conv_rulebook([(0, 0), (2, 2)], ConvSpec(2, 1, 2))
        assert pair_sets(rb) == [
            [(0, 0), (1, 3)],  # k=(0,0)
            [(1, 2)],          # k=(1,0) input (2,2) reaches output (0,2)
            [(1, 1)],          # k=(0,1) input (2,2) reaches output (2,0)
            [(1, 0)],          # k=(1,1)
        ]

    def test_downsampling_partition(self):
        # S = K*D: every input lands in exactly one pair across all offsets
        rng = np.random.default_rng(0)
        pts = random_coord_set(rng, 30, 150)
        rb = build_conv_rulebook(pts, ConvSpec(2, 2, 1))
        seen = np.concatenate([ii for ii, _ in rb.pairs])
        assert sorted(seen.tolist()) == list(range(len(pts)))

    @given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 2),
           st.integers(0, 10_000))
    @settings(max_examples=30)
    def test_matches_brute_force(self, k, s, d, seed):
        rng = np.random.default_rng(seed)
        pts = random_coord_set(rng, 20, 200)
        rb = build_conv_rulebook(pts, ConvSpec(k, s, d))
        bf_out, bf_pairs = brute_force_conv_rulebook(pts, k, s, d)
        assert np.array_equal(rb.out_coords, bf_out)
        assert pair_sets(rb) == bf_pairs


class TestTranspose:
    def test_role_swap(self):
        coords = [(0, 0), (1, 1), (5, 3)]
        rb = build_conv_rulebook(coords, ConvSpec(2, 2, 1))
        t = transpose_rulebook(rb, coords)
        assert t.out_coords.tolist() == [[0, 0], [1, 1], [5, 3]]
        # the old (0,0) output (transposed input 0) feeds back exactly the
        # two original inputs that produced it
        back = sorted(io for plist in pair_sets(t) for ii, io in plist if ii == 0)
        assert back == [0, 1]

    def test_involution(self):
        coords = [(0, 0), (1, 1), (5, 3), (6, 6)]
        rb = build_conv_rulebook(coords, ConvSpec(2, 2, 1))
        tt = transpose_rulebook(transpose_rulebook(rb, coords), rb.out_coords)
        assert np.array_equal(tt.out_coords, rb.out_coords)
        assert pair_sets(tt) == pair_sets(rb)
        assert (tt.n_in, tt.n_out) == (rb.n_in, rb.n_out)

    def test_counts_swap(self):
        rng = np.random.default_rng(3)
        pts = random_coord_set(rng, 16, 80)
        rb = build_conv_rulebook(pts, ConvSpec(3, 2, 1))
        t = transpose_rulebook(rb, pts)
        assert (t.n_in, t.n_out) == (rb.n_out, rb.n_in)

    def test_wrong_coord_count(self):
        rb = build_conv_rulebook([(0, 0)], ConvSpec(1, 1, 1))
        with pytest.raises(RulebookMismatch):
            transpose_rulebook(rb, [(0, 0), (1, 1)])


class TestSacForward:
    def test_identity(self):
        m = build_sparse_map([(0, 0), (3, 2)], [[1.0, 2.0], [3.0, 4.0]], num_ctx=1)
        rb = build_conv_rulebook(m.coords, ConvSpec(1, 1, 1, 2, 2))
        params = ConvParams(np.eye(2)[None], np.zeros(2))
        out = sac_forward(m, rb, params)
        assert np.allclose(out.features, m.features)
        assert np.array_equal(out.coords, m.coords)

    def test_hand_sum(self):
        m = build_sparse_map([(0, 0), (1, 1)], [[2.0], [3.0]])
        rb = build_conv_rulebook(m.coords, ConvSpec(2, 2, 1, 1, 1))
        params = ConvParams(np.ones((4, 1, 1)), np.zeros(1))
        out = sac_forward(m, rb, params)
        assert out.coords.tolist() == [[0, 0]]
        assert out.features.tolist() == [[5.0]]

    def test_bias_only(self):
        rng = np.random.default_rng(0)
        pts = random_coord_set(rng, 10, 30)
        m = build_sparse_map(pts, rng.normal(size=(len(pts), 3)))
        rb = build_conv_rulebook(m.coords, ConvSpec(2, 2, 1, 3, 2))
        params = ConvParams(np.zeros((4, 2, 3)), np.full(2, 2.5))
        out = sac_forward(m, rb, params)
        assert np.allclose(out.features, 2.5)

    def test_context_projected_when_width_changes(self):
        m = build_sparse_map([(0, 0)], [[1.0, 2.0]], num_ctx=1)
        m = m.with_features(m.features, np.array([[1.0, 1.0]]))
        rb = build_conv_rulebook(m.coords, ConvSpec(2, 1, 1, 2, 1))
        w = np.arange(8, dtype=float).reshape(4, 1, 2)
        params = ConvParams(w, np.array([0.5]))
        out = sac_forward(m, rb, params)
        want = w.mean(axis=0) @ np.array([1.0, 1.0]) + 0.5
        assert np.allclose(out.context, want)

    def test_context_identity_when_width_kept(self):
        m = build_sparse_map([(0, 0)], [[1.0, 2.0]], num_ctx=1)
        ctx = np.array([[3.0, -1.0]])
        m = m.with_features(m.features, ctx)
        rb = build_conv_rulebook(m.coords, ConvSpec(1, 1, 1, 2, 2))
        params = ConvParams(np.random.default_rng(0).normal(size=(1, 2, 2)), np.ones(2))
        out = sac_forward(m, rb, params)
        assert np.array_equal(out.context, ctx)

    def test_rulebook_mismatch(self):
        m = build_sparse_map([(0, 0), (1, 0)], np.ones((2, 1)))
        rb = build_conv_rulebook([(0, 0)], ConvSpec(1, 1, 1, 1, 1))
        with pytest.raises(RulebookMismatch):
            sac_forward(m, rb, ConvParams(np.ones((1, 1, 1)), np.zeros(1)))


class TestDenseOracleEquivalence:
    @given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 2),
           st.integers(0, 10_000))
    @settings(max_examples=40)
    def test_matches_dense_conv(self, k, s, d, seed):
        rng = np.random.default_rng(seed)
        pts = random_coord_set(rng, 24, 100)
        din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        m = build_sparse_map(pts, rng.normal(size=(len(pts), din)), dtype=np.float64)
        params = ConvParams(rng.normal(size=(k * k, dout, din)),
                            rng.normal(size=dout))
        rb = build_conv_rulebook(m.coords, ConvSpec(k, s, d, din, dout))
        out = sac_forward(m, rb, params)
        ref = dense_conv_oracle(embed_dense(m, extra=(k - 1) * d), k, s, d,
                                params.weights, params.bias)
        got = ref[out.coords[:, 1], out.coords[:, 0]]
        if len(out.coords):
            assert np.abs(got - out.features).max() < 1e-10

    def test_single_precision_tolerance(self):
        rng = np.random.default_rng(5)
        pts = random_coord_set(rng, 32, 200)
        m = build_sparse_map(pts, rng.normal(size=(len(pts), 8)).astype(np.float32))
        params = ConvParams(rng.normal(size=(9, 8, 8)).astype(np.float32),
                            rng.normal(size=8).astype(np.float32))
        rb = build_conv_rulebook(m.coords, ConvSpec(3, 2, 1, 8, 8))
        out = sac_forward(m, rb, params)
        ref = dense_conv_oracle(embed_dense(m, extra=2), 3, 2, 1,
                                params.weights, params.bias)
        got = ref[out.coords[:, 1], out.coords[:, 0]]
        assert np.abs(got - out.features).max() < 1e-5


class TestStructuralProperties:
    def test_token_reduction_exact_on_full_grid(self):
        for side in (8, 16, 32):
            ys, xs = np.mgrid[0:side, 0:side]
            pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
            rb = build_conv_rulebook(pts, ConvSpec(2, 2, 1))
            assert rb.n_out == side * side // 4

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_translation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        k, s, d = 2, 2, 1
        base = random_coord_set(rng, 12, 60) + (k - 1) * d  # away from origin clip
        feats = rng.normal(size=(len(base), 3))
        params = ConvParams(rng.normal(size=(4, 2, 3)), rng.normal(size=2))
        tx, ty = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        m0 = build_sparse_map(base, feats, dtype=np.float64)
        m1 = build_sparse_map(base + np.array([s * tx, s * ty]), feats, dtype=np.float64)
        rb0 = build_conv_rulebook(m0.coords, ConvSpec(k, s, d, 3, 2))
        rb1 = build_conv_rulebook(m1.coords, ConvSpec(k, s, d, 3, 2))
        out0 = sac_forward(m0, rb0, params)
        out1 = sac_forward(m1, rb1, params)
        assert np.array_equal(out1.coords, out0.coords + np.array([tx, ty]))
        assert np.array_equal(out1.features, out0.features)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = random_coord_set(rng, 16, 60)
        feats = rng.normal(size=(len(pts), 3))
        perm = rng.permutation(len(pts))
        m0 = build_sparse_map(pts, feats, dtype=np.float64)
        m1 = build_sparse_map(pts[perm], feats[perm], dtype=np.float64)
        params = ConvParams(rng.normal(size=(4, 2, 3)), rng.normal(size=2))
        spec = ConvSpec(2, 2, 1, 3, 2)
        out0 = sac_forward(m0, build_conv_rulebook(m0.coords, spec), params)
        out1 = sac_forward(m1, build_conv_rulebook(m1.coords, spec), params)
        assert np.array_equal(out0.coords, out1.coords)
        assert np.array_equal(out0.features, out1.features)


class TestSacBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        pts = random_coord_set(rng, 8, 20)
        m = build_sparse_map(pts, rng.normal(size=(len(pts), 3)), num_ctx=1,
                             dtype=np.float64)
        rb = build_conv_rulebook(m.coords, ConvSpec(2, 2, 1, 3, 2))
        params = ConvParams(rng.normal(size=(4, 2, 3)), rng.normal(size=2))
        _, _, saved = sac_apply(m.features, m.context, rb, params)
        g_in, g_ctx, g_w, g_b = sac_backward(
            np.zeros((rb.n_out, 2)), np.zeros((1, 2)), saved, rb, params)
        assert not g_in.any() and not g_ctx.any()
        assert not g_w.any() and not g_b.any()

    def test_identity_config_gradients(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(5, 3))
        m = build_sparse_map([(i, 0) for i in range(5)], feats, dtype=np.float64)
        rb = build_conv_rulebook(m.coords, ConvSpec(1, 1, 1, 3, 3))
        params = ConvParams(np.eye(3)[None], np.zeros(3))
        _, _, saved = sac_apply(m.features, m.context, rb, params)
        g = rng.normal(size=(5, 3))
        g_in, _, g_w, g_b = sac_backward(g, np.zeros((0, 3)), saved, rb, params)
        assert np.allclose(g_in, g)
        assert np.allclose(g_w[0], g.T @ feats)
        assert np.allclose(g_b, g.sum(axis=0))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        pts = random_coord_set(rng, 6, 15)
        m = build_sparse_map(pts, rng.normal(size=(len(pts), 3)), num_ctx=2,
                             dtype=np.float64)
        ctx = rng.normal(size=(2, 3))
        m = m.with_features(m.features, ctx)
        rb = build_conv_rulebook(m.coords, ConvSpec(2, 2, 1, 3, 2))
        params = ConvParams(rng.normal(size=(4, 2, 3)), rng.normal(size=2))
        gf = rng.normal(size=(rb.n_out, 2))
        gc = rng.normal(size=(2, 2))

        def loss(w, b, feats, ctx_in):
            f, c, _ = sac_apply(feats, ctx_in, rb, ConvParams(w, b))
            return (f * gf).sum() + (c * gc).sum()

        _, _, saved = sac_apply(m.features, m.context, rb, params)
        g_in, g_ctx, g_w, g_b = sac_backward(gf, gc, saved, rb, params)
        eps = 1e-6
        for arr, grad in ((params.weights, g_w), (params.bias, g_b)):
            fd = np.zeros_like(arr)
            for i in range(arr.size):
                keep = arr.flat[i]
                arr.flat[i] = keep + eps
                up = loss(params.weights, params.bias, m.features, m.context)
                arr.flat[i] = keep - eps
                dn = loss(params.weights, params.bias, m.features, m.context)
                arr.flat[i] = keep
                fd.flat[i] = (up - dn) / (2 * eps)
            assert np.abs(fd - grad).max() < 1e-7
