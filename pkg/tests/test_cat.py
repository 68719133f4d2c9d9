import math

import numpy as np
import pytest

from handgcat.cat import (CatBlock, CatStack, PlainTransformer, attend, cat_fuse, cross_attend,
                          from_tokens, plain_transformer_baseline, positional_encode,
                          positional_encoding, to_tokens)
from handgcat.tensor import ShapeError, Tensor


def softmax_row(z):
    e = [math.exp(v - max(z)) for v in z]
    s = sum(e)
    return [v / s for v in e]


def oracle_attend(q, k, v, heads, residual=True):
    """Triple loop over heads, query tokens and key tokens."""
    n, d = q.shape
    dh = d // heads
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            logits = [sum(q[i, sl][c] * k[j, sl][c] for c in range(dh)) / math.sqrt(dh) for j in range(n)]
            a = softmax_row(logits)
            for j in range(n):
                out[i, sl] += a[j] * v[j, sl]
    return q + out if residual else out


def lin(layer, x):
    return x @ layer.weight.data + layer.bias.data


def oracle_block(block, FI, FP, grid):
    pe = positional_encoding(*grid, block.d_model)
    res = {}
    for s, F in (("I", FI), ("P", FP)):
        p = block.proj[s]
        res[s] = (lin(p["q"], F) + pe, lin(p["k"], F) + pe, lin(p["v"], F))
    (qI, kI, vI), (qP, kP, vP) = res["I"], res["P"]
    i_to_p = oracle_attend(qP, kI, vI, block.heads)
    p_to_i = oracle_attend(qI, kP, vP, block.heads)

    def mlp(m, y):
        return y + lin(m.fc2, np.maximum(lin(m.fc1, y), 0))
    return mlp(block.mlp["I"], FI + p_to_i), mlp(block.mlp["P"], FP + i_to_p)


def randomize(module, rng):
    for p in module.parameters():
        p.data[...] = rng.normal(size=p.shape) * 0.5
    return module


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding(32, 32, 16)
        assert np.array_equal(pe[0, 0::2], np.zeros(8))
        assert np.array_equal(pe[0, 1::2], np.ones(8))

    def test_pure(self):
        assert np.array_equal(positional_encoding(32, 32, 32), positional_encoding(32, 32, 32))

    def test_unique_over_grid(self):
        pe = positional_encoding(32, 32, 32)
        assert len({row.tobytes() for row in np.round(pe, 12)}) == 1024
        d = ((pe[:, None] - pe[None]) ** 2).sum(-1)
        assert d[~np.eye(1024, dtype=bool)].min() > 1e-6

    def test_wrong_token_count(self):
        with pytest.raises(ShapeError):
            positional_encode(Tensor(np.zeros((1, 1000, 8))), (32, 32))


class TestAttend:
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_oracle(self, rng, heads):
        q, k, v = (rng.normal(size=(9, 8)) for _ in range(3))
        got = attend(Tensor(q[None]), Tensor(k[None]), Tensor(v[None]), heads).data[0]
        assert np.abs(got - oracle_attend(q, k, v, heads)).max() <= 1e-9

    def test_rows_sum_to_one(self, rng):
        rec = []
        attend(*(Tensor(rng.normal(size=(2, 16, 8)) * 3) for _ in range(3)), heads=2, record=rec)
        a = rec[0]
        assert np.all(a >= 0)
        assert np.abs(a.sum(-1) - 1).max() <= 1e-6

    def test_zero_keys_give_uniform_mean(self, rng):
        q, v = rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 4))
        out = attend(Tensor(q), Tensor(np.zeros((1, 6, 4))), Tensor(v), heads=2).data
        np.testing.assert_allclose(out, q + v.mean(1, keepdims=True), atol=1e-12)

    def test_token_permutation(self, rng):
        q, k, v = (rng.normal(size=(1, 12, 8)) for _ in range(3))
        perm = rng.permutation(12)
        base = attend(Tensor(q), Tensor(k), Tensor(v), 2).data
        moved = attend(Tensor(q[:, perm]), Tensor(k[:, perm]), Tensor(v[:, perm]), 2).data
        np.testing.assert_allclose(moved, base[:, perm], atol=1e-12)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ShapeError):
            attend(*(Tensor(np.zeros((1, 4, 6))) for _ in range(3)), heads=4)


class TestBlock:
    @pytest.mark.parametrize("grid,d,h", [((4, 4), 8, 2), ((2, 3), 4, 1), ((3, 3), 8, 4)])
    def test_brute_force_oracle(self, rng, grid, d, h):
        block = randomize(CatBlock(d, h, rng), rng)
        n = grid[0] * grid[1]
        FI, FP = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        gI, gP = cross_attend(block, Tensor(FI[None]), Tensor(FP[None]), grid)
        wI, wP = oracle_block(block, FI, FP, grid)
        assert np.abs(gI.data[0] - wI).max() <= 1e-9
        assert np.abs(gP.data[0] - wP).max() <= 1e-9
        for a in block.last_attn:
            assert np.abs(a.sum(-1) - 1).max() <= 1e-6

    def test_single_token(self, rng):
        block = randomize(CatBlock(4, 2, rng), rng)
        for s in "IP":
            for part in ("fc1", "fc2"):
                m = getattr(block.mlp[s], part)
                m.weight.data[:] = 0
                m.bias.data[:] = 0
        FI, FP = rng.normal(size=(1, 1, 4)), rng.normal(size=(1, 1, 4))
        gI, gP = cross_attend(block, Tensor(FI), Tensor(FP), (1, 1))
        pe = positional_encoding(1, 1, 4)
        qP = lin(block.proj["P"]["q"], FP[0]) + pe
        vI = lin(block.proj["I"]["v"], FI[0])
        # F_P' = F_P + F_{I->P} and F_{I->P} == Q_P + V_I exactly (softmax weight is exactly 1)
        np.testing.assert_array_equal(gP.data[0], FP[0] + (qP + vI))

    def test_degenerate_identity_wiring(self, rng):
        block = randomize(CatBlock(8, 2, rng), rng)
        for s in "IP":
            block.proj[s]["v"].weight.data[:] = 0
            block.proj[s]["v"].bias.data[:] = 0
            for part in ("fc1", "fc2"):
                getattr(block.mlp[s], part).weight.data[:] = 0
                getattr(block.mlp[s], part).bias.data[:] = 0
        FI, FP = rng.normal(size=(1, 16, 8)), rng.normal(size=(1, 16, 8))
        gI, gP = cross_attend(block, Tensor(FI), Tensor(FP), (4, 4))
        pe = positional_encoding(4, 4, 8)
        np.testing.assert_allclose(gI.data[0], FI[0] + lin(block.proj["I"]["q"], FI[0]) + pe, atol=1e-12)
        np.testing.assert_allclose(gP.data[0], FP[0] + lin(block.proj["P"]["q"], FP[0]) + pe, atol=1e-12)

    def test_stream_mismatch(self, rng):
        block = CatBlock(4, 2, rng)
        with pytest.raises(ShapeError):
            cross_attend(block, Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 5, 4))), (2, 2))


class TestStack:
    def test_shapes(self, rng):
        st = CatStack(rng, c_image=16, c_prior=21, d_model=8, heads=2, blocks=2, out_channels=256)
        assert len(st.blocks) == 2
        out = cat_fuse(st, Tensor(rng.normal(size=(16, 32, 32))), Tensor(rng.normal(size=(21, 32, 32))))
        assert out.shape == (256, 32, 32)

    def test_default_block_count(self, rng):
        assert len(CatStack(rng, c_image=4, d_model=4, heads=1, out_channels=4).blocks) == 2

    def test_matches_token_oracle(self, rng):
        st = randomize(CatStack(rng, c_image=3, c_prior=2, d_model=4, heads=2, blocks=2, out_channels=5), rng)
        FI, FP = rng.normal(size=(3, 2, 3)), rng.normal(size=(2, 2, 3))
        tI = lin(st.lift_I, FI.reshape(3, 6).T)
        tP = lin(st.lift_P, FP.reshape(2, 6).T)
        for b in st.blocks:
            tI, tP = oracle_block(b, tI, tP, (2, 3))
        want = lin(st.fuse, np.concatenate([tI, tP], -1)).T.reshape(5, 2, 3)
        assert np.abs(cat_fuse(st, Tensor(FI), Tensor(FP)).data - want).max() <= 1e-9

    def test_token_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        t = to_tokens(Tensor(x))
        assert t.shape == (2, 20, 3)
        np.testing.assert_array_equal(t.data[1, 7], x[1, :, 1, 2])
        np.testing.assert_array_equal(from_tokens(t, (4, 5)).data, x)

    def test_grid_mismatch(self, rng):
        st = CatStack(rng, c_image=2, c_prior=2, d_model=4, heads=2, out_channels=2)
        with pytest.raises(ShapeError):
            cat_fuse(st, Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 2, 2))))


class TestPlainTransformer:
    def test_shape_and_rows(self, rng):
        pt = PlainTransformer(rng, c_image=8, c_prior=21, d_model=4, heads=2, out_channels=256)
        out = plain_transformer_baseline(pt, Tensor(rng.normal(size=(8, 32, 32))),
                                         Tensor(rng.normal(size=(21, 32, 32))))
        assert out.shape == (256, 32, 32)
        for layer in pt.layers:
            assert np.abs(layer.last_attn[0].sum(-1) - 1).max() <= 1e-6

    def test_self_attention_oracle(self, rng):
        pt = randomize(PlainTransformer(rng, c_image=3, c_prior=2, d_model=2, heads=2, out_channels=3), rng)
        FI, FP = rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 2, 2))
        x = np.concatenate([lin(pt.lift_I, FI.reshape(3, 4).T), lin(pt.lift_P, FP.reshape(2, 4).T)], -1)
        pe = positional_encoding(2, 2, 4)
        for layer in pt.layers:
            y = oracle_attend(lin(layer.q, x) + pe, lin(layer.k, x) + pe, lin(layer.v, x), 2, residual=False)
            z = x + y
            x = z + lin(layer.mlp.fc2, np.maximum(lin(layer.mlp.fc1, z), 0))
        want = lin(pt.fuse, x).T.reshape(3, 2, 2)
        assert np.abs(plain_transformer_baseline(pt, Tensor(FI), Tensor(FP)).data - want).max() <= 1e-9
