"""Spatial/channel gates, self-attention, and the SAFM/GLFM fusion blocks."""

import math

import numpy as np
import pytest

import ocenet.autograd as ag
from ocenet.autograd import Tensor
from ocenet.attention import GlfmBlock, SafmBlock, SeBlock, SelfAttention2d, SpaBlock
from ocenet.errors import DimensionError


class TestSpa:
    def test_output_bounded_by_input(self, rng):
        spa = SpaBlock(3, rng=rng)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        out = spa(Tensor(x)).data
        assert (np.abs(out) <= np.abs(x) + 1e-7).all()
        m = spa.attention_map(Tensor(x)).data
        assert m.shape == (2, 1, 5, 5)
        assert ((m > 0) & (m < 1)).all()

    def test_zero_input_zero_output(self, rng):
        spa = SpaBlock(3, rng=rng)
        out = spa(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)


class TestSe:
    def test_forced_gates_give_identity(self, rng):
        se = SeBlock(4, rng=rng)
        se.expand.weight.data[...] = 0.0
        se.expand.bias.data[...] = 100.0
        x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(se(Tensor(x)).data, x)

    def test_gates_depend_only_on_channel_means(self, rng):
        se = SeBlock(4, rng=rng)
        base = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
        shuffled = base.reshape(1, 4, 36)[:, :, rng.permutation(36)].reshape(1, 4, 6, 6)
        g1 = se.gates(Tensor(base)).data
        g2 = se.gates(Tensor(np.ascontiguousarray(shuffled))).data
        np.testing.assert_allclose(g1, g2, atol=1e-6)
        assert ((g1 > 0) & (g1 < 1)).all()

    def test_reduction_clipped_for_narrow_input(self, rng):
        se = SeBlock(2, rng=rng)
        assert se.squeeze.out_features == 1


class TestSelfAttention:
    def test_zero_value_projection_is_identity(self, rng):
        sa = SelfAttention2d(3, rng=rng)
        sa.value.weight.data[...] = 0.0
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(sa(Tensor(x)).data, x)

    def test_rows_sum_to_one(self, rng):
        sa = SelfAttention2d(5, rng=rng)
        x = Tensor(rng.normal(size=(2, 5, 3, 4)).astype(np.float32))
        rows = sa.attention_rows(x).data
        assert rows.shape == (2, 12, 12)
        np.testing.assert_allclose(rows.sum(axis=2), 1.0, atol=1e-6)
        assert ((rows > 0) & (rows < 1)).all()

    def test_two_position_input_matches_hand_computation(self):
        with ag.precision(np.float64):
            rng = np.random.default_rng(7)
            sa = SelfAttention2d(1, rng=rng)
            sa.query.bias.data[...] = 0.3
            sa.key.bias.data[...] = -0.1
            sa.value.bias.data[...] = 0.2
            x = np.array([[[[0.5, -1.2]]]])
            wq = float(sa.query.weight.data.squeeze())
            wk = float(sa.key.weight.data.squeeze())
            wv = float(sa.value.weight.data.squeeze())
            q = wq * x[0, 0, 0] + 0.3
            k = wk * x[0, 0, 0] - 0.1
            v = wv * x[0, 0, 0] + 0.2
            logits = np.outer(q, k) / math.sqrt(1.0)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            rows = e / e.sum(axis=1, keepdims=True)
            got_rows = sa.attention_rows(Tensor(x)).data[0]
            np.testing.assert_allclose(got_rows, rows, atol=1e-12)
            want = x[0, 0, 0] + rows @ v
            np.testing.assert_allclose(sa(Tensor(x)).data[0, 0, 0], want, atol=1e-12)


class TestGlfm:
    def test_zero_inputs_zero_output(self, rng):
        glfm = GlfmBlock(3, 5, rng=rng)
        low = Tensor(np.zeros((2, 3, 4, 4), dtype=np.float32))
        high = Tensor(np.zeros((2, 5, 4, 4), dtype=np.float32))
        np.testing.assert_array_equal(glfm(low, high).data, 0.0)

    def test_output_width_is_skip_width(self, rng):
        glfm = GlfmBlock(6, 10, rng=rng)
        low = Tensor(rng.normal(size=(2, 6, 4, 4)).astype(np.float32))
        high = Tensor(rng.normal(size=(2, 10, 4, 4)).astype(np.float32))
        assert glfm(low, high).shape == (2, 6, 4, 4)

    def test_spatial_mismatch_rejected(self, rng):
        glfm = GlfmBlock(3, 3, rng=rng)
        with pytest.raises(DimensionError):
            glfm(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)),
                 Tensor(np.zeros((1, 3, 5, 5), dtype=np.float32)))

    def test_batch_permutation_equivariance(self, rng):
        glfm = GlfmBlock(3, 4, rng=rng)
        low = rng.normal(size=(3, 3, 4, 4)).astype(np.float32)
        high = rng.normal(size=(3, 4, 4, 4)).astype(np.float32)
        perm = np.array([2, 0, 1])
        out = glfm(Tensor(low), Tensor(high)).data
        out_perm = glfm(Tensor(np.ascontiguousarray(low[perm])),
                        Tensor(np.ascontiguousarray(high[perm]))).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-6)


class TestSafm:
    def test_degenerate_selection_reduces_to_fused_plain(self, rng):
        safm = SafmBlock(4, rng=rng)
        safm.selection_override = np.array([1.0, 0.0])
        safm.bypass_spa = True
        plain = Tensor(rng.normal(size=(2, 4, 5, 5)).astype(np.float32))
        oriented = Tensor(rng.normal(size=(2, 4, 5, 5)).astype(np.float32))
        got = safm(plain, oriented).data
        want = safm.fuse(plain).data
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_identical_branches_swap_invariant(self, rng):
        safm = SafmBlock(3, rng=rng)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(safm(x, x).data, safm(x, x).data)

    def test_selection_weights_sum_to_one(self, rng):
        safm = SafmBlock(5, rng=rng)
        plain = Tensor(rng.normal(size=(3, 5, 4, 4)).astype(np.float32))
        oriented = Tensor(rng.normal(size=(3, 5, 4, 4)).astype(np.float32))
        w = safm.selection_weights(plain, oriented).data
        assert w.shape == (3, 2, 5)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
        assert ((w > 0) & (w < 1)).all()

    def test_shape_mismatch_rejected(self, rng):
        safm = SafmBlock(3, rng=rng)
        with pytest.raises(DimensionError):
            safm(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)),
                 Tensor(np.zeros((1, 3, 5, 5), dtype=np.float32)))

    def test_bottleneck_floor(self, rng):
        safm = SafmBlock(4, rng=rng)
        assert safm.squeeze.out_features == 8


def _spa_case(rng):
    block = SpaBlock(2, rng=rng)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    return block, lambda: block(x), [x]


def _se_case(rng):
    block = SeBlock(3, rng=rng)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    return block, lambda: block(x), [x]


def _sa_case(rng):
    block = SelfAttention2d(3, rng=rng)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    return block, lambda: block(x), [x]


def _safm_case(rng):
    block = SafmBlock(2, rng=rng)
    a = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    return block, lambda: block(a, b), [a, b]


def _glfm_case(rng):
    block = GlfmBlock(2, 3, rng=rng)
    low = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
    high = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    return block, lambda: block(low, high), [low, high]


@pytest.mark.parametrize("case", [_spa_case, _se_case, _sa_case, _safm_case, _glfm_case],
                         ids=["spa", "se", "sa", "safm", "glfm"])
def test_gradients_match_finite_differences(case):
    rng = np.random.default_rng(11)
    with ag.precision(np.float64):
        block, run, inputs = case(rng)
        coeff = Tensor(rng.normal(size=run().shape))
        wrt = inputs + block.parameters()
        ag.gradcheck(lambda: (run() * coeff).sum(), wrt,
                     eps=1e-4, rtol=1e-4, atol=1e-7,
                     max_probes=40, rng=np.random.default_rng(3))
