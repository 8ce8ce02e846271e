import numpy as np
import pytest

from cleftnet import tensor as T
from cleftnet.attention import (FAParams, SAParams, fa_attend, fa_forward,
                                gated_attention_cwa, gated_attention_swa, init_fa,
                                init_self_attention, self_attention)
from cleftnet.autodiff import Parameter, grad_check
from cleftnet.errors import ShapeError
from cleftnet.tensor import Tensor


def rng():
    return np.random.default_rng(42)


def make_fa(channels, query_shape, residual, seed=0, dtype=np.float64, attn=None):
    return init_fa(np.random.default_rng(seed), "fa", channels, query_shape,
                   residual, attn, dtype)


class TestShapes:
    def test_half_scenario(self):
        p = make_fa(8, (1, 2, 2), "maxpool-half")
        x = Tensor(rng().random((2, 4, 4, 8)))
        out = fa_forward(x, p)
        assert out.shape == (1, 2, 2, 8)

    def test_double_scenario(self):
        p = make_fa(4, (4, 4, 4), "trilinear-double")
        x = Tensor(rng().random((2, 2, 2, 4)))
        assert fa_forward(x, p).shape == (4, 4, 4, 4)

    def test_same_scenario(self):
        p = make_fa(4, (2, 3, 3), "identity")
        x = Tensor(rng().random((2, 3, 3, 4)))
        assert fa_forward(x, p).shape == (2, 3, 3, 4)

    def test_anisotropic_half(self):
        # depth preserved, in-plane halved: the in-network downsampling shape
        p = make_fa(4, (2, 2, 2), "maxpool-half")
        x = Tensor(rng().random((2, 4, 4, 4)))
        assert fa_forward(x, p).shape == (2, 2, 2, 4)

    def test_inconsistent_residual_rejected(self):
        p = make_fa(4, (3, 2, 2), "maxpool-half")
        x = Tensor(rng().random((4, 4, 4, 4)))
        with pytest.raises(ShapeError):
            fa_forward(x, p)

    def test_channel_invariant_enforced(self):
        g = np.random.default_rng(0)
        with pytest.raises(ShapeError):
            FAParams(query=Parameter("q", g.random((1, 1, 1, 3))),
                     key_kernel=Parameter("k", g.random((1, 1, 1, 4, 2))),
                     value_kernel=Parameter("v", g.random((1, 1, 1, 4, 2))),
                     out_kernel=Parameter("o", g.random((1, 1, 1, 2, 4))),
                     residual="identity")


class TestSingleVoxelClosure:
    def test_attended_value_broadcast(self):
        # one input voxel: every query position attends it with weight one,
        # so Z is that value vector at all positions
        p = make_fa(3, (2, 2, 1), "trilinear-double", attn=2)
        x = Tensor(rng().random((1, 1, 1, 3)))
        value = T.conv3d(x, p.value_kernel).data.reshape(-1)
        z = fa_attend(x, p)
        assert z.shape == (2, 2, 1, 2)
        for pos in z.data.reshape(-1, 2):
            np.testing.assert_allclose(pos, value, atol=1e-12)

    def test_full_output_closure(self):
        p = make_fa(3, (1, 1, 1), "identity", attn=2)
        x = Tensor(rng().random((1, 1, 1, 3)))
        value = T.conv3d(x, p.value_kernel)
        want = T.conv3d(value, p.out_kernel).data + x.data
        np.testing.assert_allclose(fa_forward(x, p).data, want, atol=1e-12)


def test_zero_out_kernel_isolates_residual():
    p = make_fa(4, (2, 2, 2), "identity")
    p.out_kernel.data[...] = 0.0
    x = Tensor(rng().random((2, 2, 2, 4)))
    np.testing.assert_array_equal(fa_forward(x, p).data, x.data)


def test_attention_columns_are_distributions():
    p = make_fa(4, (1, 2, 2), "maxpool-half", dtype=np.float64)
    x = Tensor(rng().random((2, 4, 4, 4)))
    keys = T.conv3d(x, p.key_kernel).data.reshape(-1, p.query.shape[-1])
    q = p.query.data.reshape(-1, p.query.shape[-1]).T
    attn = T.softmax_columns(Tensor(keys @ q)).data
    assert (attn >= 0).all()
    np.testing.assert_allclose(attn.sum(axis=0), np.ones(attn.shape[1]), atol=1e-12)


def test_joint_voxel_permutation_leaves_attention_output_unchanged():
    # attention is a weighted sum over voxels, so permuting the input voxels
    # (keys and values move together) leaves Z unchanged; residual excluded
    p = make_fa(4, (2, 2, 2), "identity")
    x = rng().random((2, 2, 2, 4))
    z = fa_attend(Tensor(x), p).data
    flat = x.reshape(-1, 4)
    perm = np.random.default_rng(7).permutation(flat.shape[0])
    z_perm = fa_attend(Tensor(flat[perm].reshape(2, 2, 2, 4)), p).data
    np.testing.assert_allclose(z_perm, z, atol=1e-12)


def test_batched_matches_per_item():
    p = make_fa(4, (1, 2, 2), "maxpool-half")
    x = rng().random((3, 2, 4, 4, 4))
    batched = fa_forward(Tensor(x), p).data
    for i in range(3):
        single = fa_forward(Tensor(x[i]), p).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_fa_gradients_pass_gradcheck():
    p = make_fa(3, (1, 2, 2), "maxpool-half", attn=2)
    x = Tensor(rng().random((2, 4, 4, 3)))

    def f():
        return T.sum_all(T.square(fa_forward(x, p)))

    report = grad_check(f, p.parameters(), tol=1e-4)
    assert report.passed, report.worst()


class TestGatedAttention:
    def test_identical_voxels_split_evenly(self):
        x = np.tile(np.array([1.0, 2.0]), (1, 1, 2, 1))  # two identical voxels
        q = Tensor(np.array([0.3, -0.2]))
        out = gated_attention_swa(Tensor(x), q).data
        np.testing.assert_allclose(out, 0.5 * x, atol=1e-12)

    def test_single_voxel_identity(self):
        x = rng().random((1, 1, 1, 3))
        out = gated_attention_swa(Tensor(x), Tensor(rng().random(3))).data
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_hand_evaluated_case(self):
        x = np.array([[1.0, 0.0], [0.0, 2.0]]).reshape(1, 1, 2, 2)
        q = np.array([1.0, 0.5])
        scores = np.array([x[0, 0, 0] @ q, x[0, 0, 1] @ q])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        want = x * weights.reshape(1, 1, 2, 1)
        out = gated_attention_swa(Tensor(x), Tensor(q)).data
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            gated_attention_swa(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(3)))

    def test_cwa_identical_channels(self):
        base = rng().random((1, 1, 2, 1))
        x = np.concatenate([base, base], axis=-1)  # two identical channels
        out = gated_attention_cwa(Tensor(x), Tensor(np.array([0.4, -0.1]))).data
        np.testing.assert_allclose(out, 0.5 * x, atol=1e-12)

    def test_cwa_single_channel_identity(self):
        x = rng().random((1, 2, 2, 1))
        out = gated_attention_cwa(Tensor(x), Tensor(rng().random(4))).data
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_cwa_hand_evaluated_case(self):
        x = np.array([[1.0, 3.0], [2.0, -1.0]]).reshape(1, 1, 2, 2)
        q = np.array([0.5, 1.0])
        m = x.reshape(2, 2)  # voxels x channels
        scores = m.T @ q     # per channel
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        want = x * weights.reshape(1, 1, 1, 2)
        out = gated_attention_cwa(Tensor(x), Tensor(q)).data
        np.testing.assert_allclose(out, want, atol=1e-12)


class TestSelfAttention:
    def test_single_position_closure(self):
        p = init_self_attention(np.random.default_rng(0), "sa", 3, 2, np.float64)
        x = Tensor(rng().random((1, 1, 1, 3)))
        value = T.conv3d(x, p.value_kernel)
        want = T.conv3d(value, p.out_kernel).data + x.data
        np.testing.assert_allclose(self_attention(x, p).data, want, atol=1e-12)

    def test_shape_preserved(self):
        p = init_self_attention(np.random.default_rng(1), "sa", 4, dtype=np.float64)
        x = Tensor(rng().random((2, 3, 4, 4)))
        assert self_attention(x, p).shape == x.shape

    def test_matches_fa_with_constructed_query(self):
        # with basis-vector voxels, a 1x1x1 query projection can reproduce any
        # fixed query tensor exactly: row i of the kernel is query vector i
        g = np.random.default_rng(3)
        c = 4          # equals the voxel count so inputs can be basis vectors
        fa = make_fa(c, (1, 2, 2), "identity", attn=2)
        x = np.eye(c).reshape(1, 2, 2, c)

        wq = fa.query.data.reshape(4, 2).reshape(1, 1, 1, 4, 2)
        sa = SAParams(query_kernel=Parameter("wq", wq.copy()),
                      key_kernel=Parameter("wk", fa.key_kernel.data.copy()),
                      value_kernel=Parameter("wv", fa.value_kernel.data.copy()),
                      out_kernel=Parameter("wo", fa.out_kernel.data.copy()))
        out_fa = fa_forward(Tensor(x), fa).data
        out_sa = self_attention(Tensor(x), sa).data
        np.testing.assert_array_equal(out_sa, out_fa)
