import numpy as np
import pytest

from bevpredformer import tensor as T
from bevpredformer.bev_encoder import BEVCrossAttention, BEVEncoder, BEVFeatureMap, BEVSelfAttention, SparseUNet
from bevpredformer.geometry import BEVGridConfig, ReferenceSet, build_reference_set, default_rig, Pose
from bevpredformer.image_encoder import Backbone, ImageEncoder, Neck
from bevpredformer.nn import MultiHeadAttention
from bevpredformer.tensor import ShapeError, Tensor


def probe(shape, seed=0):
    w = Tensor(np.random.default_rng(seed + 100).standard_normal(shape))
    return lambda out: T.sum(out * w)


# image encoder ---------------------------------------------------------------

def test_backbone_and_neck_shapes():
    enc = ImageEncoder(np.random.default_rng(0), c_out=32)
    imgs = Tensor(np.random.default_rng(1).random((2, 3, 64, 96)))
    f8, f16 = enc.backbone(imgs)
    assert f8.shape == (2, 32, 8, 12) and f16.shape == (2, 64, 4, 6)
    feats = enc(imgs)
    assert feats.fused.shape == (2, 32, 8, 12) and feats.stride == 8


def test_indivisible_image_rejected():
    with pytest.raises(ShapeError):
        Backbone(np.random.default_rng(0))(Tensor(np.zeros((1, 3, 60, 96))))


def test_zero_image_gives_zero_features():
    enc = ImageEncoder(np.random.default_rng(0))
    out = enc(Tensor(np.zeros((1, 3, 32, 32)))).fused.data
    assert np.all(out == 0)


def test_backbone_shift_equivariance():
    bb = Backbone(np.random.default_rng(2))
    img = np.random.default_rng(3).random((1, 3, 64, 128))
    shifted = np.zeros_like(img)
    shifted[..., 16:] = img[..., :-16]
    _, a = bb(Tensor(img))
    _, b = bb(Tensor(shifted))
    # interior columns away from both the image border and the zero fill
    np.testing.assert_allclose(b.data[..., 3:7], a.data[..., 2:6], atol=1e-4)


def test_neck_batch_mismatch():
    neck = Neck(4, 6, 5, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        neck(Tensor(np.zeros((2, 4, 4, 6))), Tensor(np.zeros((1, 6, 2, 3))))


def test_neck_zero_coarse_input_uses_fine_path_only():
    rng = np.random.default_rng(0)
    neck = Neck(4, 6, 5, rng)
    f8 = Tensor(rng.standard_normal((2, 4, 4, 6)))
    full = neck(f8, Tensor(np.zeros((2, 6, 2, 3)))).data
    # scrambling the weights that read the coarse channels changes nothing
    neck.block1.conv.weight.data[:, 4:] = rng.standard_normal(neck.block1.conv.weight.data[:, 4:].shape)
    again = neck(f8, Tensor(np.zeros((2, 6, 2, 3)))).data
    np.testing.assert_array_equal(full, again)


def test_neck_gradient_reaches_both_scales():
    rng = np.random.default_rng(0)
    neck = Neck(4, 6, 5, rng)
    f8, f16 = Tensor(rng.standard_normal((2, 4, 4, 6))), Tensor(rng.standard_normal((2, 6, 2, 3)))
    p = probe((2, 5, 4, 6))
    assert T.finite_diff_check(lambda v: p(neck(v, f16)), f8) < 1e-2
    assert T.finite_diff_check(lambda v: p(neck(f8, v)), f16) < 1e-2


def test_batch_permutation_equivariance():
    enc = ImageEncoder(np.random.default_rng(0), c_out=8, widths=(4, 4, 8, 8))
    imgs = np.random.default_rng(1).random((3, 3, 32, 32))
    perm = [2, 0, 1]
    a = enc(Tensor(imgs)).fused.data
    b = enc(Tensor(imgs[perm])).fused.data
    np.testing.assert_array_equal(a[perm], b)


def test_image_encoder_end_to_end_gradcheck():
    enc = ImageEncoder(np.random.default_rng(0), c_out=4, widths=(4, 4, 4, 4))
    x = Tensor(np.random.default_rng(1).random((1, 3, 32, 32)))
    p = probe((1, 4, 4, 4))
    assert T.finite_diff_check(lambda v: p(enc(v).fused), x, max_elements=40) < 1e-2


# BEV encoder -----------------------------------------------------------------

def test_self_attention_zero_values_is_normed_residual():
    rng = np.random.default_rng(0)
    sa = BEVSelfAttention(8, 2, rng)
    sa.attn.v.weight.data[...] = 0
    x = Tensor(rng.standard_normal((1, 5, 8)))
    np.testing.assert_allclose(sa(x).data, sa.norm(x).data, atol=1e-6)
    np.testing.assert_allclose(sa.attn.last_attention.sum(-1), 1.0, atol=1e-6)


def test_two_token_attention_by_hand():
    mha = MultiHeadAttention(2, 1, np.random.default_rng(0))
    for lin in (mha.q, mha.k, mha.v, mha.o):
        lin.weight.data[...] = np.eye(2)
    x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    out = mha(Tensor(x)).data[0]
    s = x[0] @ x[0].T / np.sqrt(2)
    p = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    np.testing.assert_allclose(out, p @ x[0], atol=1e-5)


def _refs(pixels, valid):
    return ReferenceSet(np.asarray(pixels, dtype=np.float64), np.asarray(valid, dtype=np.float32))


def test_cross_attention_all_invalid_and_singleton():
    rng = np.random.default_rng(0)
    hw, c, nz = 6, 8, 2
    ca = BEVCrossAttention(c, 2, nz, rng)
    feats = Tensor(rng.standard_normal((1, c, 4, 4)))
    pix = rng.uniform(0, 24, (1, 1, nz, hw, 2))
    q = Tensor(rng.standard_normal((hw, c)))

    none = _refs(pix, np.zeros((1, 1, nz, hw)))
    out = ca(q, *ca.sample(feats, none, 0, 8))
    np.testing.assert_allclose(out.data, ca.norm(q).data, atol=1e-6)
    assert np.all(np.isfinite(out.data))

    one = np.zeros((1, 1, nz, hw))
    one[0, 0, 1] = 1
    ca(q, *ca.sample(feats, _refs(pix, one), 0, 8))
    np.testing.assert_allclose(ca.last_attention[..., 1], 1.0, atol=1e-6)
    np.testing.assert_allclose(ca.last_attention[..., 0], 0.0, atol=1e-6)


def test_duplicate_camera_leaves_projection_unchanged():
    rng = np.random.default_rng(0)
    cfg = BEVGridConfig(8, 8, (-8.0, 8.0), (-8.0, 8.0), (0.0, 1.0))
    cam = default_rig()[0]
    poses = [Pose.identity()] * 2
    enc = BEVEncoder(8, 8, 8, 2, rng, n_layers=2, heads=2)
    feats = rng.standard_normal((2, 8, 8, 12))
    single = enc.project(Tensor(feats), build_reference_set(cfg, [cam], poses), 8).data
    doubled = np.repeat(feats, 2, axis=0)
    double = enc.project(Tensor(doubled), build_reference_set(cfg, [cam, cam], poses), 8).data
    np.testing.assert_allclose(single, double, atol=1e-5)


def test_bev_encoder_shapes_and_frame_determinism():
    rng = np.random.default_rng(0)
    cfg = BEVGridConfig(8, 8, (-8.0, 8.0), (-8.0, 8.0), (0.0, 1.0))
    rig = default_rig()
    refs = build_reference_set(cfg, rig, [Pose.identity()] * 2)
    enc = BEVEncoder(8, 8, 8, 2, rng, n_layers=1, heads=2)
    one = rng.standard_normal((2, 8, 8, 12))
    out = enc(Tensor(np.concatenate([one, one])), refs, 8)
    assert out.shape == (2, 8, 8, 8)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    fm = BEVFeatureMap(out, "refined")
    assert fm.frame_times == [-1, 0]
    with pytest.raises(ValueError):
        BEVFeatureMap(out, "bogus")
    with pytest.raises(ShapeError):
        enc(Tensor(one), refs, 8)


def test_gradient_reaches_image_encoder():
    rng = np.random.default_rng(0)
    cfg = BEVGridConfig(4, 4, (-8.0, 8.0), (-8.0, 8.0), (0.0,))
    refs = build_reference_set(cfg, default_rig(32, 32), [Pose.identity()])
    img_enc = ImageEncoder(rng, c_out=4, widths=(4, 4, 4, 4))
    enc = BEVEncoder(4, 4, 4, 1, rng, n_layers=1, heads=1)
    p = probe((1, 4, 4, 4))
    img_enc.neck.block2.conv.weight.requires_grad = True
    w = img_enc.neck.block2.conv.weight

    def f(v):
        w_saved = w.data
        img_enc.neck.block2.conv.weight = v
        try:
            return p(enc(img_enc(Tensor(imgs)).fused, refs, 8))
        finally:
            img_enc.neck.block2.conv.weight = w
            w.data = w_saved

    imgs = rng.random((2, 3, 32, 32))
    assert T.finite_diff_check(f, Tensor(w.data), max_elements=30) < 1e-2


def test_unet_shape_zero_and_skip_probe():
    rng = np.random.default_rng(0)
    unet = SparseUNet(4, rng)
    assert np.all(unet(Tensor(np.zeros((1, 4, 8, 8)))).data == 0)
    with pytest.raises(ShapeError):
        unet(Tensor(np.zeros((1, 4, 6, 8))))
    board = np.indices((8, 8)).sum(0) % 2
    x = Tensor(np.broadcast_to(board, (1, 4, 8, 8)).astype(float))
    full = unet(x).data
    assert full.shape == (1, 4, 8, 8)
    unet.dec1.conv.weight.data[:, 8:] = 0
    unet.dec0.conv.weight.data[:, 4:] = 0
    assert np.abs(unet(x).data - full).max() > 1e-3
