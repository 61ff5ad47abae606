import itertools

import numpy as np
import pytest

from fsnet import attention as att
from fsnet.geometry import SubRegionGrid
from fsnet.gradcheck import TOL_PIECEWISE, TOL_SMOOTH, check_gradients, kinks_clear
from fsnet.ops import ConvParams
from fsnet.tensor import ShapeError

from oracles import brute_selective_pool, random_box


def bank_params(rng, c_in, cs, direction="center", dtype=np.float64):
    return att.SubregionBankParams.init(c_in, cs, rng, direction=direction, std=1.0, bias=0.0, dtype=dtype)


# --- dimension reduction ------------------------------------------------------

def test_reduce_identity_and_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 5, 5))
    eye = ConvParams(np.eye(4).reshape(4, 4, 1, 1), np.zeros(4))
    assert np.array_equal(att.reduce_dim(x, eye), x)
    zero = ConvParams(np.zeros((2, 4, 1, 1)), np.zeros(2))
    assert np.array_equal(att.reduce_dim(x, zero), np.zeros((1, 2, 5, 5)))


def test_reduce_matches_per_pixel_matvec():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 8, 6, 7))
    p = ConvParams(rng.normal(size=(2, 8, 1, 1)), rng.normal(size=2))
    out = att.reduce_dim(x, p)
    for i, j in itertools.product(range(6), range(7)):
        expected = p.weight[:, :, 0, 0] @ x[0, :, i, j] + p.bias
        np.testing.assert_allclose(out[0, :, i, j], expected, rtol=1e-13, atol=1e-14)


def test_reduce_rejects_3x3():
    with pytest.raises(ShapeError):
        att.reduce_dim(np.zeros((1, 2, 4, 4)), ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1)))


# --- banks -----------------------------------------------------------------------

def test_default_bank_sizes():
    rng = np.random.default_rng(2)
    feat = rng.normal(size=(1, 8, 6, 6))
    sr = att.build_subregion_bank(feat, att.SubregionBankParams.init(8, 40, rng))
    assert sr.channels == 360 and sr.groups == 9 and sr.values.shape == (1, 360, 6, 6)
    ar = att.build_aspect_bank(feat, ConvParams(rng.normal(size=(120, 8, 1, 1)), np.zeros(120)), 3)
    assert ar.channels == 120 and ar.cs == 40


def test_offset_tables():
    assert att.offset_table() == [(1, 1), (1, 0), (1, -1), (0, 1), (0, 0), (0, -1), (-1, 1), (-1, 0), (-1, -1)]
    assert att.offset_table(direction="outside") == [(-dr, -dc) for dr, dc in att.offset_table()]
    rand = att.offset_table(direction="random", seed=3)
    assert sorted(rand) == sorted(att.offset_table())
    assert rand == att.offset_table(direction="random", seed=3)
    assert att.offset_table(direction="none") == [(0, 0)] * 9
    with pytest.raises(ValueError):
        att.offset_table(direction="sideways")


def test_bank_params_reject_wrong_offsets():
    rng = np.random.default_rng(4)
    good = bank_params(rng, 2, 3)
    convs = list(good.convs)
    convs[0], convs[1] = convs[1], convs[0]
    with pytest.raises(ValueError, match="offset table"):
        att.SubregionBankParams(convs)
    with pytest.raises(ValueError, match="convolutions"):
        att.SubregionBankParams(good.convs[:8])


def test_bank_shared_unshifted_slices_identical():
    rng = np.random.default_rng(5)
    feat = rng.normal(size=(1, 3, 7, 7))
    w, b = rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    params = att.SubregionBankParams([ConvParams(w, b) for _ in range(9)], direction="none")
    bank = att.build_subregion_bank(feat, params)
    for g in range(2, 10):
        assert np.array_equal(bank.group_slice(g), bank.group_slice(1))


def test_bank_group_order_follows_offsets():
    rng = np.random.default_rng(6)
    feat = rng.normal(size=(1, 3, 7, 7))
    params = bank_params(rng, 3, 2)
    bank = att.build_subregion_bank(feat, params)
    from fsnet.ops import shifted_conv2d
    for k, p in enumerate(params.convs, start=1):
        assert np.array_equal(bank.group_slice(k), shifted_conv2d(feat, p))


def test_aspect_bank_block_slicing():
    rng = np.random.default_rng(7)
    feat = rng.normal(size=(1, 5, 6, 6))
    p = ConvParams(rng.normal(size=(12, 5, 1, 1)), rng.normal(size=12))
    bank = att.build_aspect_bank(feat, p, 3)
    for k in range(1, 4):
        block = ConvParams(p.weight[(k - 1) * 4:k * 4], p.bias[(k - 1) * 4:k * 4])
        np.testing.assert_allclose(bank.group_slice(k), att.reduce_dim(feat, block), rtol=1e-13, atol=1e-14)


def test_zero_banks_select_zero_features():
    rng = np.random.default_rng(8)
    feat = rng.normal(size=(1, 4, 8, 8))
    sr = att.build_subregion_bank(feat, att.SubregionBankParams.init(4, 2, rng, std=0.0, bias=0.0))
    ar = att.build_aspect_bank(feat, ConvParams(np.zeros((6, 4, 1, 1)), np.zeros(6)), 3)
    boxes = np.array([[0.0, 0.0, 20.0, 30.0]])
    m_sr = att.selective_roi_pool(sr, boxes, 7, 7, "sub-region", 4).values
    m_ar = att.selective_roi_pool(ar, boxes, 7, 7, "aspect", 4).values
    f = rng.normal(size=m_sr.shape)
    assert np.array_equal(att.merge_selected_features(f, m_sr, m_ar), np.zeros_like(f))


def test_bank_channel_invariant():
    with pytest.raises(ShapeError):
        att.AttentionBank(np.zeros((1, 10, 4, 4)), 3, 3)


# --- selective pooling ----------------------------------------------------------

def test_center_bin_reads_group_5(backend):
    rng = np.random.default_rng(9)
    bank = att.AttentionBank(rng.normal(size=(1, 360, 10, 10)), 9, 40)
    pooled = att.selective_roi_pool(bank, np.array([[0.0, 0.0, 40.0, 40.0]]), 7, 7, "sub-region", 4)
    chan = pooled.argmax[0, :, 3, 3] // 100
    assert chan.min() == 160 and chan.max() == 199
    assert np.array_equal(np.sort(chan), np.arange(160, 200))


def test_constant_slices(backend):
    cs = 3
    values = np.concatenate([np.full((1, cs, 8, 8), g, dtype=np.float64) for g in range(1, 10)], axis=1)
    bank = att.AttentionBank(values, 9, cs)
    boxes = np.array([[0.0, 0.0, 32.0, 20.0], [4.0, 4.0, 9.0, 30.0]])
    pooled = att.selective_roi_pool(bank, boxes, 7, 7, "sub-region", 4)
    from fsnet.geometry import subregion_table
    for r in range(2):
        for c in range(cs):
            assert np.array_equal(pooled.values[r, c], subregion_table(7, 7).astype(float))
    ar_vals = np.concatenate([np.full((1, cs, 8, 8), g, dtype=np.float64) for g in range(1, 4)], axis=1)
    ar = att.selective_roi_pool(att.AttentionBank(ar_vals, 3, cs), boxes, 7, 7, "aspect", 4)
    assert np.all(ar.values[0] == 3) and np.all(ar.values[1] == 1)


@pytest.mark.parametrize("mode", ["sub-region", "aspect"])
@pytest.mark.parametrize("seed", range(25))
def test_selective_pool_matches_brute_force(backend, mode, seed):
    rng = np.random.default_rng(seed)
    cs = int(rng.integers(1, 4))
    groups = 9 if mode == "sub-region" else 3
    H, W = rng.integers(4, 14, 2)
    stride = int(rng.choice([1, 2, 4]))
    bank = att.AttentionBank(rng.normal(size=(1, groups * cs, H, W)), groups, cs)
    box = random_box(rng, size=max(H, W) * stride)
    pooled = att.selective_roi_pool(bank, box[None], 7, 7, mode, stride)
    values, chans = brute_selective_pool(bank.values, box, 7, 7, stride, cs, mode)
    assert np.array_equal(pooled.values[0], values)
    assert np.array_equal(pooled.argmax[0] // (H * W), chans)


@pytest.mark.parametrize("seed", range(10))
def test_provenance_channel_slices(seed):
    rng = np.random.default_rng(seed)
    cs = 4
    bank = att.AttentionBank(rng.normal(size=(1, 9 * cs, 12, 12)), 9, cs)
    boxes = np.stack([random_box(rng, 48) for _ in range(6)])
    pooled = att.selective_roi_pool(bank, boxes, 7, 7, "sub-region", 4)
    chan = pooled.argmax // (12 * 12)
    k = pooled.groups[:, None]
    assert np.all(chan >= (k - 1) * cs) and np.all(chan < k * cs)
    # k depends only on the bin, never on channel or RoI
    assert np.all(pooled.groups == pooled.groups[:1])
    ar_bank = att.AttentionBank(rng.normal(size=(1, 3 * cs, 12, 12)), 3, cs)
    ar = att.selective_roi_pool(ar_bank, boxes, 7, 7, "aspect", 4)
    assert np.all(ar.groups == ar.groups[:, :1, :1])


def test_group_permutation_consistency():
    rng = np.random.default_rng(11)
    cs = 2
    values = rng.normal(size=(1, 9 * cs, 10, 10))
    perm = rng.permutation(9)  # new group j holds old group perm[j]
    permuted = np.concatenate([values[:, perm[j] * cs:(perm[j] + 1) * cs] for j in range(9)], axis=1)
    boxes = np.stack([random_box(rng, 40) for _ in range(5)])
    base = att.selective_roi_pool(att.AttentionBank(values, 9, cs), boxes, 7, 7, "sub-region", 4)
    inverse = np.argsort(perm)
    from fsnet.geometry import pool_rois
    groups = inverse[base.groups - 1] + 1
    again = pool_rois(permuted, boxes, np.zeros(5, dtype=np.int64), 7, 7, 4, groups, cs)
    assert np.array_equal(base.values, again.values)


def test_selective_backward_basics(backend):
    rng = np.random.default_rng(12)
    bank = att.AttentionBank(rng.normal(size=(1, 18, 10, 10)), 9, 2)
    pooled = att.selective_roi_pool(bank, np.stack([random_box(rng, 40) for _ in range(4)]), 7, 7, "sub-region", 4)
    assert np.array_equal(att.selective_pool_backward(np.zeros_like(pooled.values), pooled), np.zeros_like(bank.values))
    g = rng.normal(size=pooled.values.shape)
    assert np.isclose(att.selective_pool_backward(g, pooled).sum(), g.sum(), rtol=1e-12)
    with pytest.raises(ValueError, match="provenance"):
        att.selective_pool_backward(g, None)


@pytest.mark.parametrize("mode", ["sub-region", "aspect"])
@pytest.mark.parametrize("seed", range(20))
def test_selective_pool_gradients(mode, seed):
    rng = np.random.default_rng(seed)
    groups = 9 if mode == "sub-region" else 3
    cs = 8 // groups if mode == "aspect" else 1
    while True:
        values = rng.normal(size=(1, groups * cs, 10, 10)) if mode == "sub-region" else rng.normal(size=(1, 8, 10, 10))
        if mode == "aspect":
            values = values[:, :6]
            cs = 2
        bank = att.AttentionBank(values, groups, cs)
        boxes = np.stack([random_box(rng, 40) for _ in range(2)])
        pooled = att.selective_roi_pool(bank, boxes, 3, 3, mode, 4)
        if kinks_clear(pools=[(values, pooled)]):
            break
    w = rng.normal(size=pooled.values.shape)

    def loss():
        return float((w * att.selective_roi_pool(bank, boxes, 3, 3, mode, 4).values).sum())

    report = check_gradients(f"selective_pool[{mode}]", seed, loss, {"bank": values},
                             {"bank": att.selective_pool_backward(w, pooled)}, TOL_PIECEWISE)
    assert report.passed, str(report)


def test_selective_pool_gradient_8ch_bank():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(1, 8, 10, 10))
    bank = att.AttentionBank(values, 1, 8)
    boxes = np.array([[2.0, 3.0, 30.0, 36.0]])
    pooled = att.selective_roi_pool(bank, boxes, 7, 7, "sub-region", 4, grid=SubRegionGrid(1, 1))
    assert kinks_clear(pools=[(values, pooled)])
    w = rng.normal(size=pooled.values.shape)
    report = check_gradients("selective_pool[1x8x10x10]", 0,
                             lambda: float((w * att.selective_roi_pool(bank, boxes, 7, 7, "sub-region", 4,
                                                                       grid=SubRegionGrid(1, 1)).values).sum()),
                             {"bank": values}, {"bank": att.selective_pool_backward(w, pooled)}, TOL_SMOOTH)
    assert report.passed, str(report)


# --- merge -----------------------------------------------------------------------

def test_merge_identities():
    rng = np.random.default_rng(13)
    f = rng.normal(size=(2, 3, 7, 7))
    m = rng.normal(size=f.shape)
    assert np.array_equal(att.merge_selected_features(np.zeros_like(f), m, m), np.zeros_like(f))
    assert np.array_equal(att.merge_selected_features(f, m, 1.0 - m), f * (m + (1.0 - m)))
    assert np.array_equal(att.merge_selected_features(f, np.full_like(f, 0.25), np.full_like(f, 0.75)), f)
    assert att.merge_selected_features(f, None, None) is f


def test_merge_scalar_loop():
    rng = np.random.default_rng(14)
    f, a, b = (rng.normal(size=(2, 3, 4, 4)) for _ in range(3))
    out = att.merge_selected_features(f, a, b)
    for idx in itertools.product(*map(range, f.shape)):
        assert out[idx] == f[idx] * (a[idx] + b[idx])


def test_merge_shape_mismatch():
    with pytest.raises(ShapeError):
        att.merge_selected_features(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 4)), None)


@pytest.mark.parametrize("seed", range(20))
def test_merge_gradients(seed):
    rng = np.random.default_rng(seed)
    f, a, b = (rng.normal(size=(2, 3, 4, 4)) for _ in range(3))
    w = rng.normal(size=f.shape)
    df, da, db = att.merge_backward(w, f, a, b)
    report = check_gradients("merge", seed, lambda: float((w * att.merge_selected_features(f, a, b)).sum()),
                             {"f": f, "m_sr": a, "m_ar": b}, {"f": df, "m_sr": da, "m_ar": db}, TOL_SMOOTH)
    assert report.passed, str(report)
