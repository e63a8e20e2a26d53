import numpy as np
import pytest
from hypothesis import given, strategies as st

from avsel import autodiff as ad
from avsel.nn import ParamStore
from avsel.visual import (ConvLayerSpec, Conv3dStackParams, VisualFrontend, conv3d_features, match_length,
                          resample_to_frames)


def _frames(n):
    return np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 2, 2, 3), np.float32)


def _src(out):
    return out[:, 0, 0, 0].astype(int).tolist()


def test_identity_rate():
    assert _src(resample_to_frames(_frames(10), 100 / 3, 10)) == list(range(10))


def test_25fps_mapping():
    assert _src(resample_to_frames(_frames(20), 25, 5))[4] == 3


def test_clamps_past_end():
    assert _src(resample_to_frames(_frames(3), 25, 8))[-3:] == [2, 2, 2]


def test_resample_errors():
    with pytest.raises(ValueError):
        resample_to_frames(np.zeros((0, 2, 2, 3)), 25, 4)


@pytest.mark.parametrize("fps", [24, 25, 30])
def test_output_length_is_exactly_t(fps):
    for T in (1, 17, 33, 100):
        assert resample_to_frames(_frames(int(T * 0.03 * fps) + 1), fps, T).shape[0] == T


def test_match_length():
    assert _src(match_length(_frames(3), 5)) == [0, 1, 2, 2, 2]
    assert _src(match_length(_frames(6), 2)) == [0, 1]


def _frontend(params, seed=0):
    store = ParamStore(np.float64)
    return VisualFrontend(store, "visual", params, np.random.default_rng(seed)), store


def test_shape_contract_default():
    fe, _ = _frontend(Conv3dStackParams())
    x = np.random.default_rng(0).uniform(-1, 1, (3, 20, 32, 32, 3))
    assert conv3d_features(fe, x).shape == (3, 20, 64)


def test_zero_input_zero_bias_gives_zero():
    fe, store = _frontend(Conv3dStackParams())
    for n in store.names():
        if n.endswith("/b"):
            store[n].data[...] = 0
    assert np.all(fe(np.zeros((2, 5, 16, 16, 3))).data == 0)


def test_identity_passthrough():
    p = Conv3dStackParams(layers=(ConvLayerSpec((1, 1, 1), 3, (1, 1, 1)),), out_dim=3)
    fe, store = _frontend(p)
    store["visual/conv0/w"].data[...] = np.eye(3).reshape(1, 1, 1, 3, 3)
    store["visual/proj/w"].data[...] = np.eye(3)
    for n in ("visual/conv0/b", "visual/proj/b"):
        store[n].data[...] = 0
    x = np.random.default_rng(1).uniform(0, 1, (2, 4, 1, 1, 3))
    np.testing.assert_allclose(fe(x).data, x[:, :, 0, 0, :])


def test_too_small_frames_rejected():
    fe, _ = _frontend(Conv3dStackParams())
    with pytest.raises(ValueError, match="too small"):
        fe(np.zeros((1, 3, 4, 4, 3)))


def test_temporal_stride_rejected():
    with pytest.raises(ValueError):
        Conv3dStackParams(layers=(ConvLayerSpec((3, 3, 3), 4, (2, 1, 1)),))


@given(st.integers(0, 1000))
def test_track_permutation_equivariance(seed):
    fe, _ = _frontend(Conv3dStackParams(), 3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (3, 4, 16, 16, 3))
    perm = rng.permutation(3)
    np.testing.assert_allclose(fe(x[perm]).data, fe(x).data[perm], atol=1e-12)


@pytest.mark.parametrize("T", [1, 3, 7])
def test_frame_alignment(T):
    fe, _ = _frontend(Conv3dStackParams())
    assert fe(np.zeros((1, T, 16, 16, 3))).shape[1] == T


def test_tiny_stack_gradient():
    p = Conv3dStackParams(layers=(ConvLayerSpec((3, 3, 3), 3, (1, 1, 1)), ConvLayerSpec((3, 3, 3), 4, (1, 2, 2))),
                          out_dim=5)
    fe, store = _frontend(p, 4)
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (2, 3, 8, 8, 3))
    c = rng.normal(size=(2, 3, 5))
    assert ad.check_gradient(lambda v: ad.sum_(ad.mul(fe(v), c)), x) < 1e-4
    w = store["visual/conv1/w"]

    def through_weights(value):
        saved = w.data.copy()
        w.data[...] = value.data
        out = ad.sum_(ad.mul(fe(x), c))
        w.data[...] = saved
        return out

    store.zero_grad()
    out = ad.sum_(ad.mul(fe(x), c))
    ad.backward(out)
    analytic = w.grad.copy()
    assert ad.check_gradient(lambda v: float(through_weights(ad.Tensor(v)).data), w.data.copy(),
                             analytic=analytic) < 1e-4
