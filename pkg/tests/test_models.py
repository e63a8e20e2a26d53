import numpy as np
import pytest

from avsel import autodiff as ad
from avsel.corpus import SynthConfig, generate_corpus
from avsel.models import AVModel, ModelConfig, infer_audio, infer_e2e, infer_two_step, utterance_features
from avsel.transducer import greedy_decode

MC = ModelConfig(image_size=16)


@pytest.fixture(scope="module")
def utts():
    return generate_corpus(4, 8, SynthConfig(image_size=16))


def _sharpen(model):
    # larger bilinear weights make the attention decisive, so permutation checks are not trivially uniform
    model.w.data[...] *= 3000


def test_parameter_namespaces():
    assert set(n.split("/")[0] for n in AVModel("e2e", MC).store.names()) == {"norm", "selector", "visual", "asr"}
    ss = AVModel("ss", MC).store.names()
    assert any(n.startswith("selector/keys/") for n in ss) and not any(n.startswith("visual/") for n in ss)
    assert not any(n.startswith("selector") for n in AVModel("av", MC).store.names())
    with pytest.raises(ValueError):
        AVModel("two-step", MC)


def test_e2e_single_track_is_vacuous(utts):
    m = AVModel("e2e", MC, seed=1)
    _sharpen(m)
    u = utts[0]
    f = utterance_features(m, u.samples)
    ids, sel, alpha = infer_e2e(m, f, u.synced[None])
    assert np.all(alpha == 1.0) and np.all(sel == 0) and len(sel) == f.shape[0]
    with ad.no_grad():
        v = m.visual_features(u.synced[None].astype(np.float32))
        direct = greedy_decode(m.encode(ad.Tensor(f[None]), v), m.predictor, m.joint)
    assert ids.tolist() == direct.tolist()


def test_e2e_track_permutation(utts):
    m = AVModel("e2e", MC, seed=2)
    _sharpen(m)
    u = utts[1]
    f = utterance_features(m, u.samples)
    T = f.shape[0]
    tracks = np.stack([u.synced] + [np.resize(o.synced, u.synced.shape) for o in utts[2:]])
    ids, sel, alpha = infer_e2e(m, f, tracks)
    perm = np.array([2, 0, 1])
    ids_p, sel_p, alpha_p = infer_e2e(m, f, tracks[perm])
    # presented position p holds original track perm[p]
    np.testing.assert_array_equal(perm[sel_p], sel)
    np.testing.assert_allclose(alpha_p, alpha[:, perm], atol=1e-5)
    assert ids_p.tolist() == ids.tolist()
    assert len(sel) == T
    with pytest.raises(ValueError):
        infer_e2e(m, f, np.zeros((0,) + u.synced.shape))


def test_two_step_single_track_and_oracle(utts):
    ss, av = AVModel("ss", MC, seed=3), AVModel("av", MC, seed=4)
    u = utts[0]
    f = utterance_features(av, u.samples)
    ids, sel = infer_two_step(ss, av, utterance_features(ss, u.samples), f, u.synced[None])
    assert np.all(sel == 0)
    assert ids.tolist() == av.decode(f, av.visual_features(u.synced[None].astype(np.float32)).data).tolist()
    tracks = np.stack([np.resize(utts[1].synced, u.synced.shape), u.synced])
    _, sel = infer_two_step(None, av, None, f, tracks, oracle_index=1)
    assert np.all(sel == 1)
    a = infer_two_step(ss, av, utterance_features(ss, u.samples), f, tracks)
    b = infer_two_step(ss, av, utterance_features(ss, u.samples), f, tracks)
    assert a[0].tolist() == b[0].tolist() and a[1].tolist() == b[1].tolist()
    with pytest.raises(ValueError):
        infer_two_step(ss, av, None, f, np.zeros((0,) + u.synced.shape))


def test_save_load_roundtrip(tmp_path, utts):
    m = AVModel("audio", MC, seed=5)
    m.set_normalizer(np.full(240, 1.0), np.full(240, 2.0))
    m.save(tmp_path / "a.ckpt", {"digest": "abc"})
    back = AVModel.load(tmp_path / "a.ckpt", "audio")
    assert back.meta["digest"] == "abc"
    for n in m.store.names():
        np.testing.assert_array_equal(back.store[n].data, m.store[n].data)
    f = utterance_features(m, utts[0].samples)
    assert infer_audio(back, f).tolist() == infer_audio(m, f).tolist()
    with pytest.raises(ValueError):
        AVModel.load(tmp_path / "a.ckpt", "e2e")
