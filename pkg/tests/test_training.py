import dataclasses

import numpy as np
import pytest

from avsel import autodiff as ad
from avsel import training
from avsel.corpus import SynthConfig, generate_corpus
from avsel.evaluation import corpus_wer
from avsel.fileio import load_checkpoint
from avsel.models import AVModel, ModelConfig, infer_audio, utterance_features
from avsel.training import (Batch, BatchSampler, ConfigError, DataError, Item, RunConfig, TrainingData,
                            e2e_loss, make_batch, preset, save_model, ss_loss, train)
from avsel.transducer import VOCAB

SMALL = {"image_size": 16}


@pytest.fixture(scope="module")
def data():
    utts = generate_corpus(24, 4, SynthConfig(image_size=16))
    return TrainingData([Item(u.id, u.samples, u.synced, u.text) for u in utts], None)


def _cfg(system, steps, **kw):
    kw.setdefault("model", SMALL)
    kw.setdefault("data", {"p_clean": 1.0})
    kw.setdefault("log_every", 0)
    return preset(system, 0, steps, **kw)


def _untrained(system, **kw):
    return RunConfig.from_dict({**_cfg(system, 1).to_dict(), "steps": 0, **kw})


def _moving_average(x, k=20):
    return np.convolve(x, np.ones(k) / k, mode="valid")


def test_config_roundtrip_and_digest():
    cfg = _cfg("e2e", 50)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.digest() == cfg.digest()
    assert _cfg("e2e", 51).digest() != cfg.digest()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigError):
        preset("two-step", 0)


def test_preset_schedule_scales_with_steps():
    s = _cfg("ss", 10).schedule
    assert (s.warmup_steps, s.constant_until, s.end_steps) == (5, 5, 10)
    assert _cfg("e2e", 2500).lr_scale == {"selector/": 0.1, "visual/": 0.2}


def test_sampler_batches_are_distinct(data):
    s = BatchSampler(data, 4, np.random.default_rng(0))
    for _ in range(12):
        b = s.next()
        assert len(set(b.tolist())) == 4
    with pytest.raises(DataError):
        BatchSampler(data, 100, np.random.default_rng(0))


def test_batch_has_no_selection_labels():
    assert "gt_index" not in {f.name for f in dataclasses.fields(Batch)}


def test_ss_step0_loss_is_log_b(data):
    model = AVModel("ss", ModelConfig(**SMALL), seed=3)
    model.set_normalizer(data.mean, data.std)
    batch = make_batch(data, [0, 1, 2, 3], model, np.random.default_rng(0), _cfg("ss", 1).data, augment=False)
    loss, _ = ss_loss(model, batch)
    assert float(loss.data) == pytest.approx(np.log(4), abs=0.01)


def test_e2e_initial_attention_is_uniform(data):
    model = AVModel("e2e", ModelConfig(**SMALL), seed=3)
    model.set_normalizer(data.mean, data.std)
    batch = make_batch(data, [0, 1, 2, 3], model, np.random.default_rng(0), _cfg("e2e", 1).data, augment=False)
    _, extra = e2e_loss(model, batch, np.random.default_rng(0))
    assert extra["entropy"] == pytest.approx(np.log(4), abs=0.01)


def test_e2e_loss_ignores_track_order(data):
    model = AVModel("e2e", ModelConfig(**SMALL), seed=5)
    model.set_normalizer(data.mean, data.std)
    batch = make_batch(data, [4, 5, 6, 7], model, np.random.default_rng(1), _cfg("e2e", 1).data, augment=False)
    with ad.no_grad():
        losses = [float(e2e_loss(model, batch, np.random.default_rng(s))[0].data) for s in range(4)]
    assert max(losses) - min(losses) < 1e-4 * abs(losses[0])


def test_audio_and_av_share_acoustic_features(data):
    a, v = AVModel("audio", ModelConfig(**SMALL)), AVModel("av", ModelConfig(**SMALL))
    for m in (a, v):
        m.set_normalizer(data.mean, data.std)
    cfg = _cfg("av", 1).data
    ba = make_batch(data, [0, 1], a, np.random.default_rng(0), cfg)
    bv = make_batch(data, [0, 1], v, np.random.default_rng(0), cfg)
    assert ba.feats.tobytes() == bv.feats.tobytes()


def test_ss_loss_decreases(data):
    hist = [h["loss"] for h in train(_cfg("ss", 100), data).history]
    ma = _moving_average(hist)
    assert ma[-1] < ma[0] - 0.1


def test_training_is_deterministic(data):
    a = train(_cfg("ss", 10), data).history
    b = train(_cfg("ss", 10), data).history
    assert a[-1]["loss"] == b[-1]["loss"]


def test_av_rnnt_loss_decreases(data):
    hist = [h["loss"] for h in train(_cfg("av", 200), data).history]
    ma = _moving_average(hist)
    assert ma[-1] < 0.5 * ma[0]


def test_overfit_ten_utterances():
    utts = generate_corpus(10, 4, SynthConfig(image_size=16))
    data = TrainingData([Item(u.id, u.samples, u.synced, u.text) for u in utts], None)
    model = train(_cfg("audio", 600, batch_size=2), data).model
    pairs = [(VOCAB.decode(infer_audio(model, utterance_features(model, u.samples))), u.text) for u in utts]
    assert corpus_wer(pairs) == 0.0


def test_warm_start_copies_visual_only(data, tmp_path):
    donor = train(_cfg("av", 3), data)
    path = tmp_path / "av.ckpt"
    save_model(donor.model, _cfg("av", 3), path, 3)
    e2e = train(_untrained("e2e", warm_start=str(path)), data).model
    for name in donor.model.store.names("visual/"):
        np.testing.assert_array_equal(e2e.store[name].data, donor.model.store[name].data)
    fresh = AVModel("e2e", ModelConfig(**SMALL), seed=int(np.random.default_rng([0, 0]).integers(2 ** 31)))
    for name in e2e.store.names("selector/"):
        np.testing.assert_array_equal(e2e.store[name].data, fresh.store[name].data)


def test_warm_start_shape_mismatch(data, tmp_path):
    donor = AVModel("av", ModelConfig(image_size=16, visual={"layers": [[[3, 3, 3], 4, [1, 1, 1]]],
                                                             "out_dim": 64}))
    path = tmp_path / "av.ckpt"
    donor.save(path)
    with pytest.raises(ConfigError, match="warm start"):
        train(_untrained("e2e", warm_start=str(path)), data)
    ss = AVModel("ss", ModelConfig(**SMALL))
    ss.save(tmp_path / "ss.ckpt")
    with pytest.raises(ConfigError, match="no visual"):
        train(_untrained("e2e", warm_start=str(tmp_path / "ss.ckpt")), data)


def test_nan_loss_raises(data, monkeypatch):
    cfg = _cfg("audio", 2)
    monkeypatch.setattr(training, "step_loss", lambda m, b, r: (ad.Tensor(np.float32(np.nan)), {}))
    with pytest.raises(ad.NumericError):
        train(cfg, data)


def test_checkpoint_stores_optimizer_moments(data, tmp_path):
    path = tmp_path / "m.ckpt"
    res = train(_cfg("ss", 2), data, checkpoint=path)
    m = AVModel.load(path, "ss")
    assert m.meta["digest"] == res.digest and m.meta["optimizer_step"] == 2
    tensors, _ = load_checkpoint(path)
    assert "moment1/selector/W" in tensors and "moment2/selector/W" in tensors
