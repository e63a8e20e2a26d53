"""The four model configurations built from shared components, plus inference.

Parameter namespaces are shared across systems so warm starts and two-step
pipelines can move weights by prefix: ``selector/query``, ``selector/W`` and
``selector/keys`` (the selector's own frontend), ``visual`` (value frontend,
also the keys in the end-to-end model), ``asr/encoder``, ``asr/decoder``,
``asr/joint`` and the ``norm`` buffers.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .acoustic import FEAT_DIM, features
from .attention import (QueryNet, bilinear_scores, hard_visual, init_bilinear, select_track,
                        softmax_over_tracks, weighted_visual)
from .fileio import load_checkpoint, save_checkpoint
from .nn import ParamStore
from .transducer import VOCAB, Encoder, Joint, Predictor, fuse, greedy_decode
from .visual import Conv3dStackParams, VisualFrontend

SYSTEMS = ("ss", "av", "audio", "e2e")
_COMPONENTS = {
    "ss": ("query", "visual"),
    "av": ("visual", "asr"),
    "audio": ("asr",),
    "e2e": ("query", "visual", "asr"),
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    visual: dict = field(default_factory=lambda: Conv3dStackParams().to_dict())
    query_width: int = 64
    query_dim: int = 64
    query_layers: int = 5
    enc_units: int = 64
    enc_layers: int = 2
    pred_units: int = 64
    embed: int = 32
    joint_hidden: int = 64

    @property
    def visual_params(self):
        return Conv3dStackParams.from_dict(self.visual)

    @property
    def visual_dim(self):
        return self.visual_params.out_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class AVModel:
    """One of ``ss``, ``av``, ``audio`` or ``e2e``.

    ``ss`` scores tracks only; ``av`` fuses the single given track; ``audio``
    fuses a zero visual block; ``e2e`` fuses the attention-weighted sum of
    all tracks, using the same frontend output as keys and values.
    """

    def __init__(self, system, config=ModelConfig(), seed=0):
        if system not in SYSTEMS:
            raise ValueError(f"unknown system {system!r}; choose from {SYSTEMS}")
        self.system = system
        self.config = config
        self.store = ParamStore(np.float32)
        rng = np.random.default_rng(seed)
        c = config
        parts = _COMPONENTS[system]
        self.store.add("norm/mean", np.zeros(FEAT_DIM), trainable=False)
        self.store.add("norm/std", np.ones(FEAT_DIM), trainable=False)
        vis_name = "selector/keys" if system == "ss" else "visual"
        self.visual = VisualFrontend(self.store, vis_name, c.visual_params, rng) if "visual" in parts else None
        if "query" in parts:
            self.query = QueryNet(self.store, "selector/query", rng, FEAT_DIM, c.query_width, c.query_dim,
                                  c.query_layers)
            self.w = init_bilinear(self.store, "selector/W", c.query_dim, c.visual_dim, rng)
        else:
            self.query = self.w = None
        if "asr" in parts:
            self.encoder = Encoder(self.store, "asr/encoder", FEAT_DIM + c.visual_dim, c.enc_units, c.enc_layers, rng)
            self.predictor = Predictor(self.store, "asr/decoder", len(VOCAB), c.pred_units, c.embed, 1, rng)
            self.joint = Joint(self.store, "asr/joint", self.encoder.out_dim, c.pred_units, len(VOCAB),
                               c.joint_hidden, rng)
        else:
            self.encoder = self.predictor = self.joint = None

    # -- pieces ------------------------------------------------------------

    def set_normalizer(self, mean, std):
        self.store["norm/mean"].data[...] = mean
        self.store["norm/std"].data[...] = np.maximum(std, 1e-3)

    def normalize(self, feats):
        f = (np.asarray(feats, np.float32) - self.store["norm/mean"].data) / self.store["norm/std"].data
        return f.astype(np.float32)

    def visual_features(self, video):
        if self.visual is None:
            raise ValueError(f"system {self.system!r} has no visual frontend")
        return self.visual(np.asarray(video, np.float32))

    def scores(self, feats, keys):
        """(B, T, M) bilinear scores of normalized features against visual keys."""
        return bilinear_scores(self.query(feats), self.w, keys)

    def zero_visual(self, B, T):
        return np.zeros((B, T, self.config.visual_dim), np.float32)

    def encode(self, feats, visual_block, lengths=None):
        return self.encoder(fuse(feats, visual_block), lengths)

    # -- single-utterance inference -----------------------------------------

    def decode(self, feats, visual_block):
        """Greedy transcript ids for one normalized (T, 240) utterance and a (1, T, D) visual block."""
        with ad.no_grad():
            enc = self.encode(ad.Tensor(feats[None]), visual_block)
            return greedy_decode(enc, self.predictor, self.joint)

    def track_scores(self, feats, keys):
        """(T, M) scores for one utterance; ``keys`` is an (M, T, D) array or tensor."""
        with ad.no_grad():
            return self.scores(ad.Tensor(feats[None]), keys).data[0]

    # -- persistence ---------------------------------------------------------

    def save(self, path, meta=None, optimizer=None):
        """Parameters (and Adam moments as ``moment1/``, ``moment2/`` records) plus a JSON sidecar."""
        info = {"system": self.system, "model": self.config.to_dict()}
        info.update(meta or {})
        tensors = dict(self.store.arrays())
        if optimizer is not None:
            info["optimizer_step"] = optimizer.step
            for name, m in optimizer.m.items():
                tensors[f"moment1/{name}"] = m
                tensors[f"moment2/{name}"] = optimizer.v[name]
        save_checkpoint(path, tensors, info)

    @classmethod
    def load(cls, path, expect=None):
        tensors, meta = load_checkpoint(path)
        if "system" not in meta or "model" not in meta:
            raise ValueError(f"{path}: checkpoint metadata lacks system/model entries")
        if expect is not None and meta["system"] not in np.atleast_1d(expect):
            raise ValueError(f"{path}: expected a {expect} checkpoint, found {meta['system']!r}")
        model = cls(meta["system"], ModelConfig.from_dict(meta["model"]))
        model.store.load(tensors)
        model.meta = meta
        return model


def utterance_features(model, samples):
    return model.normalize(features(samples))


def infer_e2e(model, feats, tracks, visual_cache=None):
    """Soft-selection transcript and per-frame argmax trace for one utterance.

    ``tracks`` is (M, T, H, W, 3); ``visual_cache`` may hold precomputed (M, T, D) features.
    """
    if model.system != "e2e":
        raise ValueError("infer_e2e needs an e2e checkpoint")
    if visual_cache is None and (tracks is None or len(tracks) == 0):
        raise ValueError("at least one track is required")
    with ad.no_grad():
        v = visual_cache if visual_cache is not None else model.visual_features(tracks).data
        s = model.scores(ad.Tensor(feats[None]), v)
        alpha = softmax_over_tracks(s)
        fused = weighted_visual(alpha, v)
        enc = model.encode(ad.Tensor(feats[None]), fused)
        ids = greedy_decode(enc, model.predictor, model.joint)
    return ids, select_track(s), alpha.data[0]


def infer_two_step(ss_model, av_model, ss_feats, av_feats, tracks, oracle_index=None,
                   ss_cache=None, av_cache=None):
    """Hard per-frame selection by the selector, then single-track A/V recognition.

    With ``oracle_index`` the selector is bypassed and that track is used throughout.
    Returns (ids, per-frame selection).
    """
    M = len(tracks) if ss_cache is None and av_cache is None else (av_cache if av_cache is not None
                                                                   else ss_cache).shape[0]
    if M == 0:
        raise ValueError("at least one track is required")
    T = av_feats.shape[0]
    with ad.no_grad():
        if oracle_index is not None:
            sel = np.full(T, int(oracle_index))
        elif M == 1:
            sel = np.zeros(T, dtype=np.int64)
        else:
            keys = ss_cache if ss_cache is not None else ss_model.visual_features(tracks).data
            sel = select_track(ss_model.track_scores(ss_feats, keys))
        values = av_cache if av_cache is not None else av_model.visual_features(tracks).data
        v = hard_visual(sel, values)
        ids = av_model.decode(av_feats, v)
    return ids, sel


def infer_audio(model, feats):
    return model.decode(feats, model.zero_visual(1, feats.shape[0]))
