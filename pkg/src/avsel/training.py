"""Run configuration, training data, batching with augmentation, and the training loop."""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .acoustic import features
from .attention import selection_ce_from_scores, softmax_over_tracks, weighted_visual
from .corpus import BabbleBank, SynthConfig, add_overlap, generate_corpus, mix_noise, read_manifest
from .fileio import load_video, read_wav
from .models import SYSTEMS, AVModel, ModelConfig
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm, lr_at
from .transducer import VOCAB, rnnt_lattice, rnnt_loss
from .visual import match_length

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_utts: int = 2000
    corpus_seed: int = 1
    manifest: str = ""
    babble_seed: int = 101
    babble_seconds: float = 60.0
    p_clean: float = 0.2
    p_overlap: float = 0.1
    snr_range: tuple = (-5.0, 20.0)


@dataclass(frozen=True)
class RunConfig:
    system: str
    seed: int
    steps: int = 2000
    batch_size: int = 4
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(1e-3, 200, 1000, 2000, 0.1))
    clip_norm: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.98
    data: DataConfig = field(default_factory=DataConfig)
    warm_start: str = ""
    lr_scale: dict = field(default_factory=dict)
    log_every: int = 50

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {SYSTEMS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (B = M tracks per batch)")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["data"]["snr_range"] = list(self.data.snr_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(d.get("model"), dict):
                d["model"] = ModelConfig(**d["model"])
            if isinstance(d.get("schedule"), dict):
                d["schedule"] = LrSchedule(**d["schedule"])
            if isinstance(d.get("data"), dict):
                dd = dict(d["data"])
                if "snr_range" in dd:
                    dd["snr_range"] = tuple(dd["snr_range"])
                d["data"] = DataConfig(**dd)
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_PRESET_STEPS = {"ss": 1000, "av": 1500, "audio": 1500, "e2e": 2500}
_PRESET_WARMUP = {"ss": 200, "av": 200, "audio": 200, "e2e": 500}
# end-to-end fine-tuning moves the attention and the warm-started frontend more slowly
_PRESET_LR_SCALE = {"e2e": {"selector/": 0.1, "visual/": 0.2}}


def preset(system, seed, steps=None, **overrides):
    """Desk-scale configuration for ``system``; the schedule scales with ``steps``.

    ``overrides`` is a nested mapping of RunConfig keys applied last.
    """
    if system not in SYSTEMS:
        raise ConfigError(f"unknown system {system!r}; choose from {SYSTEMS}")
    steps = _PRESET_STEPS[system] if steps is None else int(steps)
    if steps < 1:
        raise ConfigError("steps must be positive")
    warm = max(1, min(_PRESET_WARMUP[system], steps // 2))
    base = {
        "system": system, "seed": seed, "steps": steps,
        "schedule": {"peak_lr": 1e-3, "warmup_steps": warm, "constant_until": max(warm, steps // 2),
                     "end_steps": steps, "final_fraction": 0.1},
        "lr_scale": dict(_PRESET_LR_SCALE.get(system, {})),
    }
    return RunConfig.from_dict(_merge(base, overrides))


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "lr_scale":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class Item:
    id: str
    samples: np.ndarray
    synced: np.ndarray
    text: str

    @property
    def num_frames(self):
        return self.synced.shape[0]


class TrainingData:
    """Single-track utterances with cached clean features and global normalization statistics."""

    def __init__(self, items, babble):
        if len(items) < 2:
            raise DataError("training needs at least two utterances")
        self.items = items
        self.babble = babble
        self.clean = [features(it.samples) for it in items]
        for it, f in zip(items, self.clean):
            if f.shape[0] != it.synced.shape[0]:
                raise DataError(f"{it.id}: video has {it.synced.shape[0]} synced frames, audio {f.shape[0]}")
        stacked = np.concatenate(self.clean, axis=0).astype(np.float64)
        self.mean = stacked.mean(axis=0)
        self.std = stacked.std(axis=0)

    def __len__(self):
        return len(self.items)

    @classmethod
    def synthesize(cls, cfg, image_size):
        utts = generate_corpus(cfg.n_utts, cfg.corpus_seed, SynthConfig(image_size=image_size))
        items = [Item(u.id, u.samples, u.synced, u.text) for u in utts]
        return cls(items, BabbleBank(cfg.babble_seed, cfg.babble_seconds))

    @classmethod
    def from_manifest(cls, path, cfg):
        try:
            records = read_manifest(path)
        except (OSError, ValueError) as e:
            raise DataError(str(e)) from None
        root = Path(path).parent
        items = []
        for r in records:
            try:
                samples, _ = read_wav(root / r.audio)
                synced = load_video(root / r.video[r.gt_index])
            except (OSError, ValueError) as e:
                raise DataError(f"{r.id}: {e}") from None
            items.append(Item(r.id, samples, synced, r.transcript))
        return cls(items, BabbleBank(cfg.babble_seed, cfg.babble_seconds))

    @classmethod
    def from_config(cls, cfg, image_size):
        if cfg.manifest:
            return cls.from_manifest(cfg.manifest, cfg)
        return cls.synthesize(cfg, image_size)


@dataclass
class Batch:
    feats: np.ndarray
    video: np.ndarray
    targets: np.ndarray
    t_lens: np.ndarray
    u_lens: np.ndarray
    ids: list


class BatchSampler:
    """Epoch-shuffled, length-bucketed batches: groups of 4*B items are sorted by length then cut."""

    def __init__(self, data, batch_size, rng):
        if len(data) < batch_size:
            raise DataError(f"{len(data)} utterances cannot fill a batch of {batch_size}")
        self.data = data
        self.B = batch_size
        self.rng = rng
        self.queue = []

    def _refill(self):
        order = self.rng.permutation(len(self.data))
        lengths = np.array([self.data.items[i].num_frames for i in order])
        group = 4 * self.B
        batches = []
        for g in range(0, len(order) - self.B + 1, group):
            chunk = order[g:g + group]
            chunk = chunk[np.argsort(lengths[g:g + group], kind="stable")]
            for b in range(0, len(chunk) - self.B + 1, self.B):
                batches.append(chunk[b:b + self.B])
        self.queue = [batches[i] for i in self.rng.permutation(len(batches))]

    def next(self):
        if not self.queue:
            self._refill()
        return self.queue.pop()


def augment_samples(data, index, rng, cfg):
    """Clean, babble-mixed or overlapped waveform for one training item."""
    item = data.items[index]
    u = rng.uniform()
    if u < cfg.p_clean:
        return item.samples, False
    if u < cfg.p_clean + cfg.p_overlap:
        others = [j for j in rng.choice(len(data), 3, replace=False) if j != index][:2]
        return add_overlap(item, data.items[others[0]], data.items[others[1]]), True
    snr = rng.uniform(*cfg.snr_range)
    return mix_noise(item.samples, data.babble.crop(rng, item.samples.shape[0]), snr), True


def make_batch(data, indices, model, rng, cfg, augment=True):
    feats = []
    for i in indices:
        samples, changed = augment_samples(data, i, rng, cfg) if augment else (data.items[i].samples, False)
        feats.append(features(samples) if changed else data.clean[i])
    T = max(f.shape[0] for f in feats)
    B = len(indices)
    x = np.zeros((B, T, feats[0].shape[1]), np.float32)
    for b, f in enumerate(feats):
        x[b, :f.shape[0]] = model.normalize(f)
    video = np.stack([match_length(data.items[i].synced, T) for i in indices]).astype(np.float32)
    tokens = [VOCAB.encode(data.items[i].text) for i in indices]
    U = max(len(t) for t in tokens)
    targets = np.ones((B, U), np.int64)
    for b, t in enumerate(tokens):
        targets[b, :len(t)] = t
    return Batch(x, video, targets, np.array([f.shape[0] for f in feats]), np.array([len(t) for t in tokens]),
                 [data.items[i].id for i in indices])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _frame_valid(batch):
    T = batch.feats.shape[1]
    return np.arange(T)[None, :] < batch.t_lens[:, None]


def asr_loss(model, batch, visual_block):
    enc = model.encode(ad.Tensor(batch.feats), visual_block, batch.t_lens)
    lattice = rnnt_lattice(enc, batch.targets, model.predictor, model.joint)
    return rnnt_loss(lattice, batch.targets, batch.t_lens, batch.u_lens)


def ss_loss(model, batch):
    """Selection CE over a B = M batch; track b belongs to audio b."""
    keys = model.visual_features(batch.video)
    scores = model.scores(ad.Tensor(batch.feats), keys)
    valid = _frame_valid(batch)
    loss = selection_ce_from_scores(scores, None, valid)
    picks = np.argmax(scores.data, axis=-1)
    acc = float(np.mean(picks[valid] == np.broadcast_to(np.arange(len(picks))[:, None], picks.shape)[valid]))
    return loss, {"diag_acc": acc}


def e2e_loss(model, batch, rng):
    """RNN-T loss through soft selection.  Tracks are shuffled so no position carries the pairing."""
    perm = rng.permutation(batch.video.shape[0])
    values = model.visual_features(batch.video[perm])
    scores = model.scores(ad.Tensor(batch.feats), values)
    alpha = softmax_over_tracks(scores)
    loss = asr_loss(model, batch, weighted_visual(alpha, values))
    a = alpha.data[_frame_valid(batch)]
    entropy = float(np.mean(-np.sum(a * np.log(np.maximum(a, 1e-30)), axis=-1)))
    return loss, {"entropy": entropy}


def step_loss(model, batch, rng):
    if model.system == "ss":
        return ss_loss(model, batch)
    if model.system == "av":
        return asr_loss(model, batch, model.visual_features(batch.video)), {}
    if model.system == "audio":
        B, T = batch.feats.shape[:2]
        return asr_loss(model, batch, model.zero_visual(B, T)), {}
    return e2e_loss(model, batch, rng)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

VISUAL_PREFIX = "visual/"


def warm_start(model, donor_path):
    """Copy visual-frontend parameters only from a donor checkpoint."""
    donor = AVModel.load(donor_path)
    src = {n: t.data for n, t in donor.store.tensors.items() if n.startswith(VISUAL_PREFIX)}
    if not src:
        raise ConfigError(f"{donor_path}: donor checkpoint has no visual frontend")
    try:
        return model.store.load(src, prefix=VISUAL_PREFIX, strict=True)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"warm start from {donor_path}: {e}") from None


@dataclass
class TrainResult:
    model: AVModel
    history: list
    digest: str


def train(config, data=None, checkpoint=None, checkpoint_every=0):
    """Train ``config.system``; returns the model and per-step history."""
    if data is None:
        data = TrainingData.from_config(config.data, config.model.image_size)
    model = AVModel(config.system, config.model, seed=int(np.random.default_rng([config.seed, 0]).integers(2 ** 31)))
    model.set_normalizer(data.mean, data.std)
    if config.warm_start:
        warm_start(model, config.warm_start)
    sampler = BatchSampler(data, config.batch_size, np.random.default_rng([config.seed, 1]))
    aug_rng = np.random.default_rng([config.seed, 2])
    perm_rng = np.random.default_rng([config.seed, 3])
    state = AdamState(config.beta1, config.beta2, 1e-8, config.clip_norm)
    params = {n: t.data for n, t in model.store.trainable().items()}
    history = []
    digest = config.digest()
    for step in range(config.steps):
        batch = make_batch(data, sampler.next(), model, aug_rng, config.data)
        model.store.zero_grad()
        loss, extra = step_loss(model, batch, perm_rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise ad.NumericError(f"non-finite loss at step {step}")
        ad.backward(loss)
        grads, norm = clip_global_norm(model.store.grads(), config.clip_norm)
        lr = lr_at(config.schedule, step + 1)
        adam_step(params, grads, state, lr, config.lr_scale)
        rec = {"step": step, "loss": value, "lr": lr, "grad_norm": norm, **extra}
        history.append(rec)
        if config.log_every and step % config.log_every == 0:
            log.info("%s step %d loss %.4f %s", config.system, step, value,
                     " ".join(f"{k} {v:.4f}" for k, v in extra.items()))
        if checkpoint and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_model(model, config, checkpoint, step + 1, state)
    if checkpoint:
        save_model(model, config, checkpoint, config.steps, state)
    return TrainResult(model, history, digest)


def save_model(model, config, path, step, optimizer=None):
    model.save(path, {"run_config": config.to_dict(), "digest": config.digest(), "step": step}, optimizer)
