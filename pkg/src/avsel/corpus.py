"""Deterministic synthetic audio-visual corpus and evaluation-set augmentation.

A synthetic "speaker" says each character as a two-formant tone burst; the
rendered mouth opens with the smoothed amplitude envelope and its width and
inner brightness follow the formant grid of the current character (a coarse
viseme), so video carries some of the linguistic content.
"""
import json
import logging
import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .acoustic import FRAME_SECONDS, SAMPLE_RATE, num_frames
from .transducer import VOCAB
from .visual import match_length, resample_to_frames

log = logging.getLogger(__name__)

NOISE_CONDITIONS = ("clean", "snr20", "snr10", "snr0", "overlap")
TRACK_COUNTS = (1, 2, 4, 8)
_SNR = {"snr20": 20.0, "snr10": 10.0, "snr0": 0.0}

LEXICON = (
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "pack", "my",
    "box", "with", "five", "dozen", "liquor", "jugs", "we", "zip", "by", "jet",
    "van", "wax", "quiz", "big", "red", "cat", "sun", "moon", "day", "night",
    "blue", "green", "sky", "fish", "king", "queen", "map", "hat", "yes", "no",
    "go", "up", "it's", "don't", "can't", "we'll", "jam", "zero", "vex", "kid",
    "hello", "world", "light", "sound", "voice", "face", "track", "judge", "pixel", "mix",
)

# formant grid: f1 has 6 geometric levels, f2 has 5; 27 symbols use 27 of 30 cells
_F1 = 280.0 * 1.25 ** np.arange(6)
_F2 = 1000.0 * 1.3 ** np.arange(5)
_SYMBOLS = "'" + "abcdefghijklmnopqrstuvwxyz"
_CELLS = np.random.default_rng(20240501).permutation(30)[: len(_SYMBOLS)]
FORMANTS = {c: (_F1[cell % 6], _F2[cell // 6]) for c, cell in zip(_SYMBOLS, _CELLS)}
# viseme: mouth width from the f2 level, inner brightness from the f1 level pair
VISEMES = {c: (cell // 6, (cell % 6) // 2) for c, cell in zip(_SYMBOLS, _CELLS)}
_WIDTHS = np.array([0.30, 0.40, 0.50, 0.60, 0.70])
_SHADES = np.array([-0.9, -0.3, 0.3])


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    fps_range: tuple = (23.0, 30.0)
    letter_ms: tuple = (60.0, 120.0)
    intra_gap_ms: tuple = (0.0, 20.0)
    word_gap_ms: tuple = (70.0, 110.0)
    lead_ms: tuple = (0.0, 30.0)
    tail_ms: tuple = (30.0, 60.0)
    words: tuple = (3, 6)
    min_letters: int = 17
    max_letters: int = 24
    pitch_jitter: float = 0.04
    peak: tuple = (0.3, 0.5)
    noise_floor: float = 1e-3
    pixel_noise: float = 0.02
    smooth_ms: float = 20.0
    pulse_ms: tuple = (25.0, 40.0)
    pulse_amp: tuple = (0.15, 1.0)


@dataclass
class SynthUtterance:
    id: str
    seed: int
    text: str
    samples: np.ndarray
    frames: np.ndarray
    fps: float
    aperture: np.ndarray
    envelope: np.ndarray = field(repr=False)

    @property
    def transcript(self):
        return VOCAB.encode(self.text)

    @property
    def num_frames(self):
        return num_frames(self.samples.shape[0])

    @cached_property
    def synced(self):
        return resample_to_frames(self.frames, self.fps, self.num_frames)


@dataclass
class MultiTrackExample:
    id: str
    samples: np.ndarray
    tracks: list
    text: str
    condition: str = "clean"
    gt_index: int = 0

    @property
    def transcript(self):
        return VOCAB.encode(self.text)


@dataclass(frozen=True)
class ConditionSpec:
    noise: str = "clean"
    tracks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.noise not in NOISE_CONDITIONS:
            raise ValueError(f"unknown noise condition {self.noise!r}; choose from {NOISE_CONDITIONS}")
        if self.tracks not in TRACK_COUNTS:
            raise ValueError(f"track count must be one of {TRACK_COUNTS}")

    @property
    def tag(self):
        return f"{self.noise}/{self.tracks}"


def item_rng(seed, key):
    """Independent stream for one item, derived from (master seed, item key)."""
    k = key if isinstance(key, int) else zlib.crc32(str(key).encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, k])


def random_text(rng, cfg=SynthConfig()):
    while True:
        words = []
        n = int(rng.integers(cfg.words[0], cfg.words[1] + 1))
        while len(words) < n or sum(len(w) for w in words) < cfg.min_letters:
            words.append(LEXICON[int(rng.integers(len(LEXICON)))])
        if sum(len(w) for w in words) <= cfg.max_letters:
            return " ".join(words)


def _ms(rng, lo_hi):
    return float(rng.uniform(*lo_hi)) / 1000.0


def _segments(text, rng, cfg):
    """(char, start_s, dur_s, amplitude) per spoken symbol, plus total duration."""
    t = _ms(rng, cfg.lead_ms)
    segs = []
    for i, ch in enumerate(text):
        if ch == " ":
            t += _ms(rng, cfg.word_gap_ms)
            continue
        dur = _ms(rng, cfg.letter_ms)
        amp = float(rng.uniform(0.5, 1.0))
        segs.append((ch, t, dur, amp))
        t += dur
        if i + 1 < len(text) and text[i + 1] != " ":
            t += _ms(rng, cfg.intra_gap_ms)
    t += _ms(rng, cfg.tail_ms)
    return segs, t


def _burst_envelope(n, sr, amp, rng, cfg):
    """Letter envelope: a chain of short pulses with independent random heights."""
    env = np.empty(n)
    a = 0
    while a < n:
        b = min(n, a + int(_ms(rng, cfg.pulse_ms) * sr))
        if n - b < int(cfg.pulse_ms[0] / 1000.0 * sr):
            b = n
        env[a:b] = amp * rng.uniform(*cfg.pulse_amp)
        a = b
    k = max(1, int(0.008 * sr))
    env = np.convolve(env, np.ones(k) / k, mode="same")
    ramp = min(int(0.008 * sr), n // 2)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] *= r
        env[n - ramp:] *= r[::-1]
    return env


def _render(aperture, width, shade, size, tint, rng, pixel_noise):
    """(T_v, size, size, 3) frames in [-1, 1] with an anti-aliased elliptical mouth."""
    T = aperture.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size
    xx = (xx + 0.5) / size
    face = np.empty((size, size, 3))
    for c in range(3):
        face[:, :, c] = tint[c] + 0.15 * (0.5 - yy)
    half_w = (width * 0.45)[:, None, None]
    half_h = (0.03 + 0.22 * aperture)[:, None, None]
    r = np.sqrt(((xx[None] - 0.5) / half_w) ** 2 + ((yy[None] - 0.6) / half_h) ** 2)
    edge = 1.5 / size / np.minimum(half_w, half_h)
    inside = np.clip((1.0 - r) / edge + 0.5, 0.0, 1.0)
    inner = shade[:, None, None, None] * np.array([0.9, 0.6, 0.6])
    frames = face[None] * (1 - inside[..., None]) + inner * inside[..., None]
    frames += rng.normal(0.0, pixel_noise, size=frames.shape)
    return np.clip(frames, -1.0, 1.0).astype(np.float32)


def synth_utterance(seed, text, cfg=SynthConfig(), uid=None, video=True):
    """Render one utterance; bit-identical for equal (seed, text, cfg)."""
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    VOCAB.encode(text)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    sr = SAMPLE_RATE
    pitch = 1.0 + float(rng.uniform(-cfg.pitch_jitter, cfg.pitch_jitter))
    peak = float(rng.uniform(*cfg.peak))
    tint = rng.uniform(-0.1, 0.6, size=3)
    fps = float(rng.uniform(*cfg.fps_range))
    segs, total = _segments(text, rng, cfg)
    n = int(round(total * sr))
    wave = np.zeros(n)
    env = np.zeros(n)
    t_all = np.arange(n) / sr
    for ch, start, dur, amp in segs:
        a, b = int(round(start * sr)), min(n, int(round((start + dur) * sr)))
        f1, f2 = FORMANTS[ch]
        ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
        tt = t_all[a:b]
        e = _burst_envelope(b - a, sr, amp, rng, cfg)
        wave[a:b] += e * (np.sin(2 * np.pi * f1 * pitch * tt + ph1)
                          + 0.6 * np.sin(2 * np.pi * f2 * pitch * tt + ph2))
        env[a:b] += e
    wave *= peak / max(np.max(np.abs(wave)), 1e-9)
    env *= peak / max(np.max(env), 1e-9)
    wave += rng.normal(0.0, cfg.noise_floor, size=n)
    samples = wave.astype(np.float32)

    k = max(1, int(cfg.smooth_ms / 1000.0 * sr))
    smooth = np.convolve(env, np.ones(k) / k, mode="same")
    n_frames = max(1, int(np.floor(total * fps)))
    times = (np.arange(n_frames) + 0.5) / fps
    idx = np.minimum((times * sr).astype(np.int64), n - 1)
    envelope = smooth[idx]
    aperture = envelope / max(float(envelope.max()), 1e-9)

    if video:
        width = np.full(n_frames, 0.45)
        shade = np.full(n_frames, -0.6)
        for ch, start, dur, _ in segs:
            on = (times >= start) & (times < start + dur)
            wi, si = VISEMES[ch]
            width[on] = _WIDTHS[wi]
            shade[on] = _SHADES[si]
        frames = _render(aperture, width, shade, cfg.image_size, tint, rng, cfg.pixel_noise)
    else:
        frames = np.zeros((0, cfg.image_size, cfg.image_size, 3), np.float32)
    return SynthUtterance(uid or f"utt_{int(seed) & 0xFFFFFFFF:08x}", int(seed), text, samples,
                          frames, fps, aperture.astype(np.float32), envelope.astype(np.float32))


def generate_corpus(n_utts, seed, cfg=SynthConfig(), prefix="utt", video=True):
    """``n_utts`` utterances; item i uses its own stream derived from (seed, i)."""
    out = []
    for i in range(n_utts):
        rng = item_rng(seed, i)
        text = random_text(rng, cfg)
        useed = int(rng.integers(0, 2 ** 63 - 1))
        out.append(synth_utterance(useed, text, cfg, uid=f"{prefix}{i:05d}", video=video))
    return out


def synth_babble(seed, n_samples, voices=8, cfg=SynthConfig()):
    """Sum of ``voices`` synthetic talkers at random offsets, normalized to peak 0.5."""
    if n_samples <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    mix = np.zeros(n_samples)
    for v in range(voices):
        offset = int(rng.integers(0, SAMPLE_RATE))
        stream = []
        have = 0
        while have < n_samples + offset:
            u = synth_utterance(int(rng.integers(0, 2 ** 63 - 1)), random_text(rng, cfg), cfg, video=False)
            stream.append(u.samples)
            have += u.samples.shape[0]
        mix += np.concatenate(stream)[offset:offset + n_samples]
    mix *= 0.5 / max(np.max(np.abs(mix)), 1e-9)
    return mix.astype(np.float32)


def power(x):
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def fit_length(noise, n):
    """Tile (if short) then crop ``noise`` to exactly n samples."""
    noise = np.asarray(noise)
    if noise.shape[0] == 0:
        raise ValueError("empty noise")
    if noise.shape[0] < n:
        noise = np.tile(noise, int(np.ceil(n / noise.shape[0])))
    return noise[:n]


def noise_gain(signal_power, noise_power, snr_db):
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_noise(signal, noise, snr_db):
    """signal + g * noise with g chosen so the mixture has the requested SNR."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = fit_length(noise, signal.shape[0]).astype(np.float64)
    ps, pn = power(signal), power(noise)
    if ps <= 0:
        raise ValueError("signal has zero power")
    if pn <= 0:
        raise ValueError("noise has zero power")
    out = signal + noise_gain(ps, pn, snr_db) * noise
    clipped = np.mean(np.abs(out) > 1.0)
    if clipped > 0:
        log.warning("mix_noise: clipping %.4f%% of samples", 100 * clipped)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def add_overlap(u, prefix, suffix):
    """Add ``prefix``'s tail over the first quarter of ``u`` and ``suffix``'s head over the last quarter.

    Both interferers are scaled to ``u``'s power (0 dB); the middle half is untouched.
    """
    if u.id in (prefix.id, suffix.id) or prefix.id == suffix.id:
        raise ValueError("overlap utterances must be distinct")
    x = np.asarray(u.samples, dtype=np.float64)
    if num_frames(x.shape[0]) < 4:
        raise ValueError("utterance too short for overlap (fewer than 4 frames)")
    n = x.shape[0]
    q = n // 4
    ps = power(x)
    out = x.copy()
    p = np.asarray(prefix.samples, dtype=np.float64)
    s = np.asarray(suffix.samples, dtype=np.float64)
    head = fit_length(p[::-1], q)[::-1]
    tail = fit_length(s, q)
    out[:q] += noise_gain(ps, power(p), 0.0) * head
    out[n - q:] += noise_gain(ps, power(s), 0.0) * tail
    clipped = np.mean(np.abs(out) > 1.0)
    if clipped > 0:
        log.warning("add_overlap: clipping %.4f%% of samples", 100 * clipped)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def spectral_flatness(x, nfft=512):
    """Geometric over arithmetic mean of the average power spectrum."""
    x = np.asarray(x, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, nfft)[::nfft // 2]
    spec = np.mean(np.abs(np.fft.rfft(frames * np.hanning(nfft), axis=-1)) ** 2, axis=0) + 1e-12
    return float(np.exp(np.mean(np.log(spec))) / np.mean(spec))


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def draw_distractors(n_base, index, n_tracks, seed):
    """Indices of n_tracks-1 distinct other utterances; nested across n_tracks for a fixed seed."""
    if n_tracks < 1:
        raise ValueError("need at least one track")
    if n_base < n_tracks:
        raise ValueError(f"base set of {n_base} utterances cannot supply {n_tracks} distinct tracks")
    others = np.array([j for j in range(n_base) if j != index])
    order = item_rng(seed, ("distractors", index).__repr__()).permutation(others)
    return [int(j) for j in order[: n_tracks - 1]]


def build_multitrack(base, n_tracks, seed, audio=None, condition="clean"):
    """Attach n_tracks-1 duration-matched distractor tracks to every base utterance.

    ``audio`` optionally replaces each base waveform (augmented audio); the
    ground-truth track is always index 0.
    """
    out = []
    for i, u in enumerate(base):
        T = u.num_frames
        tracks = [u.synced]
        for j in draw_distractors(len(base), i, n_tracks, seed):
            tracks.append(match_length(base[j].synced, T))
        samples = u.samples if audio is None else audio[i]
        out.append(MultiTrackExample(u.id, samples, tracks, u.text, condition, 0))
    return out


class BabbleBank:
    """A long babble recording; items crop it at offsets drawn from their own stream."""

    def __init__(self, seed, seconds=30.0, cfg=SynthConfig()):
        self.samples = synth_babble(seed, int(seconds * SAMPLE_RATE), cfg=cfg)

    def crop(self, rng, n):
        start = int(rng.integers(0, max(1, self.samples.shape[0] - n)))
        return fit_length(self.samples[start:], n)


def augment_audio(base, noise, seed, babble):
    """Augmented waveform for every base utterance under one noise condition."""
    if noise not in NOISE_CONDITIONS:
        raise ValueError(f"unknown noise condition {noise!r}")
    out = []
    for i, u in enumerate(base):
        if noise == "clean":
            out.append(u.samples)
            continue
        rng = item_rng(seed, f"{noise}:{u.id}")
        if noise == "overlap":
            j, k = draw_distractors(len(base), i, 3, seed + 7919)
            out.append(add_overlap(u, base[j], base[k]))
        else:
            out.append(mix_noise(u.samples, babble.crop(rng, u.samples.shape[0]), _SNR[noise]))
    return out


def build_condition(base, spec, babble):
    audio = augment_audio(base, spec.noise, spec.seed, babble)
    return build_multitrack(base, spec.tracks, spec.seed, audio=audio, condition=spec.tag)


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

REQUIRED_FIELDS = ("id", "audio", "video", "transcript", "gt_index", "condition", "seed")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    id: str
    audio: str
    video: list
    transcript: str
    gt_index: int = 0
    condition: str = "clean"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = dict(self.extra)
        d.update(id=self.id, audio=self.audio, video=list(self.video), transcript=self.transcript,
                 gt_index=self.gt_index, condition=self.condition, seed=self.seed)
        return json.dumps(d, sort_keys=True, ensure_ascii=False)


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed record ({e.msg})") from None
            if not isinstance(d, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            for k in REQUIRED_FIELDS:
                if k not in d:
                    raise ManifestError(f"{path}:{lineno}: missing required field {k!r}")
            if not isinstance(d["video"], list):
                raise ManifestError(f"{path}:{lineno}: field 'video' must be a list")
            extra = {k: v for k, v in d.items() if k not in REQUIRED_FIELDS}
            records.append(ManifestRecord(str(d["id"]), str(d["audio"]), list(d["video"]), str(d["transcript"]),
                                          int(d["gt_index"]), str(d["condition"]), int(d["seed"]), extra))
    return records


def mouth_frames_per_acoustic(fps):
    return fps * FRAME_SECONDS
