"""Log-mel frontend: 25 ms Hann windows every 10 ms, 80 mel bands, stacked by 3."""
import functools

import numpy as np

SAMPLE_RATE = 16000
WIN = 400
HOP = 160
NFFT = 512
N_MELS = 80
FMIN = 125.0
FMAX = 7500.0
ENERGY_FLOOR = 1e-10
STACK = 3
FEAT_DIM = N_MELS * STACK
FRAME_SECONDS = STACK * HOP / SAMPLE_RATE


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def hann(n=WIN):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def mel_centers(n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_mels=N_MELS, nfft=NFFT, sr=SAMPLE_RATE, fmin=FMIN, fmax=FMAX):
    """(nfft//2+1, n_mels) triangular weights evaluated at the DFT bin frequencies.

    Each triangle is scaled to unit area (2 / bandwidth) so wide high bands do
    not dominate narrow low ones.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(nfft // 2 + 1) * sr / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    fb.setflags(write=False)
    return fb.T


def frame_windows(samples):
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if x.shape[0] < WIN:
        raise ValueError(f"utterance too short: {x.shape[0]} samples < {WIN}")
    n = (x.shape[0] - WIN) // HOP + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN)[::HOP][:n]
    return frames * hann()


def log_mel(windows):
    windows = np.atleast_2d(windows)
    spec = np.fft.rfft(windows, n=NFFT, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank()
    return np.log(np.maximum(energies, ENERGY_FLOOR))


def stack3(feats):
    feats = np.asarray(feats)
    if feats.shape[0] < STACK:
        raise ValueError(f"need at least {STACK} frames to stack, got {feats.shape[0]}")
    t = feats.shape[0] // STACK
    return feats[: t * STACK].reshape(t, STACK * feats.shape[1])


def features(samples):
    """(T, 240) float32 features for a 16 kHz waveform."""
    return stack3(log_mel(frame_windows(samples))).astype(np.float32)


def num_frames(n_samples):
    """Stacked frame count produced by ``features`` for a waveform of ``n_samples``."""
    if n_samples < WIN:
        return 0
    return ((n_samples - WIN) // HOP + 1) // STACK
