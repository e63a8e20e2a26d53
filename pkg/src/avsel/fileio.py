"""Binary containers: checkpoints (AVCK), features (AVTF), synced video (AVTV), WAV."""
import json
import struct
import wave
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CKPT_MAGIC = b"AVCK"
FEAT_MAGIC = b"AVTF"
VIDEO_MAGIC = b"AVTV"


class FormatError(ValueError):
    pass


def _write_array(fh, arr):
    arr = np.asarray(arr)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh):
    head = fh.read(4)
    if len(head) < 4:
        raise FormatError("truncated array header")
    (rank,) = struct.unpack("<I", head)
    dims = struct.unpack(f"<{rank}q", fh.read(8 * rank))
    n = int(np.prod(dims)) if rank else 1
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated array payload")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def _check_header(fh, magic):
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")


def save_tensor_file(path, arr, magic):
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_array(fh, arr)


def load_tensor_file(path, magic):
    with open(path, "rb") as fh:
        _check_header(fh, magic)
        return _read_array(fh)


def save_features(path, feats):
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[1] != 240:
        raise FormatError(f"features must be (T, 240), got {feats.shape}")
    save_tensor_file(path, feats, FEAT_MAGIC)


def load_features(path):
    return load_tensor_file(path, FEAT_MAGIC)


def save_video(path, frames):
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise FormatError(f"video must be (T, H, W, 3), got {frames.shape}")
    save_tensor_file(path, frames, VIDEO_MAGIC)


def load_video(path):
    return load_tensor_file(path, VIDEO_MAGIC)


def save_checkpoint(path, tensors, meta=None):
    """Write named float32 tensors; ``meta`` goes to a JSON sidecar ``<path>.json``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name in sorted(tensors):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            _write_array(fh, tensors[name])
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(tensors, meta)``; meta is {} when there is no sidecar."""
    path = Path(path)
    tensors = {}
    with open(path, "rb") as fh:
        _check_header(fh, CKPT_MAGIC)
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise FormatError("truncated record header")
            (n,) = struct.unpack("<I", head)
            name = fh.read(n).decode("utf-8")
            tensors[name] = _read_array(fh)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return tensors, meta


def write_wav(path, samples, sample_rate=16000):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    """Return ``(samples in [-1, 1] as float32, sample_rate)`` for mono 16-bit PCM."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError("expected mono 16-bit PCM")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / 32767.0), sr
