"""Video/audio synchronization and the 3-D convolutional visual frontend."""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .acoustic import FRAME_SECONDS
from .nn import Conv, Linear


def resample_to_frames(frames, fps, T, hop=FRAME_SECONDS):
    """Nearest-neighbour resampling of a (T_v, H, W, 3) track onto ``T`` acoustic frames.

    Output frame t copies source frame round(t * hop * fps), clamped to the
    last source frame.  Halves round up.
    """
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ValueError("empty video track")
    if T < 1:
        raise ValueError("T must be at least 1")
    if fps <= 0:
        raise ValueError("fps must be positive")
    src = np.floor(np.arange(T) * hop * fps + 0.5).astype(np.int64)
    src = np.minimum(src, frames.shape[0] - 1)
    return frames[src]


def match_length(frames, T):
    """Clamp-resample an already synced track to ``T`` frames (repeat last frame / crop)."""
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ValueError("empty video track")
    return frames[np.minimum(np.arange(T), frames.shape[0] - 1)]


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: tuple = (3, 3, 3)
    channels: int = 8
    stride: tuple = (1, 1, 1)


def _default_layers():
    return (
        ConvLayerSpec((3, 3, 3), 8, (1, 1, 1)),
        ConvLayerSpec((3, 3, 3), 16, (1, 2, 2)),
        ConvLayerSpec((3, 3, 3), 16, (1, 1, 1)),
        ConvLayerSpec((3, 3, 3), 32, (1, 2, 2)),
        ConvLayerSpec((3, 3, 3), 32, (1, 1, 1)),
    )


@dataclass(frozen=True)
class Conv3dStackParams:
    layers: tuple = field(default_factory=_default_layers)
    out_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        for spec in self.layers:
            if spec.stride[0] != 1 or spec.kernel[0] % 2 != 1:
                raise ValueError("temporal stride must be 1 with an odd temporal kernel (frame alignment)")

    def spatial_plan(self, H, W):
        """Spatial size entering each layer; raises if a layer cannot fit its kernel."""
        sizes = []
        for i, spec in enumerate(self.layers):
            if H < spec.kernel[1] or W < spec.kernel[2]:
                raise ValueError(f"layer {i}: spatial size {H}x{W} too small for kernel {spec.kernel[1:]}")
            sizes.append((H, W))
            H = (H - 1) // spec.stride[1] + 1
            W = (W - 1) // spec.stride[2] + 1
        return sizes, (H, W)

    def to_dict(self):
        return {"layers": [[list(s.kernel), s.channels, list(s.stride)] for s in self.layers],
                "out_dim": self.out_dim, "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d):
        layers = tuple(ConvLayerSpec(tuple(k), int(c), tuple(s)) for k, c, s in d["layers"])
        return cls(layers, int(d["out_dim"]), int(d.get("in_channels", 3)))


class VisualFrontend:
    """Per-track 3-D conv stack, global spatial average pooling, linear projection.

    Input (M, T, H, W, C) -> output (M, T, out_dim).  Tracks never mix.
    """

    def __init__(self, store, name, params, rng):
        self.params = params
        self.name = name
        cin = params.in_channels
        self.convs = []
        for i, spec in enumerate(params.layers):
            self.convs.append(Conv(store, f"{name}/conv{i}", spec.kernel, cin, spec.channels, rng,
                                   stride=spec.stride))
            cin = spec.channels
        self.proj = Linear(store, f"{name}/proj", cin, params.out_dim, rng)

    def __call__(self, video):
        video = ad.as_tensor(video)
        if video.ndim != 5 or video.shape[-1] != self.params.in_channels:
            raise ValueError(f"expected (M, T, H, W, {self.params.in_channels}) video, got {video.shape}")
        M, T, H, W, C = video.shape
        self.params.spatial_plan(H, W)
        x = video
        for conv in self.convs:
            x = ad.relu(conv(x))
        x = ad.mean(x, axis=(2, 3))
        return self.proj(x)


def conv3d_features(frontend, synced):
    """Visual features (M, T, D_v) for a batch of synced tracks."""
    return frontend(synced)
