"""Soft face-track selection: bilinear audio/video scores, softmax over tracks,
weighted sum of visual features, hard argmax selection and the selection CE loss.
"""
import numpy as np

from . import autodiff as ad
from .acoustic import FEAT_DIM
from .nn import Conv, uniform_init


class QueryNet:
    """Five 1-D convolutions over acoustic frames (kernel 3, stride 1, same padding).

    ReLU after every layer but the last, so queries can take either sign.
    Receptive field is ``layers`` frames on each side.
    """

    def __init__(self, store, name, rng, d_in=FEAT_DIM, width=64, d_q=64, layers=5, kernel=3):
        self.convs = []
        self.kernel = kernel
        cin = d_in
        for i in range(layers):
            cout = d_q if i == layers - 1 else width
            gain = 1.0 if i == layers - 1 else np.sqrt(2.0)
            self.convs.append(Conv(store, f"{name}/conv{i}", (kernel,), cin, cout, rng, gain=gain))
            cin = cout

    @property
    def receptive_radius(self):
        return len(self.convs) * (self.kernel // 2)

    def __call__(self, feats):
        x = ad.as_tensor(feats)
        if x.ndim != 3 or x.shape[-1] != self.convs[0].w.shape[1]:
            raise ValueError(f"expected (B, T, {self.convs[0].w.shape[1]}) features, got {x.shape}")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = ad.relu(x)
        return x


def compute_queries(query_net, feats):
    return query_net(feats)


def init_bilinear(store, name, d_q, d_k, rng, gain=1e-3):
    """Scaled uniform init; the small gain keeps initial scores near zero."""
    return store.add(name, uniform_init(rng, (d_q, d_k), d_q, gain=gain))


def bilinear_scores(queries, w, keys):
    """S[b,t,m] = sum_{q,k} Q[b,t,q] W[q,k] K[m,t,k]."""
    queries, w, keys = ad.as_tensor(queries), ad.as_tensor(w), ad.as_tensor(keys)
    if queries.ndim != 3 or keys.ndim != 3:
        raise ValueError("queries must be (B, T, D_q) and keys (M, T, D_k)")
    if queries.shape[-1] != w.shape[0] or keys.shape[-1] != w.shape[1]:
        raise ValueError(f"bilinear matrix {w.shape} does not match D_q={queries.shape[-1]}, D_k={keys.shape[-1]}")
    if queries.shape[1] != keys.shape[1]:
        raise ValueError(f"time mismatch: queries T={queries.shape[1]}, keys T={keys.shape[1]}")
    qw = ad.matmul(queries, w)
    return ad.einsum("btk,mtk->btm", qw, keys)


def track_mask(track_lengths, T, dtype=np.float32):
    """Additive (1, T, M) mask: 0 where track m has a frame at t, a large negative value elsewhere."""
    lengths = np.asarray(track_lengths)
    valid = np.arange(T)[:, None] < lengths[None, :]
    return np.where(valid, 0.0, -1e9).astype(dtype)[None]


def softmax_over_tracks(scores, mask=None):
    if mask is not None:
        scores = ad.add(scores, mask)
    return ad.softmax(scores, axis=-1)


def weighted_visual(alpha, values):
    """V'[b,t,k] = sum_i alpha[b,t,i] V[i,t,k]."""
    alpha, values = ad.as_tensor(alpha), ad.as_tensor(values)
    if alpha.shape[-1] != values.shape[0]:
        raise ValueError(f"attention over {alpha.shape[-1]} tracks but {values.shape[0]} value tracks")
    if alpha.shape[1] != values.shape[1]:
        raise ValueError(f"time mismatch: weights T={alpha.shape[1]}, values T={values.shape[1]}")
    return ad.einsum("btm,mtk->btk", alpha, values)


def hard_visual(selection, values):
    """Per-frame hard selection: out[t] = V[selection[t], t] for a (T,) index array."""
    values = ad.as_tensor(values)
    sel = np.asarray(selection, dtype=np.int64)
    t = np.arange(values.shape[1])
    return ad.getitem(values, (sel, t))[None]


def select_track(scores):
    """Per-frame argmax over tracks for a single-utterance (1, T, M) score block.

    np.argmax returns the first maximum, so exact ties go to the lowest index.
    """
    s = np.asarray(scores.data if isinstance(scores, ad.Tensor) else scores)
    if s.ndim == 3:
        if s.shape[0] != 1:
            raise ValueError("select_track expects B = 1")
        s = s[0]
    return np.argmax(s, axis=-1)


def selection_ce_loss(alpha):
    """Mean over (b, t) of -log alpha[b, t, b] for a (B, T, M=B) weight block."""
    alpha = ad.as_tensor(alpha)
    B, T, M = alpha.shape
    if B != M:
        raise ValueError(f"selection loss needs B == M (got B={B}, M={M})")
    diag = ad.getitem(alpha, (np.arange(B)[:, None], np.arange(T)[None, :], np.arange(B)[:, None]))
    return ad.neg(ad.mean(ad.log(diag)))


def selection_ce_from_scores(scores, mask=None, frame_valid=None):
    """Same loss computed from raw scores through a stabilized log-softmax.

    ``frame_valid`` (B, T) restricts the average to real (unpadded) audio frames.
    """
    scores = ad.as_tensor(scores)
    B, T, M = scores.shape
    if B != M:
        raise ValueError(f"selection loss needs B == M (got B={B}, M={M})")
    if mask is not None:
        scores = ad.add(scores, mask)
    logp = ad.log_softmax(scores, axis=-1)
    diag = ad.getitem(logp, (np.arange(B)[:, None], np.arange(T)[None, :], np.arange(B)[:, None]))
    if frame_valid is None:
        return ad.neg(ad.mean(diag))
    w = np.asarray(frame_valid, dtype=scores.data.dtype)
    w = w / w.sum()
    return ad.neg(ad.sum_(ad.mul(diag, w)))
