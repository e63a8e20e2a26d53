"""Feature fusion, BiLSTM encoder, prediction network, joint network, RNN-T loss
and greedy decoding."""
import string

import numpy as np

from . import autodiff as ad
from . import kernels
from .nn import LayerNormParams, Linear, LSTMLayer, reverse_index, uniform_init

BLANK = 0


class TokenVocab:
    """Blank (id 0), space, apostrophe and the 26 lowercase letters."""

    def __init__(self, chars=" '" + string.ascii_lowercase):
        self.chars = chars
        self.index = {c: i + 1 for i, c in enumerate(chars)}

    def __len__(self):
        return len(self.chars) + 1

    def encode(self, text):
        try:
            return np.array([self.index[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == BLANK or not 0 < i < len(self):
                raise ValueError(f"invalid transcript token id {i}")
            out.append(self.chars[i - 1])
        return "".join(out)


VOCAB = TokenVocab()


def fuse(acoustic, visual):
    """[A; V'] along the last axis, acoustic block first."""
    acoustic, visual = ad.as_tensor(acoustic), ad.as_tensor(visual)
    if acoustic.shape[:2] != visual.shape[:2]:
        raise ValueError(f"cannot fuse acoustic {acoustic.shape} with visual {visual.shape}: B/T mismatch")
    return ad.concat([acoustic, visual], axis=-1)


class Encoder:
    """Stacked bidirectional LSTM with layer normalization on each layer's input."""

    def __init__(self, store, name, d_in, units=64, layers=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.units = units
        self.layers = []
        for i in range(layers):
            self.layers.append((
                LayerNormParams(store, f"{name}/l{i}/ln", d_in),
                LSTMLayer(store, f"{name}/l{i}/fwd", d_in, units, rng),
                LSTMLayer(store, f"{name}/l{i}/bwd", d_in, units, rng),
            ))
            d_in = 2 * units

    @property
    def out_dim(self):
        return 2 * self.units

    def __call__(self, x, lengths=None):
        x = ad.as_tensor(x)
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        rev = reverse_index(lengths, T)[:, :, None]
        for ln, fwd, bwd in self.layers:
            h = ln(x)
            f = fwd(h)
            b = ad.take_along(bwd(ad.take_along(h, rev, axis=1)), rev, axis=1)
            x = ad.concat([f, b], axis=-1)
        return x


def encode(encoder, fused, lengths=None):
    return encoder(fused, lengths)


class Predictor:
    """Embedding + LSTM over the target prefix; position u sees tokens [0, u)."""

    def __init__(self, store, name, vocab_size, units=64, embed=32, layers=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab_size = vocab_size
        self.embed = store.add(f"{name}/embed", uniform_init(rng, (vocab_size, embed), 1, 0.5))
        self.lstms = []
        d = embed
        for i in range(layers):
            self.lstms.append(LSTMLayer(store, f"{name}/lstm{i}", d, units, rng))
            d = units
        self.units = units

    def __call__(self, targets):
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim == 1:
            targets = targets[None]
        if targets.size and (targets.min() < 1 or targets.max() >= self.vocab_size):
            raise ValueError("target ids must be non-blank vocabulary ids")
        prev = np.concatenate([np.full((targets.shape[0], 1), BLANK), targets], axis=1)
        x = ad.getitem(self.embed, prev)
        for lstm in self.lstms:
            x = lstm(x)
        return x

    def initial_state(self, batch=1):
        dt = self.embed.data.dtype
        return [(np.zeros((batch, l.hidden), dt), np.zeros((batch, l.hidden), dt)) for l in self.lstms]

    def step(self, token, state):
        x = self.embed.data[np.atleast_1d(token)]
        new = []
        for lstm, (h, c) in zip(self.lstms, state):
            h, c = lstm.step(x, h, c)
            new.append((h, c))
            x = h
        return x, new


class Joint:
    def __init__(self, store, name, enc_dim, dec_dim, vocab_size, hidden=64, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc = Linear(store, f"{name}/enc", enc_dim, hidden, rng, bias=False)
        self.dec = Linear(store, f"{name}/dec", dec_dim, hidden, rng)
        self.out = Linear(store, f"{name}/out", hidden, vocab_size, rng)
        self.hidden = hidden

    def __call__(self, enc, dec):
        e = self.enc(enc)
        d = self.dec(dec)
        B, T, J = e.shape
        U1 = d.shape[1]
        z = ad.tanh(ad.add(ad.reshape(e, (B, T, 1, J)), ad.reshape(d, (d.shape[0], 1, U1, J))))
        return self.out(z)

    def step(self, enc_t, dec_out):
        z = np.tanh(enc_t @ self.enc.w.data + dec_out @ self.dec.w.data + self.dec.b.data)
        return z @ self.out.w.data + self.out.b.data


def rnnt_lattice(enc_states, targets, predictor, joint):
    """(B, T, U+1, V) logits; a single (T, H) encoder sequence gives a (T, U+1, V) lattice."""
    enc_states = ad.as_tensor(enc_states)
    single = enc_states.ndim == 2
    if single:
        enc_states = ad.reshape(enc_states, (1,) + enc_states.shape)
    logits = joint(enc_states, predictor(targets))
    if single:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class RnntLoss(ad.Function):
    """Mean over the batch of -log P(target | lattice), marginalized over alignments.

    Integer side inputs (targets, lengths) travel as attrs, not graph nodes.
    """

    tag = "rnnt_loss"

    @staticmethod
    def forward(ctx, logits, targets, t_lens, u_lens):
        B = logits.shape[0]
        grads = np.zeros(logits.shape, dtype=np.float64)
        losses = np.empty(B)
        for b in range(B):
            T, U = int(t_lens[b]), int(u_lens[b])
            lp = _log_softmax(logits[b, :T, :U + 1].astype(np.float64))
            y = targets[b, :U]
            lp_blank = lp[:, :, BLANK]
            lp_label = lp[:, np.arange(U), y] if U else np.zeros((T, 0))
            _, _, loglik, g_blank, g_label = kernels.rnnt_dp(lp_blank, lp_label)
            losses[b] = -loglik
            glp = np.zeros_like(lp)
            glp[:, :, BLANK] = g_blank
            if U:
                glp[:, np.arange(U), y] += g_label
            grads[b, :T, :U + 1] = glp - np.exp(lp) * glp.sum(axis=-1, keepdims=True)
        ctx["grads"] = grads / B
        ctx["losses"] = losses
        return np.asarray(losses.mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, g, logits, targets, t_lens, u_lens):
        return ((ctx["grads"] * g).astype(logits.dtype),)


def rnnt_loss(lattice, targets, t_lens=None, u_lens=None):
    """RNN-T loss for a (T, U+1, V) lattice or a padded (B, T, U+1, V) batch."""
    lattice = ad.as_tensor(lattice)
    targets = np.asarray(targets, dtype=np.int64)
    if lattice.ndim == 3:
        lattice = ad.reshape(lattice, (1,) + lattice.shape)
        targets = targets.reshape(1, -1)
    B, T, U1, V = lattice.shape
    if T == 0:
        raise ValueError("rnnt_loss: T must be at least 1")
    if targets.ndim == 1:
        targets = targets[None]
    t_lens = np.full(B, T) if t_lens is None else np.asarray(t_lens)
    u_lens = np.full(B, targets.shape[1]) if u_lens is None else np.asarray(u_lens)
    if np.any(u_lens + 1 > U1) or targets.shape[1] < u_lens.max(initial=0):
        raise ValueError(f"lattice has U+1={U1} but targets need up to {int(u_lens.max()) + 1}")
    if np.any(t_lens > T) or np.any(t_lens < 1):
        raise ValueError("rnnt_loss: frame lengths must lie in [1, T]")
    return RnntLoss.apply(lattice, targets=targets, t_lens=t_lens, u_lens=u_lens)


def greedy_decode(enc_states, predictor, joint, max_symbols=4):
    """Frame-synchronous greedy search over a single (T, H) encoder sequence.

    Returns the emitted token ids (blank never appears).
    """
    enc = np.asarray(enc_states.data if isinstance(enc_states, ad.Tensor) else enc_states)
    if enc.ndim == 3:
        if enc.shape[0] != 1:
            raise ValueError("greedy_decode expects B = 1")
        enc = enc[0]
    state = predictor.initial_state(1)
    dec_out, state = predictor.step(BLANK, state)
    out = []
    for t in range(enc.shape[0]):
        e = enc[t:t + 1]
        for _ in range(max_symbols):
            k = int(np.argmax(joint.step(e, dec_out)[0]))
            if k == BLANK:
                break
            out.append(k)
            dec_out, state = predictor.step(k, state)
    return np.array(out, dtype=np.int64)
