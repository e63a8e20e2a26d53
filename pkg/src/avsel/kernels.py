"""Hot inner loops: transducer lattice DP, LSTM recurrence, edit distance.

Every kernel has a loop form (compiled by numba) and a numpy form.  The public
names at the bottom resolve to one of them according to ``_accel.USE_NUMBA``;
both forms stay importable for the benchmark and for cross-checking tests.
"""
import numpy as np

from ._accel import njit, pick

NEG_INF = -np.inf


# --------------------------------------------------------------------------
# RNN-T forward/backward over one (T, U+1) lattice
# --------------------------------------------------------------------------

def _lae(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


def _rnnt_dp_loops(lp_blank, lp_label):
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = np.empty((T, U1))
    beta = np.empty((T, U1))
    alpha[0, 0] = 0.0
    for u in range(1, U1):
        alpha[0, u] = alpha[0, u - 1] + lp_label[0, u - 1]
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + lp_blank[t - 1, 0]
        for u in range(1, U1):
            alpha[t, u] = _lae(alpha[t - 1, u] + lp_blank[t - 1, u],
                               alpha[t, u - 1] + lp_label[t, u - 1])
    loglik = alpha[T - 1, U] + lp_blank[T - 1, U]

    beta[T - 1, U] = lp_blank[T - 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + lp_label[T - 1, u]
    for t in range(T - 2, -1, -1):
        beta[t, U] = beta[t + 1, U] + lp_blank[t, U]
        for u in range(U - 1, -1, -1):
            beta[t, u] = _lae(beta[t + 1, u] + lp_blank[t, u],
                              beta[t, u + 1] + lp_label[t, u])

    g_blank = np.zeros((T, U1))
    g_label = np.zeros((T, max(U, 0)))
    for t in range(T):
        for u in range(U1):
            if t < T - 1:
                nxt = beta[t + 1, u]
            elif u == U:
                nxt = 0.0
            else:
                nxt = NEG_INF
            if nxt != NEG_INF:
                g_blank[t, u] = -np.exp(alpha[t, u] + lp_blank[t, u] + nxt - loglik)
            if u < U:
                g_label[t, u] = -np.exp(alpha[t, u] + lp_label[t, u] + beta[t, u + 1] - loglik)
    return alpha, beta, loglik, g_blank, g_label


def _rnnt_dp_numpy(lp_blank, lp_label):
    # anti-diagonal wavefront: every cell on t+u=n depends only on diagonal n-1
    lp_blank = np.asarray(lp_blank, dtype=np.float64)
    lp_label = np.asarray(lp_label, dtype=np.float64)
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = np.full((T, U1), NEG_INF)
    beta = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    with np.errstate(invalid="ignore"):
        for n in range(1, T + U):
            t = np.arange(max(0, n - U), min(T - 1, n) + 1)
            u = n - t
            from_t = np.full(t.shape, NEG_INF)
            m = t > 0
            from_t[m] = alpha[t[m] - 1, u[m]] + lp_blank[t[m] - 1, u[m]]
            from_u = np.full(t.shape, NEG_INF)
            m = u > 0
            from_u[m] = alpha[t[m], u[m] - 1] + lp_label[t[m], u[m] - 1]
            alpha[t, u] = np.logaddexp(from_t, from_u)
        loglik = alpha[T - 1, U] + lp_blank[T - 1, U]

        beta[T - 1, U] = lp_blank[T - 1, U]
        for n in range(T + U - 2, -1, -1):
            t = np.arange(max(0, n - U), min(T - 1, n) + 1)
            u = n - t
            to_t = np.full(t.shape, NEG_INF)
            m = t < T - 1
            to_t[m] = beta[t[m] + 1, u[m]] + lp_blank[t[m], u[m]]
            to_u = np.full(t.shape, NEG_INF)
            m = u < U
            to_u[m] = beta[t[m], u[m] + 1] + lp_label[t[m], u[m]]
            beta[t, u] = np.logaddexp(to_t, to_u)

    nxt = np.full((T, U1), NEG_INF)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U] = 0.0
    g_blank = -np.exp(alpha + lp_blank + nxt - loglik)
    g_label = -np.exp(alpha[:, :U] + lp_label + beta[:, 1:] - loglik)
    return alpha, beta, float(loglik), g_blank, g_label


# --------------------------------------------------------------------------
# LSTM recurrence, time-major. Gate order: input, forget, cell, output.
# --------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_fwd_loops(gx, whh):
    T, B, G = gx.shape
    H = G // 4
    hs = np.zeros((T, B, H), dtype=gx.dtype)
    cs = np.zeros((T, B, H), dtype=gx.dtype)
    acts = np.empty((T, B, G), dtype=gx.dtype)
    h = np.zeros((B, H), dtype=gx.dtype)
    c = np.zeros((B, H), dtype=gx.dtype)
    for t in range(T):
        z = gx[t] + np.dot(h, whh)
        for b in range(B):
            for j in range(H):
                i_ = 1.0 / (1.0 + np.exp(-z[b, j]))
                f_ = 1.0 / (1.0 + np.exp(-z[b, H + j]))
                g_ = np.tanh(z[b, 2 * H + j])
                o_ = 1.0 / (1.0 + np.exp(-z[b, 3 * H + j]))
                cc = f_ * c[b, j] + i_ * g_
                c[b, j] = cc
                h[b, j] = o_ * np.tanh(cc)
                acts[t, b, j] = i_
                acts[t, b, H + j] = f_
                acts[t, b, 2 * H + j] = g_
                acts[t, b, 3 * H + j] = o_
        hs[t] = h
        cs[t] = c
    return hs, cs, acts


def _lstm_bwd_loops(dhs, hs, cs, acts, whh):
    T, B, H = hs.shape
    G = 4 * H
    dgx = np.empty((T, B, G), dtype=hs.dtype)
    dwhh = np.zeros((H, G), dtype=hs.dtype)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    whh_t = np.ascontiguousarray(whh.T)
    zero = np.zeros((B, H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        dz = np.empty((B, G), dtype=hs.dtype)
        for b in range(B):
            for j in range(H):
                i_ = acts[t, b, j]
                f_ = acts[t, b, H + j]
                g_ = acts[t, b, 2 * H + j]
                o_ = acts[t, b, 3 * H + j]
                c_prev = cs[t - 1, b, j] if t > 0 else 0.0
                tc = np.tanh(cs[t, b, j])
                dh = dhs[t, b, j] + dh_next[b, j]
                dc = dh * o_ * (1.0 - tc * tc) + dc_next[b, j]
                dz[b, j] = dc * g_ * i_ * (1.0 - i_)
                dz[b, H + j] = dc * c_prev * f_ * (1.0 - f_)
                dz[b, 2 * H + j] = dc * i_ * (1.0 - g_ * g_)
                dz[b, 3 * H + j] = dh * tc * o_ * (1.0 - o_)
                dc_next[b, j] = dc * f_
        dgx[t] = dz
        h_prev = hs[t - 1] if t > 0 else zero
        dwhh += np.dot(h_prev.T, dz)
        dh_next = np.dot(dz, whh_t)
    return dgx, dwhh


def _lstm_fwd_numpy(gx, whh):
    T, B, G = gx.shape
    H = G // 4
    hs = np.zeros((T, B, H), dtype=gx.dtype)
    cs = np.zeros((T, B, H), dtype=gx.dtype)
    acts = np.empty((T, B, G), dtype=gx.dtype)
    h = np.zeros((B, H), dtype=gx.dtype)
    c = np.zeros((B, H), dtype=gx.dtype)
    for t in range(T):
        z = gx[t] + h @ whh
        a = acts[t]
        a[:, :2 * H] = _sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
        c = a[:, H:2 * H] * c + a[:, :H] * a[:, 2 * H:3 * H]
        h = a[:, 3 * H:] * np.tanh(c)
        hs[t] = h
        cs[t] = c
    return hs, cs, acts


def _lstm_bwd_numpy(dhs, hs, cs, acts, whh):
    T, B, H = hs.shape
    dgx = np.empty((T, B, 4 * H), dtype=hs.dtype)
    dwhh = np.zeros_like(whh)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i_, f_, g_, o_ = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
        c_prev = cs[t - 1] if t > 0 else np.zeros_like(dh_next)
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_next
        dc = dh * o_ * (1.0 - tc * tc) + dc_next
        dz = dgx[t]
        dz[:, :H] = dc * g_ * i_ * (1.0 - i_)
        dz[:, H:2 * H] = dc * c_prev * f_ * (1.0 - f_)
        dz[:, 2 * H:3 * H] = dc * i_ * (1.0 - g_ * g_)
        dz[:, 3 * H:] = dh * tc * o_ * (1.0 - o_)
        dc_next = dc * f_
        if t > 0:
            dwhh += hs[t - 1].T @ dz
        dh_next = dz @ whh.T
    return dgx, dwhh


# --------------------------------------------------------------------------
# Levenshtein distance over integer sequences
# --------------------------------------------------------------------------

def _edit_distance_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if prev[j] + 1 < best:
                best = prev[j] + 1
            cur[j] = best
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def _edit_distance_numpy(a, b):
    n, m = len(a), len(b)
    idx = np.arange(m + 1)
    prev = idx.copy()
    for i in range(1, n + 1):
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = i
        cand[1:] = np.minimum(prev[:-1] + (b != a[i - 1]), prev[1:] + 1)
        # insertions chain along the row: d[j] = min(cand[j], d[j-1] + 1)
        prev = np.minimum.accumulate(cand - idx) + idx
    return int(prev[m])


if njit(_lae) is not None:
    # the DP loop resolves _lae from module globals when it is compiled
    _lae = njit(_lae)
rnnt_dp_numba = njit(_rnnt_dp_loops)
lstm_forward_numba = njit(_lstm_fwd_loops)
lstm_backward_numba = njit(_lstm_bwd_loops)
edit_distance_numba = njit(_edit_distance_loops)

rnnt_dp_numpy = _rnnt_dp_numpy
lstm_forward_numpy = _lstm_fwd_numpy
lstm_backward_numpy = _lstm_bwd_numpy
edit_distance_numpy = _edit_distance_numpy


def rnnt_dp(lp_blank, lp_label):
    """Alpha/beta lattices, log-likelihood and d(-loglik)/d(log-probs).

    ``lp_blank`` is (T, U+1) and ``lp_label`` is (T, U): log-probabilities of
    blank and of the next target label at every lattice node.
    """
    fn = pick(rnnt_dp_numba, rnnt_dp_numpy)
    lp_blank = np.ascontiguousarray(lp_blank, dtype=np.float64)
    lp_label = np.ascontiguousarray(lp_label, dtype=np.float64).reshape(lp_blank.shape[0], -1)
    alpha, beta, loglik, gb, gl = fn(lp_blank, lp_label)
    return alpha, beta, float(loglik), gb, gl


def lstm_forward(gx, whh):
    """Time-major LSTM: ``gx`` is (T, B, 4H) input pre-activations."""
    fn = pick(lstm_forward_numba, lstm_forward_numpy)
    gx = np.ascontiguousarray(gx)
    return fn(gx, np.ascontiguousarray(whh, dtype=gx.dtype))


def lstm_backward(dhs, hs, cs, acts, whh):
    fn = pick(lstm_backward_numba, lstm_backward_numpy)
    dt = hs.dtype
    return fn(np.ascontiguousarray(dhs, dtype=dt), hs, cs, acts,
              np.ascontiguousarray(whh, dtype=dt))


def edit_distance(a, b):
    fn = pick(edit_distance_numba, edit_distance_numpy)
    return int(fn(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


# --------------------------------------------------------------------------
# col2im for 3-D convolution backward (channels-last)
# --------------------------------------------------------------------------

def _col2im3d_loops(dcols, out_shape, kernel, stride, dxp):
    # dcols: (N*To*Ho*Wo, kt*kh*kw*C) laid out as [n, t, h, w, kt, kh, kw, c]
    N, To, Ho, Wo = out_shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    C = dxp.shape[4]
    row = 0
    for n in range(N):
        for t in range(To):
            for h in range(Ho):
                for w in range(Wo):
                    col = 0
                    for a in range(kt):
                        for b in range(kh):
                            for d in range(kw):
                                for c in range(C):
                                    dxp[n, t * st + a, h * sh + b, w * sw + d, c] += dcols[row, col]
                                    col += 1
                    row += 1
    return dxp


def _col2im3d_numpy(dcols, out_shape, kernel, stride, dxp):
    N, To, Ho, Wo = out_shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    C = dxp.shape[4]
    d = dcols.reshape(N, To, Ho, Wo, kt, kh, kw, C)
    for a in range(kt):
        for b in range(kh):
            for e in range(kw):
                dxp[:, a:a + st * (To - 1) + 1:st, b:b + sh * (Ho - 1) + 1:sh,
                    e:e + sw * (Wo - 1) + 1:sw] += d[:, :, :, :, a, b, e]
    return dxp


col2im3d_numba = njit(_col2im3d_loops)
col2im3d_numpy = _col2im3d_numpy


def col2im3d(dcols, out_shape, kernel, stride, dxp):
    fn = pick(col2im3d_numba, col2im3d_numpy)
    return fn(np.ascontiguousarray(dcols), tuple(int(v) for v in out_shape),
              tuple(int(v) for v in kernel), tuple(int(v) for v in stride), dxp)
