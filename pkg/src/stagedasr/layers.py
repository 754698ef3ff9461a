"""Sequence model building blocks with length bookkeeping.

Unidirectional LSTM layers, time maxpooling, projection+log-softmax
heads, maxout, masked batch norm, and dropout.  The LSTM forward and
backward passes are hand-written kernels registered as single autodiff
nodes (`lstm_seq`, `lstm_cell`); everything else composes primitive
tensor ops.

Gate order is fixed as (input, forget, cell, output): weight rows
``[0:H]`` are the input gate, ``[H:2H]`` forget, ``[2H:3H]`` cell
candidate, ``[3H:4H]`` output.  Checkpoints rely on this layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, make_op

INIT_SCALE = 0.05  # uniform(-s, s) for fresh weights; forget bias gets +1


@dataclass
class SequenceBatch:
    """A padded (batch, time, dim) tensor plus per-sequence valid lengths.

    ``subsampling`` is the cumulative product of pooling factors applied
    so far, i.e. one output frame spans that many input frames.
    """
    data: Tensor
    lengths: np.ndarray
    subsampling: int = 1

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.data.ndim != 3:
            raise ValueError("SequenceBatch data must be (batch, time, dim)")
        b, t, _ = self.data.shape
        if self.lengths.shape != (b,):
            raise ValueError("lengths must have one entry per sequence")
        if np.any(self.lengths < 1) or np.any(self.lengths > t):
            raise ValueError("lengths must be in [1, time]")

    @property
    def max_time(self):
        return self.data.shape[1]

    def time_mask(self):
        """(batch, time) boolean validity mask."""
        return np.arange(self.max_time)[None, :] < self.lengths[:, None]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lstm_seq(x, w_ih, w_hh, b, lengths, h0=None, c0=None):
    """Run a full LSTM over (B, T, D) input; one fused autodiff node.

    Output frames at padded positions are zero, and the recurrent state
    carries through them unchanged (so variable-length batching cannot
    leak padding into real frames).  Returns ``(h_out, h_final, c_final)``
    where the finals are plain arrays taken at each sequence's last
    valid frame; they are not differentiated through.
    """
    B, Tlen, D = x.data.shape
    H = w_hh.data.shape[1]
    if w_ih.data.shape != (4 * H, D):
        raise ValueError("lstm_seq: input dim %d does not match weights %r"
                         % (D, w_ih.data.shape))
    mask = np.arange(Tlen)[None, :] < np.asarray(lengths)[:, None]

    pre = x.data @ w_ih.data.T + b.data          # (B, T, 4H)
    w_hh_t = np.ascontiguousarray(w_hh.data.T)   # (H, 4H)
    gates = np.empty((B, Tlen, 4 * H))
    tanh_c = np.empty((B, Tlen, H))
    hs = np.zeros((B, Tlen + 1, H))
    cs = np.zeros((B, Tlen + 1, H))
    if h0 is not None:
        hs[:, 0] = h0
    if c0 is not None:
        cs[:, 0] = c0
    out = np.zeros((B, Tlen, H))
    for t in range(Tlen):
        a = pre[:, t] + hs[:, t] @ w_hh_t
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_cand = f * cs[:, t] + i * g
        tcc = np.tanh(c_cand)
        h_cand = o * tcc
        m = mask[:, t:t + 1]
        cs[:, t + 1] = np.where(m, c_cand, cs[:, t])
        hs[:, t + 1] = np.where(m, h_cand, hs[:, t])
        out[:, t] = np.where(m, h_cand, 0.0)
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o
        tanh_c[:, t] = tcc

    def vjp_all(go):
        da_all = np.empty((B, Tlen, 4 * H))
        dhs = np.zeros((B, H))
        dcs = np.zeros((B, H))
        for t in range(Tlen - 1, -1, -1):
            m = mask[:, t:t + 1]
            i = gates[:, t, :H]
            f = gates[:, t, H:2 * H]
            g = gates[:, t, 2 * H:3 * H]
            o = gates[:, t, 3 * H:]
            tcc = tanh_c[:, t]
            dh_cand = np.where(m, dhs + go[:, t], 0.0)
            dhs = np.where(m, 0.0, dhs)
            dc_cand = np.where(m, dcs, 0.0)
            dcs = np.where(m, 0.0, dcs)
            do = dh_cand * tcc
            dc_cand = dc_cand + dh_cand * o * (1.0 - tcc * tcc)
            di = dc_cand * g
            dg = dc_cand * i
            df = dc_cand * cs[:, t]
            dcs = dcs + dc_cand * f
            da = da_all[:, t]
            da[:, :H] = di * i * (1.0 - i)
            da[:, H:2 * H] = df * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dg * (1.0 - g * g)
            da[:, 3 * H:] = do * o * (1.0 - o)
            dhs = dhs + da @ w_hh.data
        return da_all

    # each parent's vjp recomputes the shared reverse scan; cache it
    cache = {}

    def shared(go):
        key = id(go)
        if key not in cache:
            cache.clear()
            cache[key] = vjp_all(go)
        return cache[key]

    h_out = make_op(out, (x, w_ih, w_hh, b), (
        lambda go: shared(go) @ w_ih.data,
        lambda go: np.tensordot(shared(go), x.data, axes=((0, 1), (0, 1))),
        lambda go: np.tensordot(shared(go), hs[:, :Tlen], axes=((0, 1), (0, 1))),
        lambda go: shared(go).sum(axis=(0, 1)),
    ))
    rows = np.arange(B)
    return h_out, hs[rows, lengths].copy(), cs[rows, lengths].copy()


def lstm_cell(x, state, w_ih, w_hh, b):
    """One LSTM step: (B, Din) input and (B, 2H) packed [h, c] state.

    Returns the new packed state; ``state[:, :H]`` is the hidden output.
    """
    B = x.data.shape[0]
    H = w_hh.data.shape[1]
    h_prev = state.data[:, :H]
    c_prev = state.data[:, H:]
    a = x.data @ w_ih.data.T + h_prev @ w_hh.data.T + b.data
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H:2 * H])
    g = np.tanh(a[:, 2 * H:3 * H])
    o = _sigmoid(a[:, 3 * H:])
    c_new = f * c_prev + i * g
    tcc = np.tanh(c_new)
    h_new = o * tcc
    out = np.concatenate([h_new, c_new], axis=1)

    cache = {}

    def shared(go):
        key = id(go)
        if key not in cache:
            cache.clear()
            dh = go[:, :H]
            dc = go[:, H:] + dh * o * (1.0 - tcc * tcc)
            do = dh * tcc
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_prev = dc * f
            da = np.empty((B, 4 * H))
            da[:, :H] = di * i * (1.0 - i)
            da[:, H:2 * H] = df * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dg * (1.0 - g * g)
            da[:, 3 * H:] = do * o * (1.0 - o)
            cache[key] = (da, dc_prev)
        return cache[key]

    return make_op(out, (x, state, w_ih, w_hh, b), (
        lambda go: shared(go)[0] @ w_ih.data,
        lambda go: np.concatenate(
            [shared(go)[0] @ w_hh.data, shared(go)[1]], axis=1),
        lambda go: shared(go)[0].T @ x.data,
        lambda go: shared(go)[0].T @ h_prev,
        lambda go: shared(go)[0].sum(axis=0),
    ))


class UlstmLayer:
    """Unidirectional LSTM with (4H x D) input and (4H x H) hidden weights."""

    def __init__(self, prefix, in_dim, hidden, rng=None):
        self.in_dim = in_dim
        self.hidden = hidden
        if rng is None:
            w_ih = np.zeros((4 * hidden, in_dim))
            w_hh = np.zeros((4 * hidden, hidden))
        else:
            w_ih = rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, in_dim))
            w_hh = rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
        self.w_ih = Parameter(prefix + ".W_ih", w_ih)
        self.w_hh = Parameter(prefix + ".W_hh", w_hh)
        self.b = Parameter(prefix + ".b", b)

    def params(self):
        return [self.w_ih, self.w_hh, self.b]

    def forward(self, batch: SequenceBatch, initial_state=None):
        if batch.data.shape[2] != self.in_dim:
            raise ValueError("ulstm_forward: got dim %d, layer expects %d"
                             % (batch.data.shape[2], self.in_dim))
        h0, c0 = initial_state if initial_state is not None else (None, None)
        h, hT, cT = lstm_seq(batch.data, self.w_ih, self.w_hh, self.b,
                             batch.lengths, h0, c0)
        return SequenceBatch(h, batch.lengths, batch.subsampling), (hT, cT)

    def step(self, x, state):
        return lstm_cell(x, state, self.w_ih, self.w_hh, self.b)


def ulstm_forward(layer, batch, initial_state=None):
    return layer.forward(batch, initial_state)


def maxpool_time(batch: SequenceBatch, factor: int) -> SequenceBatch:
    """Elementwise max over non-overlapping windows along time.

    Output length per sequence is ceil(length/factor); a partial last
    window maxes over the frames it actually has.
    """
    if factor < 2:
        raise ValueError("maxpool_time factor must be >= 2, got %r" % (factor,))
    B, Tlen, D = batch.data.shape
    out_t = -(-Tlen // factor)
    pad = out_t * factor - Tlen
    valid = batch.time_mask()[:, :, None]
    x = T.where(valid, batch.data, -np.inf)
    if pad:
        x = T.concat([x, Tensor(np.full((B, pad, D), -np.inf))], axis=1)
    x = T.reshape(x, (B, out_t, factor, D))
    pooled = T.amax(x, axis=2)
    new_lengths = -(-batch.lengths // factor)
    out_valid = (np.arange(out_t)[None, :] < new_lengths[:, None])[:, :, None]
    pooled = T.where(out_valid, pooled, 0.0)
    return SequenceBatch(pooled, new_lengths, batch.subsampling * factor)


class ProjectionHead:
    """Feed-forward projection producing per-frame log-probability rows."""

    def __init__(self, prefix, in_dim, out_dim, rng=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        w = (np.zeros((out_dim, in_dim)) if rng is None
             else rng.uniform(-INIT_SCALE, INIT_SCALE, (out_dim, in_dim)))
        self.w = Parameter(prefix + ".W", w)
        self.b = Parameter(prefix + ".b", np.zeros(out_dim))

    def params(self):
        return [self.w, self.b]


def ff_softmax(head: ProjectionHead, data: Tensor) -> Tensor:
    """Project (..., H) to (..., V') normalized log probabilities."""
    if data.shape[-1] != head.in_dim:
        raise ValueError("ff_softmax: got dim %d, head expects %d"
                         % (data.shape[-1], head.in_dim))
    logits = T.add(T.matmul(data, T.transpose2d(head.w)), head.b)
    return T.sub(logits, T.logsumexp_t(logits, axis=-1, keepdims=True))


def maxout(t: Tensor, groups: int) -> Tensor:
    """Max within consecutive groups of size ``groups`` along the last axis."""
    d = t.shape[-1]
    if d % groups != 0:
        raise ValueError("maxout: dim %d not divisible by groups %d"
                         % (d, groups))
    if groups == 1:
        return t
    r = T.reshape(t, t.shape[:-1] + (d // groups, groups))
    return T.amax(r, axis=len(t.shape))


class BatchNorm:
    """Per-feature normalization over (batch x valid time).

    Train mode uses current-batch statistics over valid frames and
    updates running stats with momentum 0.99; infer mode applies the
    running stats only, which keeps decoding strictly causal.
    """

    EPS = 1e-12

    def __init__(self, prefix, dim, momentum=0.99):
        self.dim = dim
        self.momentum = momentum
        self.gamma = Parameter(prefix + ".gamma", np.ones(dim))
        self.beta = Parameter(prefix + ".beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, batch: SequenceBatch, mode: str) -> SequenceBatch:
        valid = batch.time_mask()[:, :, None]
        x = batch.data
        if mode == "train":
            n = int(valid.sum())
            if n < 2:
                raise ValueError("batchnorm train mode needs >= 2 valid frames")
            xm = T.where(valid, x, 0.0)
            mean = T.mul(T.tsum(xm, axis=(0, 1)), 1.0 / n)
            xc = T.where(valid, T.sub(x, mean), 0.0)
            var = T.mul(T.tsum(T.mul(xc, xc), axis=(0, 1)), 1.0 / n)
            inv = T.div(Tensor(1.0), T.sqrt(T.add(var, self.EPS)))
            y = T.where(valid, T.add(T.mul(xc, T.mul(self.gamma, inv)),
                                     self.beta), 0.0)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean.data
            self.running_var = m * self.running_var + (1 - m) * var.data
        elif mode == "infer":
            scale = self.gamma.data / np.sqrt(self.running_var + self.EPS)
            shift = self.beta.data - self.running_mean * scale
            y = T.where(valid, T.add(T.mul(x, Tensor(scale)), Tensor(shift)),
                        0.0)
        else:
            raise ValueError("batchnorm mode must be train|infer")
        return SequenceBatch(y, batch.lengths, batch.subsampling)


def dropout(t: Tensor, rate: float, mode: str, rng=None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1), got %r" % (rate,))
    if mode == "infer" or rate == 0.0:
        return t
    if mode != "train":
        raise ValueError("dropout mode must be train|infer")
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return T.mul(t, Tensor(keep))
