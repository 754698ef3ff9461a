"""Monotonic chunkwise attention.

Training uses the differentiable expected alignment: each frame gets a
stopping probability p_j, the alignment recurrence pushes the previous
step's attention mass forward through (1 - p) survival factors, and a
small softmax window of width w behind each attend point spreads the
mass for the context vector.  Inference replaces all of that with a
hard scan: starting at the previously attended frame, stop at the
first p_j >= 0.5 and attend a softmax over the w frames ending there.

Conventions baked in here: frame indices are 0-based, the alignment
for the first output step is a one-hot at frame 0, chunk width
defaults to 2, and the offset r starts at -1 so early training places
attend points late enough to see content.  The alignment recurrence
q_j = (1 - p_{j-1}) q_{j-1} + alpha_prev_j avoids division, so there
is no denominator epsilon anywhere.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import INIT_SCALE, _sigmoid
from .tensor import Parameter, Tensor


class MonotonicAttentionParams:
    """Both energy parameter sets: monotonic (gain/offset, normalized
    energy vector) and chunk (plain dot-product energy, no gain or
    offset).

    The monotonic energy for decoder state s and encoder frame h_j is
        e_j = g * (v/|v|) . tanh(W_s s + W_h h_j + b) + r
    and the chunk energy is
        u_j = v_c . tanh(W_sc s + W_hc h_j + b_c).
    """

    def __init__(self, prefix, state_dim, enc_dim, energy_dim, rng=None,
                 chunk_width=2):
        if chunk_width < 1:
            raise ValueError("chunk width must be >= 1, got %d" % chunk_width)
        self.chunk_width = chunk_width
        self.energy_dim = energy_dim

        def u(shape):
            if rng is None:
                return np.zeros(shape)
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        self.w_s = Parameter(prefix + ".W_s", u((energy_dim, state_dim)))
        self.w_h = Parameter(prefix + ".W_h", u((energy_dim, enc_dim)))
        self.v = Parameter(prefix + ".v", u(energy_dim))
        self.b = Parameter(prefix + ".b", np.zeros(energy_dim))
        # g starts at 1/sqrt(A) so g * v/|v| has entries on the scale of
        # an ordinary init; r starts negative to delay early attend points
        self.g = Parameter(prefix + ".g", np.asarray(energy_dim ** -0.5))
        self.r = Parameter(prefix + ".r", np.asarray(-1.0))
        self.c_w_s = Parameter(prefix + ".chunk.W_s",
                               u((energy_dim, state_dim)))
        self.c_w_h = Parameter(prefix + ".chunk.W_h",
                               u((energy_dim, enc_dim)))
        self.c_v = Parameter(prefix + ".chunk.v", u(energy_dim))
        self.c_b = Parameter(prefix + ".chunk.b", np.zeros(energy_dim))

    def parameters(self):
        return [self.w_s, self.w_h, self.v, self.b, self.g, self.r,
                self.c_w_s, self.c_w_h, self.c_v, self.c_b]


def initial_alignment(batch, frames):
    """Alignment fed into the first output step: one-hot at frame 0."""
    a = np.zeros((batch, frames))
    a[:, 0] = 1.0
    return a


def _energy_core(w_s, w_h, b, s_prev, h):
    """tanh(W_s s + W_h h_j + b) for every frame, shape (B, T, A)."""
    proj_s = T.matmul(s_prev, T.transpose2d(w_s))
    proj_h = T.matmul(h, T.transpose2d(w_h))
    B, A = proj_s.shape
    return T.tanh(T.add(T.add(T.reshape(proj_s, (B, 1, A)), proj_h), b))


def monotonic_probs(params, s_prev, h, mode, rng=None, lengths=None):
    """Per-frame stopping probabilities, shape (batch, frames).

    Train mode adds unit Gaussian noise to the energies before the
    sigmoid (drawn from rng, so a fixed seed reproduces it exactly);
    inference uses the plain sigmoid.  Frames at or beyond a sequence's
    length get p = 0, so no mass can ever land on padding.
    """
    if mode not in ("train", "infer"):
        raise ValueError("unknown mode %r" % (mode,))
    vnorm = float(np.linalg.norm(params.v.data))
    if vnorm == 0.0:
        raise ValueError("monotonic energy vector has zero norm")
    core = _energy_core(params.w_s, params.w_h, params.b, s_prev, h)
    scale = T.div(params.g, T.sqrt(T.tsum(T.mul(params.v, params.v))))
    e = T.add(T.matmul(core, T.mul(params.v, scale)), params.r)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for the energy noise")
        e = T.add(e, rng.standard_normal(e.shape))
    p = T.sigmoid(e)
    if lengths is not None:
        Bsz, Tlen = p.shape
        valid = np.arange(Tlen)[None, :] < np.asarray(lengths)[:, None]
        p = T.where(valid, p, Tensor(np.zeros((Bsz, Tlen))))
    return p


def chunk_energies(params, s_prev, h):
    """Unnormalized chunk energies u, shape (batch, frames)."""
    core = _energy_core(params.c_w_s, params.c_w_h, params.c_b, s_prev, h)
    return T.matmul(core, params.c_v)


def expected_alignment(p, alpha_prev):
    """Push alpha_prev forward through the stopping probabilities.

    q_j = (1 - p_{j-1}) q_{j-1} + alpha_prev_j, q_0 = alpha_prev_0,
    alpha_j = p_j q_j.  Equal to the direct sum
    alpha_j = p_j * sum_{k<=j} alpha_prev_k prod_{m=k}^{j-1} (1 - p_m).
    """
    p = T._lift(p)
    alpha_prev = T._lift(alpha_prev)
    B, Tlen = p.shape
    cols = [T.reshape(alpha_prev[:, 0], (B, 1))]
    for j in range(1, Tlen):
        survive = T.sub(Tensor(np.ones((B, 1))),
                        T.reshape(p[:, j - 1], (B, 1)))
        cols.append(T.add(T.mul(survive, cols[-1]),
                          T.reshape(alpha_prev[:, j], (B, 1))))
    q = T.concat(cols, axis=1) if Tlen > 1 else cols[0]
    return T.mul(p, q)


def chunk_weights(alpha, u, w):
    """Spread alignment mass over the w-frame window behind each attend
    point, weighted by a softmax of the chunk energies in that window.

    beta_j = sum_{k=j}^{j+w-1} alpha_k * exp(u_j) / sum_{m in window k}
    exp(u_m), windows clipped at the sequence start.  Built from w
    shifted copies of u so the softmax is one stable log-sum-exp; the
    total mass of beta equals the total mass of alpha.
    """
    if w < 1:
        raise ValueError("chunk width must be >= 1, got %d" % w)
    alpha = T._lift(alpha)
    u = T._lift(u)
    B, Tlen = u.shape
    ninf = np.full((B, 1), -np.inf)
    # copy o holds u shifted right by w-1-o: entry (b, k) is the energy
    # of frame k-(w-1-o), the o-th member of the window ending at k
    copies = []
    for o in range(w):
        d = w - 1 - o
        if d == 0:
            shifted = u
        elif d >= Tlen:
            shifted = Tensor(np.full((B, Tlen), -np.inf))
        else:
            pad = Tensor(np.full((B, d), -np.inf))
            shifted = T.concat([pad, u[:, :Tlen - d]], axis=1)
        copies.append(T.reshape(shifted, (B, 1, Tlen)))
    stack = T.concat(copies, axis=1) if w > 1 else copies[0]
    lse = T.logsumexp_t(stack, axis=1, keepdims=True)
    soft = T.exp(T.sub(stack, lse))
    gamma = T.mul(soft, T.reshape(alpha, (B, 1, Tlen)))
    beta = None
    for o in range(w):
        d = w - 1 - o
        member = gamma[:, o, :]
        if d == 0:
            part = member
        elif d >= Tlen:
            continue
        else:
            pad = Tensor(np.zeros((B, d)))
            part = T.concat([member[:, d:], pad], axis=1)
        beta = part if beta is None else T.add(beta, part)
    return beta


def mocha_context(beta, h):
    """Weighted sum of encoder frames: c = sum_j beta_j h_j."""
    beta = T._lift(beta)
    B, Tlen = beta.shape
    return T.tsum(T.mul(T.reshape(beta, (B, Tlen, 1)), h), axis=1)


def attend_train(params, s_prev, h, alpha_prev, rng, lengths=None):
    """One training-mode attention step: (alpha, context)."""
    p = monotonic_probs(params, s_prev, h, "train", rng, lengths)
    alpha = expected_alignment(p, alpha_prev)
    u = chunk_energies(params, s_prev, h)
    beta = chunk_weights(alpha, u, params.chunk_width)
    return alpha, mocha_context(beta, h)


def mocha_decode_step(params, s_prev, h, t_prev):
    """Hard streaming attention for one output step.

    Scans frames from t_prev forward, stops at the first frame whose
    stopping probability reaches 0.5, and returns (attend index, beta)
    with beta a full-length weight vector that is a softmax over the
    chunk window and zero elsewhere.  Returns (None, None) when no
    remaining frame qualifies.  Energies are evaluated frame by frame,
    so nothing past the attended frame is ever touched.
    """
    h = np.asarray(h)
    s_prev = np.asarray(s_prev)
    vnorm = float(np.linalg.norm(params.v.data))
    if vnorm == 0.0:
        raise ValueError("monotonic energy vector has zero norm")
    gv = (float(params.g.data) / vnorm) * params.v.data
    proj_s = params.w_s.data @ s_prev
    for j in range(t_prev, h.shape[0]):
        core = np.tanh(proj_s + params.w_h.data @ h[j] + params.b.data)
        p = _sigmoid(np.asarray(gv @ core + float(params.r.data)))
        if p >= 0.5:
            lo = max(0, j - params.chunk_width + 1)
            cs = params.c_w_s.data @ s_prev
            u = np.array([params.c_v.data
                          @ np.tanh(cs + params.c_w_h.data @ h[m]
                                    + params.c_b.data)
                          for m in range(lo, j + 1)])
            win = np.exp(u - u.max())
            beta = np.zeros(h.shape[0])
            beta[lo:j + 1] = win / win.sum()
            return j, beta
    return None, None
