"""CTC loss with exact gradients, greedy decoding, and a brute-force oracle.

The loss is the standard forward recursion over the blank-interleaved
expanded target, computed in the log domain directly on the autodiff
graph, so gradients come from ordinary backpropagation rather than a
hand-written forward-backward pass.  Blank is always the last
vocabulary index.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """Target cannot be aligned: T' below the minimum alignment length."""


def collapse(path, blank):
    """Remove consecutive duplicates, then blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev:
            prev = s
            if s != blank:
                out.append(s)
    return out


def min_alignment_length(target):
    """|target| plus one extra frame per adjacent equal pair."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss_batch(log_probs, targets, lengths):
    """Mean-over-batch CTC loss for padded (B, T', V+1) log-prob rows.

    Args:
        log_probs: Tensor of normalized log distributions; rows beyond a
            sequence's length are ignored.
        targets: list of label-id lists (blank-free, nonempty, ids < V).
        lengths: per-sequence valid frame counts.

    Raises InfeasibleAlignmentError if any sequence is shorter than its
    target's minimum alignment length.
    """
    B, Tlen, Vp1 = log_probs.shape
    blank = Vp1 - 1
    lengths = np.asarray(lengths)
    for i, y in enumerate(targets):
        if len(y) == 0:
            raise ValueError("ctc loss: empty target for sequence %d" % i)
        if any(not 0 <= s < blank for s in y):
            raise ValueError("ctc loss: target ids must be in [0, V)")
        need = min_alignment_length(y)
        if lengths[i] < need:
            raise InfeasibleAlignmentError(
                "sequence %d: %d frames < minimum alignment length %d"
                % (i, lengths[i], need))

    s_lens = np.array([2 * len(y) + 1 for y in targets])
    S = int(s_lens.max())
    z = np.full((B, S), blank, dtype=np.int64)
    for i, y in enumerate(targets):
        z[i, 1:2 * len(y):2] = y
    valid_s = np.arange(S)[None, :] < s_lens[:, None]
    # transitions from s-2 are allowed when z_s is a label differing from z_{s-2}
    allow2 = np.zeros((B, S), dtype=bool)
    allow2[:, 2:] = (z[:, 2:] != blank) & (z[:, 2:] != z[:, :-2]) & valid_s[:, 2:]

    ninf_col = Tensor(np.full((B, 1), NEG_INF))
    ninf_full = np.full((B, S), NEG_INF)

    lp0 = log_probs[:, 0, :]
    row0 = T.gather_last(lp0, z)
    init_mask = np.zeros((B, S), dtype=bool)
    init_mask[:, 0] = True
    init_mask[:, 1] = s_lens > 1
    alpha = T.where(init_mask, row0, Tensor(ninf_full))

    for t in range(1, Tlen):
        if not np.any(lengths > t):
            break
        shift1 = T.concat([ninf_col, alpha[:, :-1]], axis=1)
        shift2 = T.concat([ninf_col, ninf_col, alpha[:, :-2]], axis=1)
        acc = T.logaddexp(alpha, shift1)
        acc = T.logaddexp(acc, T.where(allow2, shift2, Tensor(ninf_full)))
        row = T.gather_last(log_probs[:, t, :], z)
        new_alpha = T.add(acc, row)
        live = (lengths > t)[:, None]
        alpha = T.where(live & valid_s, new_alpha, alpha)

    final = T.logaddexp(T.gather_last(alpha, s_lens - 1),
                        T.gather_last(alpha, s_lens - 2))
    return T.mul(T.tsum(T.neg(final)), 1.0 / B)


def ctc_loss(log_probs, target):
    """Scalar CTC loss for a single (T', V+1) sequence."""
    Tlen = log_probs.shape[0]
    lp = T.reshape(log_probs, (1,) + tuple(log_probs.shape))
    return ctc_loss_batch(lp, [list(target)], np.array([Tlen]))


def ctc_brute_force(log_probs, target):
    """-log of the summed probability of every path collapsing to target.

    Pure enumeration over (V+1)^{T'} paths; the test oracle for
    ctc_loss.  Returns +inf when the target is unreachable.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    Tlen, Vp1 = lp.shape
    if Vp1 ** Tlen > 10 ** 7:
        raise ValueError("ctc_brute_force: instance too large")
    blank = Vp1 - 1
    target = list(target)
    scores = []
    for path in itertools.product(range(Vp1), repeat=Tlen):
        if collapse(path, blank) == target:
            scores.append(sum(lp[t, s] for t, s in enumerate(path)))
    if not scores:
        return math.inf
    return -T.logsumexp(scores)


def ctc_greedy_decode(log_probs, length=None):
    """Per-frame argmax over valid frames, then collapse."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if length is not None:
        lp = lp[:length]
    blank = lp.shape[1] - 1
    path = np.argmax(lp, axis=1)
    return collapse(path.tolist(), blank)
