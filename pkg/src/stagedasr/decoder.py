"""Attention decoder: one ULSTM conditioned on label embeddings and
attention contexts, a maxout readout, and beam search with optional
shallow LM fusion.

Symbol ids: the n_tokens real labels come first, eos = n_tokens, and a
begin-of-sentence id (n_tokens + 1) exists only in the embedding table
as the first-step input.  The output head scores the real labels plus
eos.

One step, given the previous label y and the previous context c:
the attention reads the pre-update decoder state, the ULSTM consumes
concat(embed(y), c), and the readout is maxout over a 2H-wide linear
map of concat(new state, new context, embed(y)), projected to
log probabilities.  Previous-context input feeding stands in for the
underspecified attention-feedback mechanism and is isolated here so it
could be swapped out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import layers as L
from . import tensor as T
from .layers import INIT_SCALE, ProjectionHead, UlstmLayer
from .tensor import Parameter, Tensor


@dataclass
class InferState:
    """Everything a hypothesis needs to continue decoding."""
    state: np.ndarray       # packed (2H,) decoder [h, c]
    c_prev: np.ndarray      # previous attention context
    t_att: int              # hard attention position
    exhausted: bool         # attention scanned past the last frame


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    state: InferState
    lm_state: object
    finished: bool

    def sort_key(self):
        # higher score first; ties to the shorter, lexicographically
        # smaller token sequence, which makes every selection total
        return (-self.score, len(self.tokens), self.tokens)

    def emitted(self):
        """Token ids without the terminating eos."""
        return self.tokens[:-1] if self.finished else self.tokens


class AttentionDecoder:
    def __init__(self, prefix, n_tokens, enc_dim, embed_dim, hidden,
                 energy_dim, chunk_width=2, rng=None):
        self.prefix = prefix
        self.n_tokens = n_tokens
        self.enc_dim = enc_dim
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.energy_dim = energy_dim
        if rng is None:
            table = np.zeros((n_tokens + 2, embed_dim))
        else:
            table = rng.uniform(-INIT_SCALE, INIT_SCALE,
                                (n_tokens + 2, embed_dim))
        self.embed = Parameter(prefix + ".embed", table)
        self.lstm = UlstmLayer(prefix + ".lstm", embed_dim + enc_dim,
                               hidden, rng)
        self.att = att.MonotonicAttentionParams(
            prefix + ".att", hidden, enc_dim, energy_dim, rng, chunk_width)
        read_in = hidden + enc_dim + embed_dim
        if rng is None:
            w = np.zeros((2 * hidden, read_in))
        else:
            w = rng.uniform(-INIT_SCALE, INIT_SCALE, (2 * hidden, read_in))
        self.readout_w = Parameter(prefix + ".readout.W", w)
        self.readout_b = Parameter(prefix + ".readout.b",
                                   np.zeros(2 * hidden))
        self.out = ProjectionHead(prefix + ".out", hidden, n_tokens + 1, rng)

    @property
    def eos(self):
        return self.n_tokens

    @property
    def bos(self):
        return self.n_tokens + 1

    def parameters(self):
        return ([self.embed] + self.lstm.params() + self.att.parameters()
                + [self.readout_w, self.readout_b] + self.out.params())

    def describe(self):
        return {"prefix": self.prefix, "n_tokens": self.n_tokens,
                "enc_dim": self.enc_dim, "embed_dim": self.embed_dim,
                "hidden": self.hidden, "energy_dim": self.energy_dim,
                "chunk_width": self.att.chunk_width}

    @classmethod
    def from_description(cls, desc):
        return cls(desc["prefix"], desc["n_tokens"], desc["enc_dim"],
                   desc["embed_dim"], desc["hidden"], desc["energy_dim"],
                   desc["chunk_width"])

    def _log_probs(self, s_h, c, emb):
        cat = T.concat([s_h, c, emb], axis=1)
        r = T.add(T.matmul(cat, T.transpose2d(self.readout_w)),
                  self.readout_b)
        return L.ff_softmax(self.out, L.maxout(r, 2))

    def _attend(self, state_h, enc, alpha_prev, rng, mode):
        if mode == "train":
            return att.attend_train(self.att, state_h, enc.data,
                                    alpha_prev, rng, enc.lengths)
        p = att.monotonic_probs(self.att, state_h, enc.data, "infer",
                                None, enc.lengths)
        alpha = att.expected_alignment(p, alpha_prev)
        u = att.chunk_energies(self.att, state_h, enc.data)
        beta = att.chunk_weights(alpha, u, self.att.chunk_width)
        return alpha, att.mocha_context(beta, enc.data)

    def teacher_forced_log_probs(self, enc, targets, rng=None, mode="train"):
        """Run every decoder step with ground-truth inputs.

        enc is the encoder SequenceBatch; targets are blank-free label
        id lists.  Returns (B, steps, n_tokens+1) log probabilities
        where step l scores target l and the final valid step scores
        eos.  Rows past a sequence's own length are filler and must be
        masked by the loss.  mode "train" adds the sigmoid energy noise
        and needs rng; "eval" is the deterministic soft forward used
        for dev losses.
        """
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval', got %r" % mode)
        if mode == "train" and rng is None:
            raise ValueError("train mode needs an rng for the energy noise")
        for i, y in enumerate(targets):
            if any(not 0 <= s < self.n_tokens for s in y):
                raise ValueError("target %d has ids outside [0, %d)"
                                 % (i, self.n_tokens))
        B, Tlen, Henc = enc.data.shape
        if Henc != self.enc_dim:
            raise ValueError("encoder dim %d, decoder expects %d"
                             % (Henc, self.enc_dim))
        steps = max(len(y) for y in targets) + 1
        y_in = np.full((B, steps), self.bos, dtype=np.int64)
        for i, y in enumerate(targets):
            y_in[i, 1:len(y) + 1] = y
        H = self.hidden
        state = Tensor(np.zeros((B, 2 * H)))
        c_prev = Tensor(np.zeros((B, Henc)))
        alpha_prev = att.initial_alignment(B, Tlen)
        rows = []
        for l in range(steps):
            emb = T.embedding(self.embed, y_in[:, l])
            alpha, c = self._attend(state[:, :H], enc, alpha_prev, rng, mode)
            state = self.lstm.step(T.concat([emb, c_prev], axis=1), state)
            lp = self._log_probs(state[:, :H], c, emb)
            rows.append(T.reshape(lp, (B, 1, self.n_tokens + 1)))
            c_prev = c
            alpha_prev = alpha
        return T.concat(rows, axis=1) if steps > 1 else rows[0]

    def ce_loss(self, log_probs, targets):
        """Teacher-forced cross entropy, eos term included, mean over
        the batch."""
        B, steps, _ = log_probs.shape
        if len(targets) != B:
            raise ValueError("got %d targets for %d rows"
                             % (len(targets), B))
        tgt = np.zeros((B, steps), dtype=np.int64)
        mask = np.zeros((B, steps), dtype=bool)
        for i, y in enumerate(targets):
            if len(y) == 0:
                raise ValueError("ce loss: empty target for sequence %d" % i)
            if len(y) + 1 > steps:
                raise ValueError("target %d needs %d steps, rows have %d"
                                 % (i, len(y) + 1, steps))
            tgt[i, :len(y)] = y
            tgt[i, len(y)] = self.eos
            mask[i, :len(y) + 1] = True
        picked = T.gather_last(log_probs, tgt)
        kept = T.where(mask, picked, Tensor(np.zeros((B, steps))))
        return T.mul(T.tsum(T.neg(kept)), 1.0 / B)

    # ----- inference ------------------------------------------------

    def initial_state(self):
        return InferState(np.zeros(2 * self.hidden), np.zeros(self.enc_dim),
                          0, False)

    def step_infer(self, enc_frames, y_prev, st):
        """One hard-attention decode step.

        Returns (log probs over n_tokens+1 symbols, new InferState).
        Pure: same inputs give the same outputs.
        """
        enc_frames = np.asarray(enc_frames)
        H = self.hidden
        with T.no_grad():
            if st.exhausted:
                j, c = None, np.zeros(self.enc_dim)
                t_new, exhausted = st.t_att, True
            else:
                j, beta = att.mocha_decode_step(self.att, st.state[:H],
                                                enc_frames, st.t_att)
                if j is None:
                    c = np.zeros(self.enc_dim)
                    t_new, exhausted = st.t_att, True
                else:
                    c = beta @ enc_frames
                    t_new, exhausted = j, False
            emb = self.embed.data[y_prev]
            x = np.concatenate([emb, st.c_prev])
            new_state = self.lstm.step(Tensor(x[None, :]),
                                       Tensor(st.state[None, :]))
            lp = self._log_probs(Tensor(new_state.data[:, :H]),
                                 Tensor(c[None, :]), Tensor(emb[None, :]))
        return lp.data[0], InferState(new_state.data[0], c, t_new, exhausted)


def fuse(log_p_aed, log_p_lm, lam):
    """Shallow fusion: per-symbol log_p_aed + lam * log_p_lm."""
    if lam < 0:
        raise ValueError("fusion weight must be >= 0, got %g" % lam)
    if lam == 0.0:
        return log_p_aed
    return log_p_aed + lam * np.asarray(log_p_lm)


def _advance(dec, enc_frames, hyp, lm, lam):
    """Expand one hypothesis: fused next-symbol scores + carried state."""
    y_prev = hyp.tokens[-1] if hyp.tokens else dec.bos
    lp, new_state = dec.step_infer(enc_frames, y_prev, hyp.state)
    new_lm = hyp.lm_state
    if lm is not None:
        lm_prev = hyp.tokens[-1] if hyp.tokens else lm.bos
        lm_lp, new_lm = lm.step(hyp.lm_state, lm_prev)
        lp = fuse(lp, lm_lp, lam)
    return lp, new_state, new_lm


def beam_search(dec, enc_frames, beam, max_len, lm=None, lam=0.3):
    """Length-synchronous beam search.

    Every live hypothesis expands by every symbol; the top `beam`
    expansions survive, and survivors that just emitted eos retire to
    the finished pool.  Scores only accumulate log probabilities, so
    once the best finished hypothesis outscores the best live one no
    extension can win and the search stops.  Returns the best finished
    hypothesis, or the best unfinished one when nothing finished.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1, got %d" % beam)
    if max_len < 1:
        raise ValueError("max_len must be >= 1, got %d" % max_len)
    lm_state = lm.initial_state() if lm is not None else None
    live = [Hypothesis((), 0.0, dec.initial_state(), lm_state, False)]
    finished = []
    for _ in range(max_len):
        cands = []
        for hyp in live:
            lp, new_state, new_lm = _advance(dec, enc_frames, hyp, lm, lam)
            for s in range(dec.n_tokens + 1):
                cands.append(Hypothesis(hyp.tokens + (s,),
                                        hyp.score + float(lp[s]),
                                        new_state, new_lm, s == dec.eos))
        cands.sort(key=Hypothesis.sort_key)
        kept = cands[:beam]
        finished.extend(h for h in kept if h.finished)
        live = [h for h in kept if not h.finished]
        if not live:
            break
        if finished:
            best_done = min(finished, key=Hypothesis.sort_key)
            if best_done.sort_key() <= live[0].sort_key():
                break
    pool = finished if finished else live
    return min(pool, key=Hypothesis.sort_key)


def greedy_decode(dec, enc_frames, max_len, lm=None, lam=0.3):
    """Follow the argmax symbol until eos or max_len steps."""
    lm_state = lm.initial_state() if lm is not None else None
    hyp = Hypothesis((), 0.0, dec.initial_state(), lm_state, False)
    for _ in range(max_len):
        lp, new_state, new_lm = _advance(dec, enc_frames, hyp, lm, lam)
        s = int(np.argmax(lp))
        hyp = Hypothesis(hyp.tokens + (s,), hyp.score + float(lp[s]),
                         new_state, new_lm, s == dec.eos)
        if hyp.finished:
            break
    return hyp


def rescore(dec, enc_frames, tokens, lm=None, lam=0.3):
    """Teacher-forced score of a complete hypothesis (eos appended),
    using the same hard-attention steps the beam takes."""
    lm_state = lm.initial_state() if lm is not None else None
    hyp = Hypothesis((), 0.0, dec.initial_state(), lm_state, False)
    for s in tuple(tokens) + (dec.eos,):
        lp, new_state, new_lm = _advance(dec, enc_frames, hyp, lm, lam)
        hyp = Hypothesis(hyp.tokens + (s,), hyp.score + float(lp[s]),
                         new_state, new_lm, s == dec.eos)
    return hyp.score
