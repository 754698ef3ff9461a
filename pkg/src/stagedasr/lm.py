"""Recurrent language model over token ids, for shallow fusion and
perplexity reporting.

The vocabulary is the n_tokens real ids plus eos = n_tokens.  eos also
serves as the sequence-start input, so scoring a sequence feeds
[eos] + tokens and predicts tokens + [eos]; there is no separate bos
row.  A zero-weight model scores every symbol uniformly.
"""
from __future__ import annotations

import numpy as np

from . import layers as L
from . import tensor as T
from .checkpoint import CheckpointError, load_archive, save_archive
from .data import shuffle_batches
from .layers import INIT_SCALE, ProjectionHead, SequenceBatch, UlstmLayer
from .optim import Adam
from .tensor import Parameter, Tensor


class RnnLm:
    def __init__(self, prefix, n_tokens, embed_dim, hidden, n_layers=1,
                 rng=None):
        if not 1 <= n_layers <= 2:
            raise ValueError("n_layers must be 1 or 2, got %d" % n_layers)
        self.prefix = prefix
        self.n_tokens = n_tokens
        self.embed_dim = embed_dim
        self.hidden = hidden
        if rng is None:
            table = np.zeros((n_tokens + 1, embed_dim))
        else:
            table = rng.uniform(-INIT_SCALE, INIT_SCALE,
                                (n_tokens + 1, embed_dim))
        self.embed = Parameter(prefix + ".embed", table)
        self.lstms = []
        for i in range(n_layers):
            in_dim = embed_dim if i == 0 else hidden
            self.lstms.append(UlstmLayer("%s.lstm%d" % (prefix, i),
                                         in_dim, hidden, rng))
        self.out = ProjectionHead(prefix + ".out", hidden, n_tokens + 1, rng)

    @property
    def eos(self):
        return self.n_tokens

    @property
    def bos(self):
        # eos doubles as the start-of-sequence input
        return self.n_tokens

    def parameters(self):
        ps = [self.embed]
        for l in self.lstms:
            ps.extend(l.params())
        return ps + self.out.params()

    def describe(self):
        return {"prefix": self.prefix, "n_tokens": self.n_tokens,
                "embed_dim": self.embed_dim, "hidden": self.hidden,
                "n_layers": len(self.lstms)}

    @classmethod
    def from_description(cls, desc):
        return cls(desc["prefix"], desc["n_tokens"], desc["embed_dim"],
                   desc["hidden"], desc["n_layers"])

    def _check_ids(self, seq, allow_eos):
        top = self.n_tokens + 1 if allow_eos else self.n_tokens
        for s in seq:
            if not 0 <= s < top:
                raise ValueError("token id %d outside vocabulary of %d"
                                 % (s, top))

    # ----- step-by-step scoring (decoding path) ----------------------

    def initial_state(self):
        return tuple(np.zeros(2 * self.hidden) for _ in self.lstms)

    def step(self, state, token):
        """Score the next symbol after ``token``.

        Returns (log probs over n_tokens+1 symbols, new state).  The
        very first call should pass the eos id as ``token``.
        """
        self._check_ids([token], allow_eos=True)
        with T.no_grad():
            x = Tensor(self.embed.data[token][None, :])
            new = []
            for l, st in zip(self.lstms, state):
                packed = l.step(x, Tensor(st[None, :]))
                new.append(packed.data[0])
                x = Tensor(packed.data[:, :self.hidden])
            lp = L.ff_softmax(self.out, x)
        return lp.data[0], tuple(new)

    # ----- batched scoring (training path) ---------------------------

    def batch_nll(self, seqs):
        """Total negative log likelihood of the sequences, eos terms
        included.  Returns (nll Tensor scalar, token count)."""
        if len(seqs) == 0:
            raise ValueError("empty corpus")
        for seq in seqs:
            self._check_ids(seq, allow_eos=False)
        B = len(seqs)
        steps = max(len(s) for s in seqs) + 1
        x_ids = np.full((B, steps), self.eos, dtype=np.int64)
        tgt = np.zeros((B, steps), dtype=np.int64)
        mask = np.zeros((B, steps), dtype=bool)
        lengths = np.zeros(B, dtype=np.int64)
        for i, seq in enumerate(seqs):
            x_ids[i, 1:len(seq) + 1] = seq
            tgt[i, :len(seq)] = seq
            tgt[i, len(seq)] = self.eos
            mask[i, :len(seq) + 1] = True
            lengths[i] = len(seq) + 1
        batch = SequenceBatch(T.embedding(self.embed, x_ids), lengths)
        for l in self.lstms:
            batch, _ = l.forward(batch)
        lp = L.ff_softmax(self.out, batch.data)
        picked = T.gather_last(lp, tgt)
        kept = T.where(mask, picked, Tensor(np.zeros((B, steps))))
        return T.tsum(T.neg(kept)), int(lengths.sum())


def save_lm(path, lm):
    save_archive(path, {"lm": lm.describe()},
                 [(p.name, p.data) for p in lm.parameters()])


def load_lm(path):
    meta, arrays = load_archive(path)
    lm = RnnLm.from_description(meta["lm"])
    for p in lm.parameters():
        if p.name not in arrays:
            raise CheckpointError("%s: missing tensor %s" % (path, p.name))
        a = arrays.pop(p.name)
        if a.shape != p.data.shape:
            raise CheckpointError("%s: tensor %s has shape %s, model "
                                  "expects %s" % (path, p.name, a.shape,
                                                  p.data.shape))
        p.data = a.copy()
    if arrays:
        raise CheckpointError("%s: unclaimed tensors %s"
                              % (path, sorted(arrays)))
    return lm


def perplexity(lm, seqs):
    """exp(mean per-token negative log likelihood), eos counted."""
    nll, count = lm.batch_nll(seqs)
    return float(np.exp(nll.data / count))


def lm_train(seqs, n_tokens, embed_dim=16, hidden=32, n_layers=1,
             batch_size=16, epochs=5, lr=2e-3, warmup=100, seed=0,
             log=None):
    """Fit an RnnLm on token sequences with the shared Adam setup.

    Sequences batch by length (ascending) and the batch order reshuffles
    every epoch.  Returns (model, per-step training losses).
    """
    if len(seqs) == 0:
        raise ValueError("empty corpus")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1, got %d" % batch_size)
    rng = np.random.default_rng(seed)
    model = RnnLm("lm", n_tokens, embed_dim, hidden, n_layers, rng)
    opt = Adam(model.parameters(), lr, warmup)
    by_len = sorted(seqs, key=lambda s: (len(s), tuple(s)))
    batches = [by_len[i:i + batch_size]
               for i in range(0, len(by_len), batch_size)]
    losses = []
    step = 0
    for epoch in range(epochs):
        for batch in shuffle_batches(batches, seed, epoch):
            T.zero_grads(model.parameters())
            nll, _ = model.batch_nll(batch)
            loss = T.mul(nll, 1.0 / len(batch))
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.data))
            if log is not None:
                log("step %d loss %.6f lr %.6g"
                    % (step, losses[-1], opt.effective_lr()))
    return model, losses
