"""Finite-difference verification suites behind the gradcheck command.

Each check builds a small graph, compares analytic gradients against
central differences at h = 1e-5, and reports the fraction of
coordinates within 1e-4 relative error plus the worst error.  A check
passes when at least 95% of coordinates meet 1e-4 and none exceeds
1e-3.  Composite graphs scale their matrix weights up (output paths
hardest, biases and attention scalars untouched) so every true
gradient clears the differencing noise floor; see the decoder test
suite for the derivation of that recipe.
"""
from __future__ import annotations

import numpy as np

from . import attention as att
from . import ctc
from . import layers as L
from . import pipeline as P
from . import tensor as T
from .data import Utterance
from .decoder import AttentionDecoder
from .layers import BatchNorm, ProjectionHead, SequenceBatch
from .model import Encoder, EncoderModel
from .tensor import Parameter, Tensor
from .tokenizer import BpeModel, CharVocab

PASS_FRACTION = 0.95
COORD_TOL = 1e-4
MAX_TOL = 1e-3


def _summary(errs):
    flat = np.concatenate([e.reshape(-1) for e in errs.values()])
    return float(np.mean(flat <= COORD_TOL)), float(flat.max())


def _boost(params, out_prefixes, matrix=6.0, out=12.0):
    for p in params:
        if p.name.endswith((".b", ".g", ".r")):
            continue
        p.data *= out if p.name.startswith(out_prefixes) else matrix


def check_ulstm():
    rng = np.random.default_rng(3)
    H, D = 3, 2
    params = {
        "x": Parameter("x", rng.normal(size=(2, 5, D))),
        "w_ih": Parameter("w_ih", rng.uniform(-0.3, 0.3, (4 * H, D))),
        "w_hh": Parameter("w_hh", rng.uniform(-0.3, 0.3, (4 * H, H))),
        "b": Parameter("b", rng.normal(size=4 * H) * 0.1),
    }
    lengths = np.array([5, 3])

    def f(p):
        h, _, _ = L.lstm_seq(p["x"], p["w_ih"], p["w_hh"], p["b"], lengths)
        return T.tsum(T.mul(h, h))

    return _summary(T.finite_diff_check(f, params))


def check_pooling():
    rng = np.random.default_rng(9)
    # distinct magnitudes keep every pooling argmax isolated from ties
    base = rng.permutation(2 * 7 * 3).astype(np.float64).reshape(2, 7, 3)
    params = {"x": Parameter("x", base * 0.1)}
    lengths = np.array([7, 5])

    def f(p):
        out = L.maxpool_time(SequenceBatch(p["x"], lengths), 2)
        return T.tsum(T.mul(out.data, out.data))

    return _summary(T.finite_diff_check(f, params))


def check_projection():
    rng = np.random.default_rng(8)
    head = ProjectionHead("h", 3, 4, rng)
    params = {"W": head.w, "b": head.b,
              "x": Parameter("x", rng.normal(size=(2, 3)))}
    ids = np.array([1, 3])

    def f(p):
        out = L.ff_softmax(head, p["x"])
        return T.neg(T.tsum(T.gather_last(out, ids)))

    return _summary(T.finite_diff_check(f, params))


def check_maxout():
    rng = np.random.default_rng(10)
    base = rng.permutation(12).astype(np.float64).reshape(3, 4)
    params = {"x": Parameter("x", base * 0.2)}

    def f(p):
        return T.tsum(T.tanh(L.maxout(p["x"], 2)))

    return _summary(T.finite_diff_check(f, params))


def check_batchnorm():
    rng = np.random.default_rng(12)
    bn = BatchNorm("bn", 3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.normal(size=3)
    params = {"gamma": bn.gamma, "beta": bn.beta,
              "x": Parameter("x", rng.normal(size=(2, 5, 3)))}
    lengths = np.array([5, 4])
    w = rng.normal(size=(2, 5, 3))

    def f(p):
        out = bn.forward(SequenceBatch(p["x"], lengths), "train")
        return T.tsum(T.mul(T.tanh(out.data), w))

    return _summary(T.finite_diff_check(f, params))


def check_ctc():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(5, 3))
    params = {"logits": Parameter("logits", logits)}
    y = [0, 1, 1]

    def f(p):
        lp = T.sub(p["logits"],
                   T.logsumexp_t(p["logits"], axis=1, keepdims=True))
        return ctc.ctc_loss(lp, y)

    return _summary(T.finite_diff_check(f, params))


def check_attention():
    rng = np.random.default_rng(14)
    e = Parameter("e", rng.normal(size=6))
    u = Parameter("u", rng.normal(size=(1, 6)))
    a = Parameter("a", rng.uniform(size=(1, 6)))
    wts = rng.normal(size=(1, 6))
    aprev = att.initial_alignment(1, 6)

    def align(p):
        probs = T.reshape(T.sigmoid(p["e"]), (1, 6))
        alpha = att.expected_alignment(probs, aprev)
        return T.tsum(T.mul(alpha, wts))

    def chunks(p):
        beta = att.chunk_weights(p["a"], p["u"], 2)
        return T.tsum(T.mul(beta, wts))

    errs = T.finite_diff_check(align, {"e": e})
    errs.update(T.finite_diff_check(chunks, {"u": u, "a": a}))
    return _summary(errs)


def check_decoder_ce():
    dec = AttentionDecoder("dec", 3, 2, 2, 2, 2, 2,
                           np.random.default_rng(5))
    _boost(dec.parameters(), ("dec.out", "dec.readout"))
    rng = np.random.default_rng(99)
    frames = rng.standard_normal((2, 6, 2))
    targets = [[0, 2, 1, 2, 0], [1, 0, 2, 1]]

    def f(_):
        enc = SequenceBatch(Tensor(frames.copy()), np.array([6, 5]))
        lp = dec.teacher_forced_log_probs(enc, targets, None, mode="eval")
        return dec.ce_loss(lp, targets)

    params = {p.name: p for p in dec.parameters()}
    return _summary(T.finite_diff_check(f, params))


def check_stage3():
    """End-to-end tiny graph: encoder, pooling, MoChA decoder CE, and
    the BPE CTC head in one blended loss."""
    rng = np.random.default_rng(21)
    letters = ["A", "B"]
    bpe = BpeModel(letters, [])
    enc = Encoder(3, 4)
    enc.add_lstm("enc.lstm1", rng)
    enc.add_pool("enc.pool1", 2)
    head = ProjectionHead("bpe_head", 4, len(bpe) + 1, rng)
    dec = AttentionDecoder("dec", len(bpe), 4, 3, 4, 3, 2, rng)
    system = P.AsrSystem(CharVocab(letters), EncoderModel(enc, top_head=head),
                         bpe, dec, stage=3, loss_mode="ce+ctc")
    for p in system.parameters():
        if p.name.endswith((".b", ".g", ".r")):
            continue
        if p.name.startswith("dec.att.chunk"):
            # the chunk path barely moves this loss at moderate scale;
            # its true gradients sit below the differencing noise floor
            # until the window energies are made decisive
            p.data *= 30.0
        elif p.name.startswith(("dec.out", "dec.readout", "bpe_head")):
            p.data *= 12.0
        else:
            p.data *= 6.0
    plan = P.StagePlan(stage=3, loss_mode="ce+ctc").validate()
    feat_rng = np.random.default_rng(121)
    utts = [Utterance("g1", feat_rng.normal(size=(8, 3)), "AB A"),
            Utterance("g2", feat_rng.normal(size=(6, 3)), "BA")]

    def f(_):
        loss, _parts = P.batch_loss(system, utts, plan, 0, None, "eval")
        return loss

    assert f(None) is not None
    params = {p.name: p for p in system.parameters()}
    return _summary(T.finite_diff_check(f, params))


CHECKS = (
    ("ulstm", check_ulstm),
    ("pooling", check_pooling),
    ("projection", check_projection),
    ("maxout", check_maxout),
    ("batchnorm", check_batchnorm),
    ("ctc", check_ctc),
    ("attention", check_attention),
    ("decoder-ce", check_decoder_ce),
    ("stage3", check_stage3),
)


def run_all(module=None, log=None):
    """Run the suites (or just ``module``); returns a list of
    (name, pass fraction, max rel err, ok)."""
    names = dict(CHECKS)
    if module is not None and module not in names:
        raise ValueError("unknown gradcheck module %r (have: %s)"
                         % (module, ", ".join(n for n, _ in CHECKS)))
    results = []
    for name, fn in CHECKS:
        if module is not None and name != module:
            continue
        frac, worst = fn()
        ok = frac >= PASS_FRACTION and worst <= MAX_TOL
        results.append((name, frac, worst, ok))
        if log is not None:
            log("%-11s coords %5.1f%%  max %.2e  %s"
                % (name, 100.0 * frac, worst, "ok" if ok else "FAIL"))
    return results
