"""Multi-stage training orchestration.

Stage 1 grows a character CTC encoder: it starts with three ULSTM
layers (each normalized by a batch norm), a fixed pool (factor 2)
after the first, and a floating pool that sits just below the top
layer; every third of an epoch a fresh layer is inserted below the
floating pool, and the pool disappears when the stack reaches its
target depth.  Stage 2 converts the encoder to
BPE output by one of three methods (replace, joint, freeze).  Stage 3
attaches the streaming attention decoder.  One trainer drives all of
it: shared Adam, schedule events on optimizer-step triggers, dev-loss
learning rate decay, and batch skipping when pooling makes a CTC
target unreachable.

Character CTC heads have one output per vocabulary symbol; the blank
takes the top id, which the character vocabulary reserves for eos and
never emits in a transcript, so no extra row is needed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_archive, save_archive
from .ctc import ctc_greedy_decode, ctc_loss_batch, min_alignment_length
from .data import make_batches, shuffle_batches
from .decoder import AttentionDecoder, beam_search
from .layers import ProjectionHead
from .model import Encoder, EncoderModel, features_to_batch
from .optim import Adam, freeze, unfreeze
from .tokenizer import BpeModel, CharVocab

TRAIN_RNG_SALT = 6700417

STAGE_ACTIONS = {
    1: ("add_layer",),
    2: ("remove_pool", "set_pool_factor", "unfreeze"),
    3: ("remove_pool", "set_pool_factor"),
}


@dataclass
class ScheduleEvent:
    """One architecture or freezing change, fired after the optimizer
    completes step ``step``."""
    step: int
    action: str
    name: str
    factor: int = 0
    index: int = None


@dataclass
class StagePlan:
    stage: int
    method: str = None          # stage 2: replace | joint | freeze
    loss_mode: str = "ce"       # stage 3: ce | ce+ctc | pt-ctc+ce
    events: tuple = ()
    char_weight: float = 0.5    # stage 2 joint
    bpe_weight: float = 0.5
    ce_weight: float = 0.5      # stage 3 blended modes
    ctc_weight: float = 0.5
    ctc_until: int = 0          # pt-ctc+ce: CTC active for steps 1..ctc_until
    finish_pool: str = None     # stage 1: pool removed at target depth
    target_layers: int = 0
    freeze_prefixes: tuple = ()

    def validate(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2, or 3, got %r" % self.stage)
        if self.stage == 2 and self.method not in ("replace", "joint",
                                                   "freeze"):
            raise ValueError("stage 2 method must be replace, joint, or "
                             "freeze, got %r" % self.method)
        if self.stage == 3 and self.loss_mode not in ("ce", "ce+ctc",
                                                      "pt-ctc+ce"):
            raise ValueError("stage 3 loss mode must be ce, ce+ctc, or "
                             "pt-ctc+ce, got %r" % self.loss_mode)
        last = 0
        for ev in self.events:
            if ev.step <= last:
                raise ValueError("schedule steps must be strictly "
                                 "increasing (%d after %d)"
                                 % (ev.step, last))
            last = ev.step
            if ev.action not in STAGE_ACTIONS[self.stage]:
                raise ValueError("action %s is not valid in stage %d"
                                 % (ev.action, self.stage))
        return self


def stage1_plan(steps_per_epoch, target_layers=6, start_layers=3):
    """Growth schedule: one new layer per ceil(spe/3) steps, floating
    pool removed when the stack is complete."""
    if target_layers < start_layers:
        raise ValueError("target depth %d below starting depth %d"
                         % (target_layers, start_layers))
    stride = math.ceil(steps_per_epoch / 3)
    # each layer is an lstm+bn pair; the floating pool starts at op
    # index 2*start_layers - 1 and new pairs push it up two at a time
    events = tuple(
        ScheduleEvent(stride * k, "add_layer",
                      "enc.lstm%d" % (start_layers + k),
                      index=2 * start_layers - 1 + 2 * (k - 1))
        for k in range(1, target_layers - start_layers + 1))
    return StagePlan(stage=1, events=events,
                     finish_pool=("enc.pool_float"
                                  if target_layers > start_layers else None),
                     target_layers=target_layers).validate()


def stage2_plan(method, steps_per_epoch):
    half = math.ceil(steps_per_epoch / 2)
    if method == "replace":
        events = (ScheduleEvent(half, "remove_pool", "enc.pool_tmp1"),
                  ScheduleEvent(steps_per_epoch, "remove_pool",
                                "enc.pool_tmp2"))
        return StagePlan(stage=2, method=method, events=events).validate()
    if method == "joint":
        return StagePlan(stage=2, method=method).validate()
    if method == "freeze":
        # the unfreeze lands exactly at one epoch; the second pool drop,
        # also due then, shifts one step later to keep triggers distinct
        events = (ScheduleEvent(half, "set_pool_factor", "bpe.pool1",
                                factor=2),
                  ScheduleEvent(steps_per_epoch, "unfreeze", "enc."),
                  ScheduleEvent(steps_per_epoch + 1, "set_pool_factor",
                                "bpe.pool2", factor=2))
        return StagePlan(stage=2, method=method, events=events,
                         freeze_prefixes=("enc.",)).validate()
    raise ValueError("unknown stage 2 method %r" % method)


def stage3_plan(loss_mode, steps_per_epoch, pretrain_pools=False):
    """C2B runs keep the encoder as delivered; random-init baselines
    pre-train pooling 32 -> 8 like the earlier stages."""
    events = ()
    if pretrain_pools:
        half = math.ceil(steps_per_epoch / 2)
        events = (ScheduleEvent(half, "remove_pool", "enc.pool_tmp1"),
                  ScheduleEvent(steps_per_epoch, "remove_pool",
                                "enc.pool_tmp2"))
    ctc_until = steps_per_epoch if loss_mode == "pt-ctc+ce" else 0
    return StagePlan(stage=3, loss_mode=loss_mode, events=events,
                     ctc_until=ctc_until).validate()


class AsrSystem:
    """Tokenizers, encoder model, and the optional attention decoder —
    the unit that checkpoints serialize."""

    def __init__(self, char_vocab, enc_model, bpe_model=None, decoder=None,
                 stage=1, method=None, loss_mode=None):
        self.char_vocab = char_vocab
        self.enc_model = enc_model
        self.bpe_model = bpe_model
        self.decoder = decoder
        self.stage = stage
        self.method = method
        self.loss_mode = loss_mode

    def parameters(self):
        ps = list(self.enc_model.parameters())
        if self.decoder is not None:
            ps.extend(self.decoder.parameters())
        return ps

    def describe(self):
        return {
            "stage": self.stage,
            "method": self.method,
            "loss_mode": self.loss_mode,
            "enc_model": self.enc_model.describe(),
            "decoder": (None if self.decoder is None
                        else self.decoder.describe()),
            "letters": list(self.char_vocab.letters),
            "merges": (None if self.bpe_model is None
                       else [list(m) for m in self.bpe_model.merges]),
        }

    @classmethod
    def from_description(cls, desc):
        vocab = CharVocab(desc["letters"])
        bpe = (None if desc["merges"] is None
               else BpeModel(desc["letters"], desc["merges"]))
        dec = (None if desc["decoder"] is None
               else AttentionDecoder.from_description(desc["decoder"]))
        return cls(vocab, EncoderModel.from_description(desc["enc_model"]),
                   bpe, dec, desc["stage"], desc["method"],
                   desc["loss_mode"])


def build_stage1(letters, input_dim, hidden, target_layers, rng,
                 start_layers=3):
    """Fresh character encoder ready for stage-1 growth."""
    vocab = CharVocab(letters)
    enc = Encoder(input_dim, hidden)
    enc.add_lstm("enc.lstm1", rng)
    enc.add_bn("enc.bn1")
    enc.add_pool("enc.pool1", 2)
    for i in range(2, start_layers + 1):
        enc.add_lstm("enc.lstm%d" % i, rng)
        enc.add_bn("enc.bn%d" % i)
    if target_layers > start_layers:
        # floating pool just below the top layer, gone after growth
        enc.add_pool("enc.pool_float", 2, index=len(enc.ops) - 2)
    head = ProjectionHead("char_head", hidden, len(vocab), rng)
    return AsrSystem(vocab, EncoderModel(enc, base_head=head))


def _insert_after_nth_lstm(enc, pool_name, n):
    seen = 0
    for i, op in enumerate(enc.ops):
        if op["kind"] == "lstm":
            seen += 1
            if seen == n:
                j = i + 1
                if j < len(enc.ops) and enc.ops[j]["kind"] == "bn":
                    j += 1      # the pool goes after the layer's norm
                enc.add_pool(pool_name, 2, index=j)
                return
    raise ValueError("encoder has fewer than %d layers" % n)


def to_stage2(system, method, bpe_model, rng):
    """Convert a stage-1 system in place to one of the three
    character-to-BPE methods."""
    if system.stage != 1:
        raise ValueError("stage 2 needs a stage-1 system, got stage %d"
                         % system.stage)
    if method not in ("replace", "joint", "freeze"):
        raise ValueError("unknown stage 2 method %r" % method)
    enc = system.enc_model.encoder
    bpe_head = ProjectionHead("bpe_head", enc.hidden, len(bpe_model) + 1,
                              rng)
    if method == "replace":
        _insert_after_nth_lstm(enc, "enc.pool3", 3)
        _insert_after_nth_lstm(enc, "enc.pool2", 2)
        enc.add_pool("enc.pool_tmp1", 2, index=len(enc.ops) - 2)
        enc.add_pool("enc.pool_tmp2", 2, index=len(enc.ops) - 2)
        system.enc_model.base_head = None
        system.enc_model.top_head = bpe_head
    else:
        start = 4 if method == "freeze" else 2
        ext = Encoder(enc.hidden, enc.hidden)
        ext.add_pool("bpe.pool1", start)
        ext.add_lstm("bpe.lstm1", rng)
        ext.add_bn("bpe.bn1")
        ext.add_pool("bpe.pool2", start)
        ext.add_lstm("bpe.lstm2", rng)
        ext.add_bn("bpe.bn2")
        system.enc_model.extension = ext
        system.enc_model.top_head = bpe_head
        if method == "freeze":
            system.enc_model.base_head = None
            freeze(system.parameters(), ("enc.",))
    system.bpe_model = bpe_model
    system.stage = 2
    system.method = method
    return system


def to_stage3(system, rng, loss_mode="ce", embed_dim=32, dec_hidden=None,
              energy_dim=None, chunk_width=2):
    """Attach the attention decoder to a trained BPE encoder.  CTC heads
    and losses are dropped; decoding is attention-only."""
    if system.stage != 2:
        raise ValueError("stage 3 needs a stage-2 system, got stage %d"
                         % system.stage)
    if system.bpe_model is None:
        raise ValueError("stage 3 needs a BPE encoder")
    hidden = system.enc_model.encoder.hidden
    system.decoder = AttentionDecoder(
        "dec", len(system.bpe_model), hidden, embed_dim,
        dec_hidden or hidden, energy_dim or hidden, chunk_width, rng)
    system.enc_model.base_head = None
    system.enc_model.top_head = None
    system.stage = 3
    system.loss_mode = loss_mode
    unfreeze_all(system)
    return system


def build_stage3_baseline(letters, bpe_model, input_dim, hidden, rng,
                          loss_mode="ce", layers=8, embed_dim=32,
                          dec_hidden=None, energy_dim=None, chunk_width=2):
    """Random-init stage-3 encoder: pools after the first three layers
    (factor 8), pre-trained from 32 via two temporary pools."""
    vocab = CharVocab(letters)
    enc = Encoder(input_dim, hidden)
    for i in range(1, layers + 1):
        enc.add_lstm("enc.lstm%d" % i, rng)
        enc.add_bn("enc.bn%d" % i)
        if i <= 3:
            enc.add_pool("enc.pool%d" % i, 2)
    enc.add_pool("enc.pool_tmp1", 2, index=len(enc.ops) - 2)
    enc.add_pool("enc.pool_tmp2", 2, index=len(enc.ops) - 2)
    head = None
    if loss_mode in ("ce+ctc", "pt-ctc+ce"):
        head = ProjectionHead("bpe_head", hidden, len(bpe_model) + 1, rng)
    dec = AttentionDecoder("dec", len(bpe_model), hidden, embed_dim,
                           dec_hidden or hidden, energy_dim or hidden,
                           chunk_width, rng)
    model = EncoderModel(enc, top_head=head)
    return AsrSystem(vocab, model, bpe_model, dec, stage=3,
                     loss_mode=loss_mode)


def unfreeze_all(system):
    for p in system.parameters():
        p.requires_grad = True


# ----- loss assembly ---------------------------------------------------


def _pooled_len(n, factor):
    return -(-n // factor)


def char_targets(system, utts):
    return [system.char_vocab.encode(u.transcript) for u in utts]


def bpe_targets(system, utts):
    return [system.bpe_model.encode_text(u.transcript) for u in utts]


def _ctc_feasible(targets, lengths, factor):
    return all(min_alignment_length(y) <= _pooled_len(int(n), factor)
               for y, n in zip(targets, lengths))


def batch_loss(system, utts, plan, step, rng, mode="train", dropout=0.0):
    """Build the loss for one batch, or return (None, parts) when
    pooling leaves a CTC target unreachable and the batch must be
    skipped.  step is the one-based batch clock (see run_training);
    parts maps term name to float value."""
    base_factor = system.enc_model.encoder.overall_factor()
    top_factor = base_factor
    if system.enc_model.extension is not None:
        top_factor *= system.enc_model.extension.overall_factor()
    raw_lens = [u.num_frames for u in utts]

    need_char = need_bpe_ctc = need_ce = False
    if system.stage == 1:
        need_char = True
    elif system.stage == 2:
        need_bpe_ctc = True
        need_char = system.method == "joint"
    else:
        need_ce = True
        if system.loss_mode == "ce+ctc":
            need_bpe_ctc = True
        elif system.loss_mode == "pt-ctc+ce":
            need_bpe_ctc = step <= plan.ctc_until

    chars = char_targets(system, utts) if need_char else None
    bpes = bpe_targets(system, utts) if (need_bpe_ctc or need_ce) else None
    if need_char and not _ctc_feasible(chars, raw_lens, base_factor):
        return None, {}
    if need_bpe_ctc and not _ctc_feasible(bpes, raw_lens, top_factor):
        return None, {}

    batch = features_to_batch(utts)
    mid, top = system.enc_model.encode(batch, mode, rng, dropout)
    parts = {}
    if system.stage == 1:
        loss = ctc_loss_batch(system.enc_model.base_log_probs(mid),
                              chars, mid.lengths)
        return loss, {"ctc_char": float(loss.data)}
    if system.stage == 2:
        bpe_loss = ctc_loss_batch(system.enc_model.top_log_probs(top),
                                  bpes, top.lengths)
        parts["ctc_bpe"] = float(bpe_loss.data)
        if system.method != "joint":
            return bpe_loss, parts
        char_loss = ctc_loss_batch(system.enc_model.base_log_probs(mid),
                                   chars, mid.lengths)
        parts["ctc_char"] = float(char_loss.data)
        loss = T.add(T.mul(char_loss, plan.char_weight),
                     T.mul(bpe_loss, plan.bpe_weight))
        return loss, parts

    lp = system.decoder.teacher_forced_log_probs(top, bpes, rng, mode)
    ce = system.decoder.ce_loss(lp, bpes)
    parts["ce"] = float(ce.data)
    if not need_bpe_ctc:
        return ce, parts
    ctc = ctc_loss_batch(system.enc_model.top_log_probs(top), bpes,
                         top.lengths)
    parts["ctc_bpe"] = float(ctc.data)
    loss = T.add(T.mul(ce, plan.ce_weight), T.mul(ctc, plan.ctc_weight))
    return loss, parts


# ----- schedule application --------------------------------------------


def _encoder_holding(system, name):
    enc = system.enc_model.encoder
    if name in enc._by_name:
        return enc
    ext = system.enc_model.extension
    if ext is not None and name in ext._by_name:
        return ext
    raise ValueError("no encoder op named %s" % name)


def apply_event(system, ev, rng, optimizer=None):
    """Apply one schedule event; preserved parameters must come through
    bit-identical, and new ones are registered with the optimizer."""
    before = {p.name: p.data.copy() for p in system.parameters()}
    if ev.action == "add_layer":
        enc = system.enc_model.encoder
        layer = enc.add_lstm(ev.name, rng, ev.index)
        norm = enc.add_bn(ev.name.replace("lstm", "bn"), ev.index + 1)
        if optimizer is not None:
            optimizer.register(layer.params() + norm.params())
    elif ev.action == "remove_pool":
        _encoder_holding(system, ev.name).remove_pool(ev.name)
    elif ev.action == "set_pool_factor":
        _encoder_holding(system, ev.name).set_pool_factor(ev.name,
                                                          ev.factor)
    elif ev.action == "unfreeze":
        unfreeze(system.parameters(), (ev.name,))
    else:
        raise ValueError("unknown schedule action %r" % ev.action)
    for p in system.parameters():
        if p.name in before and not np.array_equal(p.data, before[p.name]):
            raise RuntimeError("event %s mutated preserved parameter %s"
                               % (ev.action, p.name))


# ----- checkpoints ------------------------------------------------------


def save_system(path, system, optimizer=None, rng=None, position=None):
    params = system.parameters()
    arrays = [(p.name, p.data) for p in params]
    for name, bn in system.enc_model.bn_items():
        arrays.append((name + ".running_mean", bn.running_mean))
        arrays.append((name + ".running_var", bn.running_var))
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        arrays.extend(("opt.m." + k, v) for k, v in state["m"].items())
        arrays.extend(("opt.v." + k, v) for k, v in state["v"].items())
        opt_meta = {k: state[k] for k in ("t", "lr", "base_lr",
                                          "warmup_steps", "clip_norm",
                                          "best_dev")}
    meta = {
        "system": system.describe(),
        "frozen": [p.name for p in params if not p.requires_grad],
        "optimizer": opt_meta,
        "rng": None if rng is None else rng.bit_generator.state,
        "position": position,
    }
    save_archive(path, meta, arrays)


def load_system(path):
    """Rebuild (system, optimizer state or None, rng or None, position)
    from a checkpoint file."""
    meta, arrays = load_archive(path)
    system = AsrSystem.from_description(meta["system"])
    for p in system.parameters():
        if p.name not in arrays:
            raise CheckpointError("%s: missing tensor %s" % (path, p.name))
        a = arrays.pop(p.name)
        if a.shape != p.data.shape:
            raise CheckpointError("%s: tensor %s has shape %s, model "
                                  "expects %s" % (path, p.name, a.shape,
                                                  p.data.shape))
        p.data = a.copy()
    for name, bn in system.enc_model.bn_items():
        for stat in ("running_mean", "running_var"):
            key = name + "." + stat
            if key not in arrays:
                raise CheckpointError("%s: missing tensor %s" % (path, key))
            a = arrays.pop(key)
            if a.shape != (bn.dim,):
                raise CheckpointError("%s: tensor %s has shape %s, model "
                                      "expects %s" % (path, key, a.shape,
                                                      (bn.dim,)))
            setattr(bn, stat, a.copy())
    for name in meta["frozen"]:
        freeze(system.parameters(), (name,))
    opt_state = None
    if meta["optimizer"] is not None:
        opt_state = dict(meta["optimizer"])
        opt_state["m"] = {}
        opt_state["v"] = {}
        for key in list(arrays):
            if key.startswith("opt.m."):
                opt_state["m"][key[len("opt.m."):]] = arrays.pop(key)
            elif key.startswith("opt.v."):
                opt_state["v"][key[len("opt.v."):]] = arrays.pop(key)
    if arrays:
        raise CheckpointError("%s: unclaimed tensors %s"
                              % (path, sorted(arrays)))
    rng = None
    if meta["rng"] is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta["rng"]
    return system, opt_state, rng, meta["position"]


# ----- the trainer ------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int
    frame_budget: int
    base_lr: float = 8e-4
    clip_norm: float = 5.0
    warmup: int = None          # None: one epoch of steps
    dropout: float = 0.0
    seed: int = 0


def train_rng(seed):
    return np.random.default_rng(
        np.random.SeedSequence([seed, TRAIN_RNG_SALT]))


def _dev_loss(system, plan, dev_batches):
    """Utterance-weighted mean dev loss, or None while pooling keeps
    every dev batch infeasible (early high-reduction phases)."""
    total, count = 0.0, 0
    with T.no_grad():
        for utts in dev_batches:
            loss, _ = batch_loss(system, utts, plan, step=10 ** 9,
                                 rng=None, mode="eval")
            if loss is None:
                continue
            total += float(loss.data) * len(utts)
            count += len(utts)
    if count == 0:
        return None
    return total / count


def run_training(system, plan, train_utts, dev_utts, cfg, log=None,
                 ckpt_path=None, resume=None):
    """Drive one stage.  Returns a history dict with per-step losses,
    dev evaluations, metrics rows, and the skipped-batch count.

    resume is the (opt_state, rng, position) triple from load_system;
    training restarts from the epoch boundary recorded there and
    reproduces the uninterrupted run exactly.

    The schedule runs on a batch clock that counts every batch drawn,
    feasible or not: an epoch is a pass over the data, so events pinned
    to epoch fractions must fire even while high-reduction pooling
    keeps whole passes infeasible (the optimizer still counts only real
    updates for warmup).
    """
    plan.validate()
    say = log if log is not None else lambda line: None
    batches = make_batches(train_utts, cfg.frame_budget)
    spe = len(batches)
    half = math.ceil(spe / 2)
    warmup = cfg.warmup if cfg.warmup is not None else spe
    dev_batches = (make_batches(dev_utts, cfg.frame_budget)
                   if dev_utts else [])
    opt = Adam(system.parameters(), cfg.base_lr, warmup, cfg.clip_norm)
    events = sorted(plan.events, key=lambda e: e.step)

    if resume is not None:
        opt_state, rng, position = resume
        if opt_state is not None:
            opt.load_state(opt_state)
        if rng is None:
            rng = train_rng(cfg.seed)
        start_epoch = position["epoch"]
        clock = position["batch_clock"]
        applied = position["events_applied"]
        skipped = position["skipped"]
        grown = position["layers_grown"]
    else:
        rng = train_rng(cfg.seed)
        start_epoch = 0
        clock = 0
        applied = 0
        skipped = 0
        grown = len(system.enc_model.encoder.lstm_names())
        if plan.freeze_prefixes:
            names = freeze(system.parameters(), plan.freeze_prefixes)
            say("froze %d parameters under %s"
                % (len(names), ",".join(plan.freeze_prefixes)))

    history = {"steps": [], "dev": [], "metrics": [], "skipped": skipped}

    def run_dev():
        loss = _dev_loss(system, plan, dev_batches)
        if loss is None:
            say("step %d dev skipped (no feasible batch yet)" % clock)
            return
        decayed = opt.dev_update(loss)
        history["dev"].append((clock, loss))
        history["metrics"].append(("%.2f" % (clock / spe), "dev", "loss",
                                   loss))
        say("step %d dev loss %.6f%s"
            % (clock, loss, " (lr decayed to %.6g)" % opt.lr
               if decayed else ""))

    for epoch in range(start_epoch, cfg.epochs):
        epoch_losses = []
        for utts in shuffle_batches(batches, cfg.seed, epoch):
            clock += 1
            loss, _ = batch_loss(system, utts, plan, clock, rng,
                                 "train", cfg.dropout)
            if loss is None:
                skipped += 1
                history["skipped"] = skipped
                say("step %d skipped infeasible batch (%d so far)"
                    % (clock, skipped))
            else:
                T.zero_grads(system.parameters())
                loss.backward()
                opt.step()
                val = float(loss.data)
                epoch_losses.append(val)
                history["steps"].append(val)
                say("step %d loss %.6f lr %.6g"
                    % (clock, val, opt.effective_lr()))
            while applied < len(events) and events[applied].step <= clock:
                ev = events[applied]
                apply_event(system, ev, rng, opt)
                applied += 1
                say("step %d event %s %s" % (clock, ev.action, ev.name))
                if ev.action == "add_layer":
                    grown += 1
                    if (plan.finish_pool is not None
                            and grown == plan.target_layers):
                        system.enc_model.encoder.remove_pool(
                            plan.finish_pool)
                        say("step %d event remove_pool %s (growth "
                            "complete)" % (clock, plan.finish_pool))
            if dev_batches and clock % half == 0:
                run_dev()
        if epoch_losses:
            mean = float(np.mean(epoch_losses))
            history["metrics"].append((str(epoch + 1), "train", "loss",
                                       mean))
            say("epoch %d mean train loss %.6f (%d steps, %d skipped)"
                % (epoch + 1, mean, len(epoch_losses), skipped))
        if ckpt_path is not None:
            save_system(ckpt_path, system, opt, rng,
                        {"epoch": epoch + 1, "batch_clock": clock,
                         "global_step": opt.t, "events_applied": applied,
                         "skipped": skipped, "layers_grown": grown})
    return history


# ----- decoding ---------------------------------------------------------


def transcribe_ids(system, utts, beam=12, lam=0.3, lm=None, max_len=None):
    """Decode utterances to token id lists (character ids for stage 1,
    BPE ids for stages 2 and 3)."""
    out = []
    with T.no_grad():
        batch = features_to_batch(utts)
        mid, top = system.enc_model.encode(batch, "infer")
        if system.stage < 3:
            lp = (system.enc_model.base_log_probs(mid) if system.stage == 1
                  else system.enc_model.top_log_probs(top))
            lens = (mid if system.stage == 1 else top).lengths
            for i in range(len(utts)):
                out.append(ctc_greedy_decode(lp.data[i], int(lens[i])))
            return out
        for i in range(len(utts)):
            frames = top.data.data[i, :int(top.lengths[i])]
            cap = max_len if max_len is not None else 2 * len(frames) + 8
            hyp = beam_search(system.decoder, frames, beam, cap, lm, lam)
            out.append(list(hyp.emitted()))
    return out


def ids_to_text(system, ids):
    if system.stage == 1:
        return system.char_vocab.decode(ids)
    return system.bpe_model.decode_text(ids)


def transcribe(system, utts, beam=12, lam=0.3, lm=None, max_len=None):
    """Decode to (utterance id, text) pairs."""
    ids = transcribe_ids(system, utts, beam, lam, lm, max_len)
    return [(u.id, ids_to_text(system, y)) for u, y in zip(utts, ids)]
