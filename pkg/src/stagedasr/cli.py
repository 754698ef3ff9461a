"""Command line front end.

Subcommands cover the full workflow: synth-data writes a toy corpus,
bpe-learn fits the subword inventory, lm-train fits the shallow-fusion
language model, train drives one pipeline stage, decode writes
hypotheses, eval scores them, and gradcheck runs the numeric test
battery.  Every run echoes its fully resolved settings; every error
names the file or flag at fault.  Exit codes: 0 success, 2 usage or
configuration, 3 data or checkpoint, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from collections import Counter

import numpy as np

from . import pipeline as P
from .checkpoint import CheckpointError
from .config import ConfigError, format_config, load_config
from .data import (DatasetError, SyntheticTaskSpec, error_rate,
                   gen_synthetic, load_dataset, make_batches, write_dataset)
from .gradcheck import run_all
from .lm import lm_train, load_lm, perplexity, save_lm
from .optim import NonFiniteGradError
from .tokenizer import BpeModel, bpe_learn


def _path(args, p):
    """Resolve p against --workdir (absolute paths pass through)."""
    return os.path.join(args.workdir, p)


def _load_cfg(args):
    cfg = load_config(_path(args, args.config))
    print(format_config(cfg))
    print()
    return cfg


def _echo_flags(pairs):
    for key, value in pairs:
        print("%s = %s" % (key, "" if value is None else value))
    print()


def _letters(cfg):
    return list(cfg["model"]["letters"])


def _load_bpe(args, cfg):
    return BpeModel.load(_path(args, cfg["stage"]["bpe_model"]),
                         _letters(cfg))


def _word_counts(utts):
    return Counter(w for u in utts for w in u.transcript.split())


# ----- subcommands -------------------------------------------------------


def cmd_synth_data(args):
    cfg = _load_cfg(args)
    d = cfg["data"]
    spec = SyntheticTaskSpec(
        n_chars=d["n_chars"], n_words=d["n_words"],
        frames_per_char=d["frames_per_char"], feature_dim=d["feature_dim"],
        noise=d["noise"], min_words=d["min_words"], max_words=d["max_words"],
        n_train=d["n_train"], n_dev=d["n_dev"], seed=d["seed"])
    train, dev = gen_synthetic(spec)
    for utts, manifest in ((train, d["train"]), (dev, d["dev"])):
        split, ext = os.path.splitext(manifest)
        if ext != ".tsv":
            raise ConfigError("manifest %s must end in .tsv" % manifest)
        out = write_dataset(utts, args.workdir, split)
        print("wrote %d utterances -> %s" % (len(utts), out))
    return 0


def cmd_bpe_learn(args):
    cfg = _load_cfg(args)
    utts = load_dataset(_path(args, cfg["data"]["train"]))
    corpus = _word_counts(utts)
    bpe = bpe_learn(corpus, cfg["stage"]["num_merges"], _letters(cfg))
    out = _path(args, cfg["stage"]["bpe_model"])
    bpe.save(out)
    print("learned %d merges (%d tokens) from %d words -> %s"
          % (len(bpe.merges), len(bpe), len(corpus), out))
    return 0


def cmd_lm_train(args):
    cfg = _load_cfg(args)
    bpe = _load_bpe(args, cfg)
    train = load_dataset(_path(args, cfg["data"]["train"]))
    dev = load_dataset(_path(args, cfg["data"]["dev"]))
    seqs = [bpe.encode_text(u.transcript) for u in train]
    lm, _ = lm_train(
        seqs, len(bpe), embed_dim=cfg["model"]["lm_embed"],
        hidden=cfg["model"]["lm_hidden"], n_layers=cfg["model"]["lm_layers"],
        batch_size=cfg["optimizer"]["lm_batch"],
        epochs=cfg["schedule"]["lm_epochs"], lr=cfg["optimizer"]["lm_lr"],
        seed=cfg["data"]["seed"], log=print)
    ppl = perplexity(lm, [bpe.encode_text(u.transcript) for u in dev])
    print("dev perplexity %.3f" % ppl)
    out = _path(args, args.out)
    save_lm(out, lm)
    print("saved language model -> %s" % out)
    return 0


def _check_train_flags(args):
    if args.stage != 2 and args.method is not None:
        raise ConfigError("--method is only valid with --stage 2")
    if args.stage != 3 and args.loss is not None:
        raise ConfigError("--loss is only valid with --stage 3")
    if args.stage == 1 and args.init is not None:
        raise ConfigError("--init is only valid with --stage 2 or 3")
    if args.stage == 2:
        if args.method is None:
            raise ConfigError("--stage 2 requires --method")
        if args.init is None:
            raise ConfigError("--stage 2 requires --init")


def _load_init(args, want_stage):
    path = _path(args, args.init)
    system, _, _, _ = P.load_system(path)
    if system.stage != want_stage:
        raise ConfigError("%s holds a stage-%d system, --stage %d needs "
                          "stage %d" % (path, system.stage, args.stage,
                                        want_stage))
    return system


def cmd_train(args):
    _check_train_flags(args)
    loss_mode = args.loss if args.loss is not None else "ce"
    cfg = _load_cfg(args)
    m, s = cfg["model"], cfg["stage"]
    train = load_dataset(_path(args, cfg["data"]["train"]))
    dev = load_dataset(_path(args, cfg["data"]["dev"]))
    input_dim = train[0].features.shape[1]
    spe = len(make_batches(train, cfg["data"]["frame_budget"]))
    init_rng = np.random.default_rng(cfg["data"]["seed"])

    if args.stage == 1:
        system = P.build_stage1(_letters(cfg), input_dim, m["hidden"],
                                m["target_layers"], init_rng,
                                m["start_layers"])
        plan = P.stage1_plan(spe, m["target_layers"], m["start_layers"])
        default_out = "stage1.ckpt"
    elif args.stage == 2:
        system = _load_init(args, want_stage=1)
        system = P.to_stage2(system, args.method, _load_bpe(args, cfg),
                             init_rng)
        plan = P.stage2_plan(args.method, spe)
        plan.char_weight = s["char_weight"]
        plan.bpe_weight = s["bpe_weight"]
        default_out = "stage2-%s.ckpt" % args.method
    else:
        if args.init is not None:
            system = _load_init(args, want_stage=2)
            system = P.to_stage3(
                system, init_rng, loss_mode, m["embed_dim"],
                m["dec_hidden"], m["energy_dim"], m["chunk_width"])
            plan = P.stage3_plan(loss_mode, spe, pretrain_pools=False)
            default_out = "stage3-c2b-%s.ckpt" % loss_mode
        else:
            system = P.build_stage3_baseline(
                _letters(cfg), _load_bpe(args, cfg), input_dim, m["hidden"],
                init_rng, loss_mode, m["baseline_layers"], m["embed_dim"],
                m["dec_hidden"], m["energy_dim"], m["chunk_width"])
            plan = P.stage3_plan(loss_mode, spe, pretrain_pools=True)
            default_out = "stage3-base-%s.ckpt" % loss_mode
        plan.ce_weight = s["ce_weight"]
        plan.ctc_weight = s["ctc_weight"]

    o = cfg["optimizer"]
    tc = P.TrainConfig(epochs=cfg["schedule"]["epochs"],
                       frame_budget=cfg["data"]["frame_budget"],
                       base_lr=o["base_lr"], clip_norm=o["clip_norm"],
                       warmup=o["warmup"], dropout=o["dropout"],
                       seed=cfg["data"]["seed"])
    out = _path(args, args.out if args.out is not None else default_out)
    history = P.run_training(system, plan, train, dev, tc, log=print,
                             ckpt_path=out)
    metrics = os.path.splitext(out)[0] + ".metrics.csv"
    with open(metrics, "w", encoding="utf-8") as f:
        f.write("epoch,split,metric,value\n")
        for epoch, split, metric, value in history["metrics"]:
            f.write("%s,%s,%s,%.6f\n" % (epoch, split, metric, value))
    print("saved checkpoint -> %s" % out)
    print("wrote metrics -> %s" % metrics)
    return 0


def cmd_decode(args):
    _echo_flags([("ckpt", args.ckpt), ("data", args.data),
                 ("beam", args.beam), ("lambda", args.lam),
                 ("lm", args.lm), ("out", args.out)])
    ckpt = _path(args, args.ckpt)
    system, _, _, _ = P.load_system(ckpt)
    utts = load_dataset(_path(args, args.data))
    lm = None
    if args.lm is not None:
        if system.stage != 3:
            raise ConfigError("--lm requires a stage-3 checkpoint, %s is "
                              "stage %d" % (ckpt, system.stage))
        lm = load_lm(_path(args, args.lm))
        if lm.n_tokens != len(system.bpe_model):
            raise ConfigError("%s models %d tokens but %s uses %d"
                              % (_path(args, args.lm), lm.n_tokens, ckpt,
                                 len(system.bpe_model)))
    hyps = P.transcribe(system, utts, beam=args.beam, lam=args.lam, lm=lm)
    out = _path(args, args.out)
    with open(out, "w", encoding="utf-8") as f:
        for uid, text in hyps:
            f.write("%s\t%s\n" % (uid, text))
    print("wrote %d hypotheses -> %s" % (len(hyps), out))
    return 0


def _read_texts(path):
    """id -> text from a two-column hyp file or three-column manifest."""
    texts = {}
    order = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) == 2:
                uid, text = fields
            elif len(fields) == 3:
                uid, text = fields[0], fields[2]
            else:
                raise DatasetError("%s line %d: expected 2 or 3 tab-"
                                   "separated fields, got %d"
                                   % (path, i, len(fields)))
            if uid in texts:
                raise DatasetError("%s: duplicate utterance id %s"
                                   % (path, uid))
            texts[uid] = text
            order.append(uid)
    if not texts:
        raise DatasetError("%s: no utterances" % path)
    return texts, order


def cmd_eval(args):
    labels = {"char": "CER", "word": "WER", "bpe": "BER"}
    refs, order = _read_texts(_path(args, args.refs))
    hyps, _ = _read_texts(_path(args, args.hyps))
    for uid in order:
        if uid not in hyps:
            raise DatasetError("%s is missing id %s present in %s"
                               % (args.hyps, uid, args.refs))
    for uid in hyps:
        if uid not in refs:
            raise DatasetError("%s is missing id %s present in %s"
                               % (args.refs, uid, args.hyps))
    ref_seq = [refs[uid] for uid in order]
    hyp_seq = [hyps[uid] for uid in order]
    if args.unit == "bpe":
        if args.bpe_model is None:
            raise ConfigError("--unit bpe requires --bpe-model")
        if args.letters is None:
            raise ConfigError("--unit bpe requires --letters")
        bpe = BpeModel.load(_path(args, args.bpe_model), list(args.letters))
        ref_seq = [bpe.encode_text(t) for t in ref_seq]
        hyp_seq = [bpe.encode_text(t) for t in hyp_seq]
    rate = error_rate(ref_seq, hyp_seq, args.unit)
    print("%s %.2f" % (labels[args.unit], rate))
    return 0


def cmd_gradcheck(args):
    results = run_all(args.module, log=print)
    return 0 if all(ok for _, _, _, ok in results) else 4


# ----- parser ------------------------------------------------------------


def build_parser():
    top = argparse.ArgumentParser(
        prog="stagedasr",
        description="staged training for an online attention ASR model")
    sub = top.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--workdir", default=".",
                       help="base directory for all relative paths")
        if config:
            p.add_argument("--config", required=True,
                           help="INI run configuration")
        p.set_defaults(func=fn)
        return p

    add("synth-data", cmd_synth_data,
        "generate the synthetic corpus named in [data]", config=True)
    add("bpe-learn", cmd_bpe_learn,
        "fit the BPE inventory on the training transcripts", config=True)

    p = add("lm-train", cmd_lm_train,
            "fit the shallow-fusion language model", config=True)
    p.add_argument("--out", default="lm.ckpt", help="LM checkpoint path")

    p = add("train", cmd_train, "train one pipeline stage", config=True)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--method", choices=("replace", "joint", "freeze"),
                   help="stage-2 conversion method")
    p.add_argument("--loss", choices=("ce", "ce+ctc", "pt-ctc+ce"),
                   help="stage-3 loss mode (default ce)")
    p.add_argument("--init", help="checkpoint of the previous stage")
    p.add_argument("--out", help="checkpoint path (default per stage)")

    p = add("decode", cmd_decode, "write hypothesis transcripts")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="manifest to decode")
    p.add_argument("--lm", help="language model for shallow fusion")
    p.add_argument("--lambda", dest="lam", type=float, default=0.3,
                   help="LM interpolation weight")
    p.add_argument("--beam", type=int, default=12, help="beam width")
    p.add_argument("--out", default="hyps.tsv", help="hypothesis file")

    p = add("eval", cmd_eval, "score hypotheses against references")
    p.add_argument("--refs", required=True, help="reference file")
    p.add_argument("--hyps", required=True, help="hypothesis file")
    p.add_argument("--unit", choices=("char", "word", "bpe"), required=True)
    p.add_argument("--bpe-model", help="BPE model (only for --unit bpe)")
    p.add_argument("--letters", help="alphabet (only for --unit bpe)")

    p = add("gradcheck", cmd_gradcheck, "run the gradient test battery")
    p.add_argument("--module", help="run a single named check")
    return top


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except ConfigError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 3
    except NonFiniteGradError as e:
        print("error: %s" % e, file=sys.stderr)
        return 4
    except ValueError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))
