"""Run configuration files.

INI sections [data], [model], [stage], [schedule], [optimizer] with
typed keys, every one defaulted except the seed: reproducibility is a
test surface, so there is no wall-clock fallback.  Unknown sections or
keys are rejected rather than ignored; a typo should fail loudly, not
silently train with a default.
"""
from __future__ import annotations

import configparser

_REQUIRED = object()


class ConfigError(ValueError):
    """Missing file, unknown key, bad value, or missing required key."""


def _int(s):
    return int(s, 10)


def _float(s):
    return float(s)


def _str(s):
    return s


def _opt_int(s):
    return None if s.strip() == "" else int(s, 10)


def _opt_str(s):
    return None if s.strip() == "" else s


# (parser, default); _REQUIRED marks keys the file must provide
SCHEMA = {
    "data": {
        "train": (_str, "train.tsv"),
        "dev": (_str, "dev.tsv"),
        "frame_budget": (_int, 2000),
        "seed": (_int, _REQUIRED),
        "n_chars": (_int, 12),
        "n_words": (_int, 50),
        "frames_per_char": (_int, 4),
        "feature_dim": (_int, 8),
        "noise": (_float, 0.3),
        "min_words": (_int, 2),
        "max_words": (_int, 5),
        "n_train": (_int, 2000),
        "n_dev": (_int, 200),
    },
    "model": {
        "hidden": (_int, 24),
        "start_layers": (_int, 3),
        "target_layers": (_int, 6),
        "baseline_layers": (_int, 8),
        "embed_dim": (_int, 16),
        "dec_hidden": (_opt_int, None),
        "energy_dim": (_opt_int, None),
        "chunk_width": (_int, 2),
        "letters": (_opt_str, None),
        "lm_embed": (_int, 16),
        "lm_hidden": (_int, 32),
        "lm_layers": (_int, 1),
    },
    "stage": {
        "bpe_model": (_str, "bpe.txt"),
        "num_merges": (_int, 80),
        "char_weight": (_float, 0.5),
        "bpe_weight": (_float, 0.5),
        "ce_weight": (_float, 0.5),
        "ctc_weight": (_float, 0.5),
    },
    "schedule": {
        "epochs": (_int, 4),
        "lm_epochs": (_int, 5),
    },
    "optimizer": {
        "base_lr": (_float, 8e-4),
        "clip_norm": (_float, 5.0),
        "warmup": (_opt_int, None),
        "dropout": (_float, 0.0),
        "lm_lr": (_float, 2e-3),
        "lm_batch": (_int, 16),
    },
}


def load_config(path):
    """Parse and fully resolve a config file; returns nested dicts
    keyed by section then option."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f, source=path)
    except FileNotFoundError:
        raise ConfigError("missing config file %s" % path) from None
    except configparser.Error as e:
        raise ConfigError("%s: %s" % (path, e)) from None

    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError("%s: unknown section [%s]" % (path, section))
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError("%s: unknown key [%s] %s"
                                  % (path, section, key))

    cfg = {}
    for section, keys in SCHEMA.items():
        out = {}
        for key, (parse, default) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    out[key] = parse(raw)
                except ValueError:
                    raise ConfigError("%s: bad value for [%s] %s: %r"
                                      % (path, section, key, raw)) from None
            elif default is _REQUIRED:
                raise ConfigError("%s: missing required key [%s] %s"
                                  % (path, section, key))
            else:
                out[key] = default
        cfg[section] = out

    if cfg["model"]["letters"] is None:
        cfg["model"]["letters"] = "".join(
            chr(ord("A") + i) for i in range(cfg["data"]["n_chars"]))
    if cfg["data"]["min_words"] > cfg["data"]["max_words"]:
        raise ConfigError("%s: [data] min_words %d exceeds max_words %d"
                          % (path, cfg["data"]["min_words"],
                             cfg["data"]["max_words"]))
    return cfg


def format_config(cfg):
    """The echo block: every resolved value, schema order."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append("[%s]" % section)
        for key in keys:
            value = cfg[section][key]
            lines.append("%s = %s" % (key, "" if value is None else value))
        lines.append("")
    return "\n".join(lines).rstrip("\n")
