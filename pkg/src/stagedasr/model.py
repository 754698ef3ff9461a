"""Encoder assembly: an ordered stack of ULSTM layers, batch norms,
and time maxpools that can grow and re-pool mid-training, plus
per-frame CTC heads.

The stack is named: every layer and pool carries a stable name, so
schedule events reference parts by name and checkpoints map parameter
tensors across stages without positional guessing.  Growth appends at
the top of the stack; pool removal and factor changes never touch any
layer weights.

A full encoder-side model is a base encoder (the character encoder in
the staged recipe), an optional extension stack on top of it (the BPE
layers), and up to two projection heads: one over the base output, one
over the extension output.
"""
from __future__ import annotations

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import ProjectionHead, SequenceBatch, UlstmLayer


class Encoder:
    """Ordered lstm/bn/pool ops over a SequenceBatch."""

    def __init__(self, input_dim, hidden):
        self.input_dim = input_dim
        self.hidden = hidden
        self.ops = []
        self._by_name = {}

    def _check_new_name(self, name):
        if name in self._by_name:
            raise ValueError("encoder already has an op named %s" % name)

    def _op(self, name):
        if name not in self._by_name:
            raise ValueError("encoder has no op named %s" % name)
        return self._by_name[name]

    def _in_dim_at(self, index):
        for op in self.ops[:index]:
            if op["kind"] == "lstm":
                return self.hidden
        return self.input_dim

    def add_lstm(self, name, rng=None, index=None):
        """Insert a fresh ULSTM layer (appends when index is None)."""
        self._check_new_name(name)
        if index is None:
            index = len(self.ops)
        in_dim = self._in_dim_at(index)
        for op in self.ops[index:]:
            if op["kind"] == "lstm" and op["layer"].in_dim != self.hidden:
                raise ValueError("inserting %s before %s would change its "
                                 "input dim" % (name, op["name"]))
            if op["kind"] == "bn" and op["layer"].dim != self.hidden:
                raise ValueError("inserting %s before %s would change its "
                                 "input dim" % (name, op["name"]))
        layer = UlstmLayer(name, in_dim, self.hidden, rng)
        op = {"kind": "lstm", "name": name, "layer": layer}
        self.ops.insert(index, op)
        self._by_name[name] = op
        return layer

    def add_bn(self, name, index=None):
        """Insert a batch norm sized for the activations at ``index``."""
        self._check_new_name(name)
        if index is None:
            index = len(self.ops)
        layer = L.BatchNorm(name, self._in_dim_at(index))
        op = {"kind": "bn", "name": name, "layer": layer}
        self.ops.insert(index, op)
        self._by_name[name] = op
        return layer

    def add_pool(self, name, factor, index=None):
        self._check_new_name(name)
        op = {"kind": "pool", "name": name, "factor": int(factor)}
        self.ops.insert(len(self.ops) if index is None else index, op)
        self._by_name[name] = op
        return op

    def remove_pool(self, name):
        op = self._op(name)
        if op["kind"] != "pool":
            raise ValueError("%s is not a pool" % name)
        self.ops.remove(op)
        del self._by_name[name]

    def set_pool_factor(self, name, factor):
        op = self._op(name)
        if op["kind"] != "pool":
            raise ValueError("%s is not a pool" % name)
        op["factor"] = int(factor)

    def overall_factor(self):
        f = 1
        for op in self.ops:
            if op["kind"] == "pool":
                f *= op["factor"]
        return f

    def lstm_names(self):
        return [op["name"] for op in self.ops if op["kind"] == "lstm"]

    def forward(self, batch, mode="train", rng=None, dropout=0.0):
        if not self.ops:
            raise ValueError("encoder has no layers")
        n = len(self.ops)
        for i, op in enumerate(self.ops):
            if op["kind"] == "lstm":
                batch, _ = op["layer"].forward(batch)
            elif op["kind"] == "bn":
                batch = op["layer"].forward(
                    batch, "train" if mode == "train" else "infer")
            else:
                batch = L.maxpool_time(batch, op["factor"])
                continue
            # dropout closes each layer block: a bn, or an lstm with no
            # bn glued after it; the stack's final block stays clean
            block_end = (op["kind"] == "bn"
                         or i + 1 >= n or self.ops[i + 1]["kind"] != "bn")
            if dropout > 0.0 and block_end and i + 1 < n:
                batch = SequenceBatch(
                    L.dropout(batch.data, dropout, mode, rng),
                    batch.lengths, batch.subsampling)
        return batch

    def parameters(self):
        out = []
        for op in self.ops:
            if op["kind"] in ("lstm", "bn"):
                out.extend(op["layer"].params())
        return out

    def bn_items(self):
        return [(op["name"], op["layer"]) for op in self.ops
                if op["kind"] == "bn"]

    def describe(self):
        desc = []
        for op in self.ops:
            if op["kind"] == "lstm":
                desc.append({"kind": "lstm", "name": op["name"],
                             "in_dim": op["layer"].in_dim,
                             "hidden": op["layer"].hidden})
            elif op["kind"] == "bn":
                desc.append({"kind": "bn", "name": op["name"],
                             "dim": op["layer"].dim})
            else:
                desc.append({"kind": "pool", "name": op["name"],
                             "factor": op["factor"]})
        return {"input_dim": self.input_dim, "hidden": self.hidden,
                "ops": desc}

    @classmethod
    def from_description(cls, desc):
        """Rebuild the stack with zero weights (a checkpoint fills them)."""
        enc = cls(desc["input_dim"], desc["hidden"])
        for op in desc["ops"]:
            if op["kind"] == "lstm":
                layer = enc.add_lstm(op["name"])
                if layer.in_dim != op["in_dim"]:
                    raise ValueError("description is inconsistent: %s "
                                     "expects input dim %d, stack gives %d"
                                     % (op["name"], op["in_dim"],
                                        layer.in_dim))
            elif op["kind"] == "bn":
                layer = enc.add_bn(op["name"])
                if layer.dim != op["dim"]:
                    raise ValueError("description is inconsistent: %s "
                                     "expects dim %d, stack gives %d"
                                     % (op["name"], op["dim"], layer.dim))
            else:
                enc.add_pool(op["name"], op["factor"])
        return enc


class EncoderModel:
    """Base encoder + optional extension stack + CTC heads.

    encode() returns (base output, final output); they are the same
    object when there is no extension stack.  The base head scores the
    base output, the top head scores the final output.
    """

    def __init__(self, encoder, extension=None, base_head=None,
                 top_head=None):
        self.encoder = encoder
        self.extension = extension
        self.base_head = base_head
        self.top_head = top_head

    def encode(self, batch, mode="train", rng=None, dropout=0.0):
        mid = self.encoder.forward(batch, mode, rng, dropout)
        if self.extension is None:
            return mid, mid
        return mid, self.extension.forward(mid, mode, rng, dropout)

    def base_log_probs(self, seq_batch):
        if self.base_head is None:
            raise ValueError("model has no base head")
        return L.ff_softmax(self.base_head, seq_batch.data)

    def top_log_probs(self, seq_batch):
        if self.top_head is None:
            raise ValueError("model has no top head")
        return L.ff_softmax(self.top_head, seq_batch.data)

    def parameters(self):
        out = list(self.encoder.parameters())
        if self.extension is not None:
            out.extend(self.extension.parameters())
        for head in (self.base_head, self.top_head):
            if head is not None:
                out.extend(head.params())
        return out

    def bn_items(self):
        out = list(self.encoder.bn_items())
        if self.extension is not None:
            out.extend(self.extension.bn_items())
        return out

    def describe(self):
        def head_desc(head):
            if head is None:
                return None
            return {"prefix": head.w.name.rsplit(".", 1)[0],
                    "in_dim": head.in_dim, "out_dim": head.out_dim}

        return {
            "encoder": self.encoder.describe(),
            "extension": (None if self.extension is None
                          else self.extension.describe()),
            "base_head": head_desc(self.base_head),
            "top_head": head_desc(self.top_head),
        }

    @classmethod
    def from_description(cls, desc):
        def head_of(d):
            if d is None:
                return None
            return ProjectionHead(d["prefix"], d["in_dim"], d["out_dim"])

        return cls(
            Encoder.from_description(desc["encoder"]),
            (None if desc["extension"] is None
             else Encoder.from_description(desc["extension"])),
            head_of(desc["base_head"]),
            head_of(desc["top_head"]),
        )


def features_to_batch(utterances):
    """Pad a list of utterances into one SequenceBatch."""
    B = len(utterances)
    lengths = np.array([u.num_frames for u in utterances])
    dim = utterances[0].features.shape[1]
    data = np.zeros((B, int(lengths.max()), dim))
    for i, u in enumerate(utterances):
        data[i, :u.num_frames] = u.features
    return SequenceBatch(T.Tensor(data), lengths)
