"""Feature files, manifests, frame-budget batching, the synthetic
task generator, and edit-distance error rates.

Feature binary format (bit-exact): magic "FEAT", u32 version = 1,
u32 T, u32 D, then T x D little-endian f32, row major.  Manifests are
tab-separated lines "id<TAB>feature_path<TAB>transcript" with feature
paths resolved relative to the manifest's directory.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# fixed salt separating the epoch-shuffle rng stream from everything
# else derived from the run seed
EPOCH_SHUFFLE_SALT = 104729


class DatasetError(ValueError):
    """Malformed manifest, feature file, or task description."""


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: str

    @property
    def num_frames(self):
        return self.features.shape[0]


def write_features(path, features):
    """Write a (T, D) array as a FEAT file (f32 on disk)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise DatasetError("features must be a nonempty (T, D) array, got "
                           "shape %r" % (feats.shape,))
    T, D = feats.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, D))
        f.write(feats.astype("<f4").tobytes(order="C"))


def read_features(path):
    """Read a FEAT file back as a (T, D) f64 array."""
    try:
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise DatasetError("%s: truncated header" % path)
            magic, version, T, D = _HEADER.unpack(head)
            if magic != FEAT_MAGIC:
                raise DatasetError("%s: bad magic %r" % (path, magic))
            if version != FEAT_VERSION:
                raise DatasetError("%s: unsupported version %d"
                                   % (path, version))
            if T < 1 or D < 1:
                raise DatasetError("%s: bad shape (%d, %d)" % (path, T, D))
            payload = f.read()
    except FileNotFoundError:
        raise DatasetError("missing feature file %s" % path) from None
    want = T * D * 4
    if len(payload) != want:
        raise DatasetError("%s: payload is %d bytes, header promises %d"
                           % (path, len(payload), want))
    return np.frombuffer(payload, dtype="<f4").reshape(T, D).astype(np.float64)


def load_dataset(manifest_path):
    """Read a manifest and its feature files, in manifest order."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f]
    except FileNotFoundError:
        raise DatasetError("missing manifest %s" % manifest_path) from None
    root = os.path.dirname(os.path.abspath(manifest_path))
    utts = []
    dim = None
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise DatasetError("%s:%d: expected id<TAB>path<TAB>transcript"
                               % (manifest_path, n))
        uid, rel, transcript = parts
        path = rel if os.path.isabs(rel) else os.path.join(root, rel)
        feats = read_features(path)
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise DatasetError("%s: feature dim %d disagrees with earlier %d"
                               % (path, feats.shape[1], dim))
        utts.append(Utterance(uid, feats, transcript))
    if not utts:
        raise DatasetError("%s: manifest has no utterances" % manifest_path)
    return utts


def write_dataset(utterances, outdir, split):
    """Emit FEAT files under outdir/split/ plus outdir/split.tsv."""
    featdir = os.path.join(outdir, split)
    os.makedirs(featdir, exist_ok=True)
    manifest = os.path.join(outdir, split + ".tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        for u in utterances:
            rel = os.path.join(split, u.id + ".feat")
            write_features(os.path.join(outdir, rel), u.features)
            f.write("%s\t%s\t%s\n" % (u.id, rel, u.transcript))
    return manifest


def make_batches(utterances, frame_budget):
    """Sort by length and pack greedily so each batch's padded frame
    count (batch size times its longest utterance) stays within budget.

    Every utterance lands in exactly one batch; packing is
    deterministic (length sort is stable over input order).
    """
    for u in utterances:
        if u.num_frames > frame_budget:
            raise DatasetError("utterance %s has %d frames, over the %d "
                               "frame budget" % (u.id, u.num_frames,
                                                 frame_budget))
    ordered = sorted(utterances, key=lambda u: u.num_frames)
    batches = []
    current = []
    for u in ordered:
        # ascending order makes u the longest element of any batch it joins
        if current and (len(current) + 1) * u.num_frames > frame_budget:
            batches.append(current)
            current = []
        current.append(u)
    if current:
        batches.append(current)
    return batches


def shuffle_batches(batches, seed, epoch):
    """Deterministic per-epoch batch order from the run seed."""
    ss = np.random.SeedSequence([seed, epoch, EPOCH_SHUFFLE_SALT])
    perm = np.random.Generator(np.random.PCG64(ss)).permutation(len(batches))
    return [batches[i] for i in perm]


@dataclass
class SyntheticTaskSpec:
    """Desk-scale stand-in task: each character is a fixed random
    prototype vector, repeated frames_per_char times per occurrence,
    plus Gaussian noise.  Deterministic per seed."""
    n_chars: int = 12
    n_words: int = 50
    frames_per_char: int = 4
    feature_dim: int = 8
    noise: float = 0.3
    min_words: int = 2
    max_words: int = 5
    n_train: int = 2000
    n_dev: int = 200
    seed: int = 0


def gen_synthetic(spec):
    """Generate (train, dev) utterance lists for a SyntheticTaskSpec."""
    if not 1 <= spec.n_chars <= 26:
        raise DatasetError("n_chars must be in [1, 26], got %d" % spec.n_chars)
    if spec.n_words < 1 or spec.frames_per_char < 1 or spec.feature_dim < 1:
        raise DatasetError("word count, frames per char, and feature dim "
                           "must be positive")
    if spec.noise < 0:
        raise DatasetError("noise stddev must be >= 0, got %g" % spec.noise)
    if not 1 <= spec.min_words <= spec.max_words:
        raise DatasetError("bad utterance length range [%d, %d]"
                           % (spec.min_words, spec.max_words))
    capacity = sum(spec.n_chars ** k for k in range(2, 6))
    if spec.n_words > capacity:
        raise DatasetError("cannot draw %d distinct words from %d characters"
                           % (spec.n_words, spec.n_chars))

    rng = np.random.default_rng(spec.seed)
    letters = [chr(ord("A") + i) for i in range(spec.n_chars)]
    # one prototype per letter plus one for the space between words
    protos = rng.normal(size=(spec.n_chars + 1, spec.feature_dim))
    proto_of = {ch: protos[i] for i, ch in enumerate(letters)}
    proto_of[" "] = protos[spec.n_chars]

    words = []
    seen = set()
    while len(words) < spec.n_words:
        length = int(rng.integers(2, 6))
        w = "".join(letters[int(rng.integers(0, spec.n_chars))]
                    for _ in range(length))
        if w not in seen:
            seen.add(w)
            words.append(w)

    def make_split(prefix, count):
        out = []
        for i in range(count):
            k = int(rng.integers(spec.min_words, spec.max_words + 1))
            text = " ".join(words[int(rng.integers(0, spec.n_words))]
                            for _ in range(k))
            clean = np.concatenate([
                np.repeat(proto_of[ch][None, :], spec.frames_per_char, axis=0)
                for ch in text])
            feats = clean + rng.normal(0.0, spec.noise, size=clean.shape)
            out.append(Utterance("%s-%04d" % (prefix, i), feats, text))
        return out

    return make_split("train", spec.n_train), make_split("dev", spec.n_dev)


def edit_distance(ref, hyp):
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1,
                           cur[j - 1] + 1,
                           prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def _tokenize(seq, unit):
    if unit == "char":
        return list(seq)
    if unit == "word":
        return seq.split()
    if unit == "bpe":
        return list(seq)
    raise ValueError("unknown unit %r" % (unit,))


def error_rate(refs, hyps, unit):
    """100 x total edit distance / total reference length.

    char: per-character including spaces; word: whitespace words;
    bpe: sequences are token-id lists and are compared as given.
    """
    if len(refs) != len(hyps):
        raise ValueError("got %d references but %d hypotheses"
                         % (len(refs), len(hyps)))
    total_dist = 0
    total_len = 0
    for ref, hyp in zip(refs, hyps):
        r = _tokenize(ref, unit)
        h = _tokenize(hyp, unit)
        total_dist += edit_distance(r, h)
        total_len += len(r)
    if total_len == 0:
        raise ValueError("total reference length is zero")
    return 100.0 * total_dist / total_len
