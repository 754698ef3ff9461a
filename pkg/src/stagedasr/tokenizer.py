"""Character vocabulary and byte-pair-encoding tokenizers.

Characters are the first-stage targets; BPE subwords the later-stage
ones.  BPE uses the classic greedy most-frequent-pair algorithm with an
end-of-word marker fused onto each word's final character ("low" splits
into ``l o w</w>``).  Ties between equally frequent pairs go to the
lexicographically smallest pair so learned merge lists are identical
across platforms.

Reserved symbols are spelled ``<unk>``, ``<eos>`` and ``<spc>`` so the
one-symbol-per-line vocab file stays readable and round-trips exactly.
"""
from __future__ import annotations

UNK = "<unk>"
EOS = "<eos>"
SPACE = "<spc>"
WORD_END = "</w>"


class CharVocab:
    """Ordered character symbols plus the three reserved symbols.

    Letters come first in construction order, then ``<spc>``, ``<unk>``,
    and ``<eos>`` last (the decoder relies on eos having the top id).
    """

    def __init__(self, letters):
        letters = list(letters)
        if len(set(letters)) != len(letters):
            raise ValueError("duplicate letters in char vocab")
        for r in (UNK, EOS, SPACE):
            if r in letters:
                raise ValueError("reserved symbol %r cannot be a letter" % r)
        self.symbols = letters + [SPACE, UNK, EOS]
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.unk_id = self._ids[UNK]
        self.eos_id = self._ids[EOS]
        self.space_id = self._ids[SPACE]

    @classmethod
    def english(cls):
        """The 29-symbol paper-scale vocabulary: A-Z, unk, eos, space."""
        return cls([chr(c) for c in range(ord("A"), ord("Z") + 1)])

    def __len__(self):
        return len(self.symbols)

    @property
    def letters(self):
        return self.symbols[:-3]

    def encode(self, text):
        """Uppercase, collapse whitespace runs, map unknowns to unk."""
        ids = []
        for word in text.upper().split():
            if ids:
                ids.append(self.space_id)
            for ch in word:
                ids.append(self._ids.get(ch, self.unk_id))
        return ids

    def decode(self, ids):
        parts = []
        for i in ids:
            s = self.symbols[i]
            parts.append(" " if s == SPACE else s)
        return "".join(parts)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(s + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            symbols = [line.rstrip("\n") for line in f]
        if symbols[-3:] != [SPACE, UNK, EOS]:
            raise ValueError("char vocab file %s missing reserved tail" % path)
        return cls(symbols[:-3])


def _word_symbols(word, alphabet):
    """Split a word into base symbols, marker fused on the last one."""
    syms = [ch if ch in alphabet else UNK for ch in word]
    syms[-1] = syms[-1] + WORD_END
    return tuple(syms)


def _merge_word(syms, pair, joined):
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


class BpeModel:
    """An ordered merge list over a character alphabet.

    The vocabulary is fully determined by (alphabet, merges): base
    symbols in alphabet order, their word-final variants, then merge
    outputs in merge order.  Token ids index that list.
    """

    def __init__(self, letters, merges):
        self.letters = list(letters)
        alphabet = self.letters + [UNK]
        self._alphabet = set(alphabet)
        self.merges = [tuple(m) for m in merges]
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate pair in merge list")
        vocab = list(alphabet) + [s + WORD_END for s in alphabet]
        seen = set(vocab)
        for left, right in self.merges:
            joined = left + right
            if joined not in seen:
                vocab.append(joined)
                seen.add(joined)
        self.vocab = vocab
        self._ids = {s: i for i, s in enumerate(vocab)}
        self._encode_cache = {}

    def __len__(self):
        return len(self.vocab)

    def encode_word(self, word):
        """Token ids for one word; unknown characters become unk."""
        hit = self._encode_cache.get(word)
        if hit is not None:
            return hit
        syms = _word_symbols(word, self._alphabet)
        for pair in self.merges:
            if len(syms) < 2:
                break
            syms = _merge_word(syms, pair, pair[0] + pair[1])
        ids = [self._ids[s] for s in syms]
        self._encode_cache[word] = ids
        return ids

    def encode(self, words):
        ids = []
        for w in words:
            ids.extend(self.encode_word(w))
        return ids

    def encode_text(self, text):
        return self.encode(text.upper().split())

    def decode(self, ids):
        """Token ids back to a word list; inverse of encode."""
        parts = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise ValueError("unknown token id %r" % (i,))
            parts.append(self.vocab[i])
        words = "".join(parts).split(WORD_END)
        if words and words[-1] == "":
            words.pop()
        return [w for w in words if w]

    def decode_text(self, ids):
        return " ".join(self.decode(ids))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("bpe-v1 %d\n" % len(self.merges))
            for left, right in self.merges:
                f.write("%s %s\n" % (left, right))

    @classmethod
    def load(cls, path, letters):
        with open(path, encoding="utf-8") as f:
            header = f.readline().split()
            if len(header) != 2 or header[0] != "bpe-v1":
                raise ValueError("bad BPE model header in %s" % path)
            n = int(header[1])
            merges = []
            for line in f:
                left, sep, right = line.rstrip("\n").partition(" ")
                if not sep:
                    raise ValueError("bad merge line in %s: %r" % (path, line))
                merges.append((left, right))
        if len(merges) != n:
            raise ValueError("BPE model %s declares %d merges, has %d"
                             % (path, n, len(merges)))
        return cls(letters, merges)


def bpe_learn(corpus, num_merges, letters):
    """Learn a BpeModel from a word-frequency table.

    Repeatedly merges the most frequent adjacent symbol pair (count
    weighted by word frequency, every adjacent position counted).  Stops
    early once no pair occurs at least twice.
    """
    if not corpus:
        raise ValueError("bpe_learn: empty corpus")
    if num_merges < 0:
        raise ValueError("bpe_learn: num_merges must be >= 0")
    alphabet = set(letters) | {UNK}
    words = [(_word_symbols(w, alphabet), freq) for w, freq in corpus.items()]
    merges = []
    for _ in range(num_merges):
        counts = {}
        for syms, freq in words:
            for i in range(len(syms) - 1):
                p = (syms[i], syms[i + 1])
                counts[p] = counts.get(p, 0) + freq
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best[1] < 2:
            break
        pair = best[0]
        joined = pair[0] + pair[1]
        words = [(_merge_word(s, pair, joined), f) for s, f in words]
        merges.append(pair)
    return BpeModel(letters, merges)
