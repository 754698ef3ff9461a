import numpy as np
import pytest

from stagedasr import tokenizer as tok
from stagedasr.tokenizer import BpeModel, CharVocab, bpe_learn


# independent reference: the classic space-joined-string formulation
def oracle_learn(corpus, num_merges, letters):
    alphabet = set(letters) | {tok.UNK}

    def split(word):
        syms = [c if c in alphabet else tok.UNK for c in word]
        syms[-1] += tok.WORD_END
        return " ".join(syms)

    table = {split(w): f for w, f in corpus.items()}
    merges = []
    for _ in range(num_merges):
        counts = {}
        for joined, freq in table.items():
            syms = joined.split(" ")
            for a, b in zip(syms, syms[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + freq
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if not ranked or ranked[0][1] < 2:
            break
        pair = ranked[0][0]
        new_table = {}
        for joined, freq in table.items():
            syms = joined.split(" ")
            out, i = [], 0
            while i < len(syms):
                if (i + 1 < len(syms) and syms[i] == pair[0]
                        and syms[i + 1] == pair[1]):
                    out.append(pair[0] + pair[1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new_table[" ".join(out)] = new_table.get(" ".join(out), 0) + freq
        table = new_table
        merges.append(pair)
    return merges


def test_char_vocab_paper_scale_is_29():
    assert len(CharVocab.english()) == 29


def test_char_vocab_reserved_unique_and_ordered():
    v = CharVocab(["A", "B"])
    assert v.symbols == ["A", "B", tok.SPACE, tok.UNK, tok.EOS]
    assert v.eos_id == len(v) - 1


def test_char_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        CharVocab(["A", "A"])


def test_char_encode_examples():
    v = CharVocab.english()
    assert v.encode("AB C") == [v.encode("A")[0], v.encode("B")[0],
                                v.space_id, v.encode("C")[0]]
    assert v.encode("a") == v.encode("A")
    assert v.encode("#") == [v.unk_id]


def test_char_encode_collapses_whitespace():
    v = CharVocab.english()
    assert v.encode("A   B") == v.encode("A B")
    assert v.decode(v.encode("HELLO THERE")) == "HELLO THERE"


def test_char_vocab_file_round_trip(tmp_path):
    v = CharVocab(list("ABCDEFGHIJKL"))
    p = tmp_path / "chars.txt"
    v.save(p)
    v2 = CharVocab.load(p)
    assert v2.symbols == v.symbols
    v2.save(tmp_path / "chars2.txt")
    assert (tmp_path / "chars.txt").read_bytes() == (tmp_path / "chars2.txt").read_bytes()


def test_bpe_learn_low_lowest_first_merge():
    model = bpe_learn({"LOW": 2, "LOWEST": 1}, 1, list("LOWEST"))
    assert model.merges == [("L", "O")]


def test_bpe_zero_merges_pure_characters():
    model = bpe_learn({"AB": 3}, 0, ["A", "B"])
    assert model.merges == []
    syms = [model.vocab[i] for i in model.encode_word("AB")]
    assert syms == ["A", "B" + tok.WORD_END]


def test_bpe_single_word_fully_merges():
    word = "ABCD"
    model = bpe_learn({word: 5}, len(word) - 1, list(word))
    assert len(model.encode_word(word)) == 1
    assert model.vocab[model.encode_word(word)[0]] == word + tok.WORD_END


def test_bpe_learn_matches_oracle_random_corpora():
    rng = np.random.default_rng(21)
    letters = list("ABCDEF")
    for trial in range(30):
        n_words = int(rng.integers(2, 9))
        corpus = {}
        for _ in range(n_words):
            w = "".join(rng.choice(letters, size=rng.integers(1, 7)))
            corpus[w] = corpus.get(w, 0) + int(rng.integers(1, 6))
        n_merges = int(rng.integers(0, 12))
        got = bpe_learn(corpus, n_merges, letters).merges
        want = oracle_learn(corpus, n_merges, letters)
        assert got == want, f"trial {trial}: {got} != {want}"


def test_bpe_stops_when_no_pair_repeats():
    model = bpe_learn({"AB": 1, "CD": 1}, 10, list("ABCD"))
    assert model.merges == []


def test_bpe_round_trip_random_strings():
    rng = np.random.default_rng(22)
    letters = list("ABCDEFGH")
    corpus = {"".join(rng.choice(letters, size=rng.integers(2, 8))): int(rng.integers(1, 9))
              for _ in range(20)}
    model = bpe_learn(corpus, 30, letters)
    for _ in range(200):
        words = ["".join(rng.choice(letters, size=rng.integers(1, 9)))
                 for _ in range(rng.integers(1, 5))]
        assert model.decode(model.encode(words)) == words


def test_bpe_unknown_char_fallback():
    model = bpe_learn({"AB": 2}, 1, ["A", "B"])
    ids = model.encode_word("A#")
    assert model.vocab[ids[1]] == tok.UNK + tok.WORD_END
    ids = model.encode_word("#B")
    assert model.vocab[ids[0]] == tok.UNK


def test_bpe_decode_examples():
    model = BpeModel(list("LOW"), [("L", "O"), ("LO", "W" + tok.WORD_END)])
    lo = model.vocab.index("LO")
    wend = model.vocab.index("W" + tok.WORD_END)
    assert model.decode([lo, wend]) == ["LOW"]
    assert model.decode([]) == []
    with pytest.raises(ValueError):
        model.decode([len(model.vocab)])


def test_bpe_closure_every_token_in_vocab():
    rng = np.random.default_rng(23)
    letters = list("ABCDE")
    corpus = {"".join(rng.choice(letters, size=rng.integers(2, 7))): 3
              for _ in range(12)}
    model = bpe_learn(corpus, 25, letters)
    for _ in range(100):
        w = "".join(rng.choice(letters + ["#"], size=rng.integers(1, 8)))
        for i in model.encode_word(w):
            assert 0 <= i < len(model.vocab)


def test_bpe_monotone_compression():
    rng = np.random.default_rng(24)
    letters = list("ABCD")
    corpus = {"".join(rng.choice(letters, size=rng.integers(2, 7))): int(rng.integers(1, 7))
              for _ in range(15)}
    full = bpe_learn(corpus, 40, letters)
    words = ["".join(rng.choice(letters, size=rng.integers(1, 8))) for _ in range(50)]
    prev_counts = None
    for k in range(len(full.merges) + 1):
        model = BpeModel(letters, full.merges[:k])
        counts = [len(model.encode_word(w)) for w in words]
        if prev_counts is not None:
            assert all(c <= p for c, p in zip(counts, prev_counts))
        prev_counts = counts


def test_bpe_determinism():
    corpus = {"ABAB": 4, "ABC": 2, "BCA": 3}
    a = bpe_learn(corpus, 6, list("ABC")).merges
    b = bpe_learn(corpus, 6, list("ABC")).merges
    assert a == b


def test_bpe_file_round_trip_bit_exact(tmp_path):
    corpus = {"LOW": 2, "LOWEST": 1, "NEWEST": 3}
    letters = sorted(set("".join(corpus)))
    model = bpe_learn(corpus, 8, letters)
    p1 = tmp_path / "m1.bpe"
    model.save(p1)
    loaded = BpeModel.load(p1, letters)
    assert loaded.merges == model.merges
    assert loaded.vocab == model.vocab
    p2 = tmp_path / "m2.bpe"
    loaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bpe_load_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.bpe"
    p.write_text("nonsense 3\n")
    with pytest.raises(ValueError):
        BpeModel.load(p, ["A"])


def test_bpe_learn_rejects_empty_corpus():
    with pytest.raises(ValueError):
        bpe_learn({}, 5, ["A"])
