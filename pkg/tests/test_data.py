from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cushionlab.data import (
    BOS,
    VOCAB_SIZE,
    Corpus,
    CorpusError,
    bundled_corpus_path,
    detokenize,
    sample_batch,
    sample_sequence,
    tokenize,
)


def test_byte_identity():
    assert tokenize("A").tolist() == [65]
    assert tokenize("\n").tolist() == [10]
    assert BOS == 256 and VOCAB_SIZE == 257


@settings(max_examples=300)
@given(st.text())
def test_round_trip(s):
    assert detokenize(tokenize(s)) == s


def test_detokenize_drops_specials_and_rejects_range():
    assert detokenize([BOS, 104, 105]) == "hi"
    with pytest.raises(ValueError):
        detokenize([257])
    with pytest.raises(ValueError):
        detokenize([-1])


def test_bundled_corpus_round_trips():
    text = bundled_corpus_path().read_text(encoding="utf-8")
    assert 150_000 < len(text.encode()) < 300_000
    assert detokenize(tokenize(text)) == text


def test_splits_disjoint_and_nonempty():
    c = Corpus.load()
    total = len(tokenize(bundled_corpus_path().read_text(encoding="utf-8")))
    assert len(c.train) + len(c.heldout) == total
    assert len(c.train) == int(total * 0.9) and len(c.heldout) > 0
    assert c.get("heldout") is c.heldout


@pytest.mark.parametrize("text,split", [("ab", 0.1), ("abc", 1.0), ("abc", 0.0)])
def test_bad_splits(text, split):
    with pytest.raises(CorpusError):
        Corpus.from_text(text, split)


def test_missing_corpus(tmp_path):
    with pytest.raises(CorpusError):
        Corpus.load(tmp_path / "nope.txt")
    (tmp_path / "empty.txt").write_text("")
    with pytest.raises(CorpusError):
        Corpus.load(tmp_path / "empty.txt")


def test_full_length_window_is_whole_split():
    tokens = np.arange(50)
    np.testing.assert_array_equal(sample_sequence(tokens, 50, seed=3), tokens)


def test_too_short():
    with pytest.raises(CorpusError):
        sample_sequence(np.arange(5), 6, seed=0)


def test_sampling_deterministic():
    c = Corpus.load()
    a = sample_batch(c.train, 64, 4, seed=11)
    b = sample_batch(c.train, 64, 4, seed=11)
    assert a.tobytes() == b.tobytes()


def test_different_seeds_differ():
    c = Corpus.load()
    same = sum(np.array_equal(sample_sequence(c.train, 32, s, i), sample_sequence(c.train, 32, s + 1, i))
               for s in range(10) for i in range(10))
    assert same == 0
