"""Tests for vocabulary and fixed word-vector construction."""

from collections import Counter

import numpy as np
import pytest

from persona_fusion.corpus import tokenize
from persona_fusion.vocab import (
    PAD_ID,
    SPECIAL_WORDS,
    UNK_ID,
    EmbeddingFormatError,
    Vocab,
    build_vocab,
    read_embeddings,
    record_texts,
)


@pytest.fixture
def vector_file(tmp_path):
    """Fixture with a word2vec-style text file of 4-dimensional vectors."""
    path = tmp_path / "vectors.txt"
    path.write_text("2 4\n? 1 2 3 4\nzebra 0.5 0.5 0.5 0.5\n", encoding="utf-8")
    return path


def test_specials_come_first(vocab):
    """Test that the special tokens hold ids 0 to 3."""
    assert tuple(vocab.words[:4]) == SPECIAL_WORDS
    assert vocab.chars[:2] == ["<pad>", "<unk>"]


def test_words_ordered_by_frequency(records, vocab):
    """Test descending frequency order with alphabetical ties."""
    counts = Counter(token for record in records for text in record_texts(record) for token in tokenize(text))
    words = vocab.words[4:]

    assert set(words) == set(counts)
    assert words == sorted(words, key=lambda w: (-counts[w], w))


def test_fixed_table_shape_and_special_rows(vocab):
    """Test the fixed table width and zero rows for special tokens."""
    assert vocab.fixed.shape == (len(vocab), 7)
    assert vocab.fixed_dim == 7
    np.testing.assert_array_equal(vocab.fixed[:4], np.zeros((4, 7)))


def test_build_is_deterministic(records, vocab):
    """Test that the same corpus and seed give the same vocabulary."""
    again = build_vocab(records, pretrained_dim=4, corpus_dim=3, seed=0)

    assert again.words == vocab.words
    np.testing.assert_array_equal(again.fixed, vocab.fixed)


def test_word_ids_and_decode(vocab):
    """Test id lookup with unknown words and decoding without padding."""
    ids = vocab.word_ids(["i", "xylophones"])

    assert ids[1] == UNK_ID
    assert vocab.decode([ids[0], PAD_ID]) == ["i"]


def test_char_matrix(vocab):
    """Test per-word character ids."""
    row = vocab.char_matrix[vocab.word_to_id["i"]]

    assert row[0] == vocab.char_to_id["i"]
    assert (row[1:] == 0).all()
    assert (vocab.char_matrix[PAD_ID] == 0).all()


def test_pretrained_vectors_from_file(records, vector_file):
    """Test that file vectors fill the pretrained part and missing words get zero rows."""
    vocab = build_vocab(records, pretrained_path=vector_file, pretrained_dim=4, corpus_dim=3)

    np.testing.assert_array_equal(vocab.fixed[vocab.word_to_id["?"], :4], [1, 2, 3, 4])
    np.testing.assert_array_equal(vocab.fixed[vocab.word_to_id["i"], :4], np.zeros(4))
    assert np.any(vocab.fixed[vocab.word_to_id["i"], 4:] != 0)


def test_read_embeddings_skips_header(vector_file):
    """Test reading an embedding file with a header line."""
    vectors = read_embeddings(vector_file, 4)

    assert set(vectors) == {"?", "zebra"}


def test_read_embeddings_dimension_mismatch(vector_file):
    """Test that a dimension mismatch names the token."""
    with pytest.raises(EmbeddingFormatError, match="'\\?' at line 2 has 4 values, expected 3"):
        read_embeddings(vector_file, 3)


def test_vocab_requires_specials():
    """Test that a vocabulary must start with the special tokens."""
    with pytest.raises(ValueError, match="must start with"):
        Vocab(words=["hello"], chars=["<pad>", "<unk>"], fixed=np.zeros((1, 2)), pretrained_dim=1, corpus_dim=1)
