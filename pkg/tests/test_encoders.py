"""Tests for word representation and the sentence/context encoders."""

import numpy as np
import pytest

from persona_fusion.autodiff import Tensor
from persona_fusion.encoders import WordEmbedder, embed_words, encode_context, encode_sentence
from persona_fusion.layers import CharConvParams, LstmParams
from persona_fusion.vocab import PAD_ID


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.fixture
def embedder(vocab, rng):
    return WordEmbedder(vocab, char_dim=3, widths=(2, 3), filters=2, rng=rng)


def test_embed_words_layout(vocab, embedder):
    """Test [fixed ; character] layout and zero vectors at padding."""
    word = vocab.word_to_id["i"]
    out = embedder(np.array([[word, PAD_ID]]))

    assert out.shape == (1, 2, embedder.output_dim)
    assert embedder.output_dim == 7 + 4
    np.testing.assert_array_equal(out.values[0, 0, :7], vocab.fixed[word])
    np.testing.assert_array_equal(out.values[0, 1], np.zeros(11))


def test_fixed_vectors_receive_no_gradient(vocab, embedder):
    """Test that only the character part is trainable."""
    assert set(embedder.parameters()) == {
        "chars.char_table",
        "chars.weights.w2",
        "chars.weights.w3",
        "chars.biases.w2",
        "chars.biases.w3",
    }


def test_embed_words_rejects_unknown_ids(vocab, rng):
    """Test that ids outside the vocabulary raise."""
    params = CharConvParams(len(vocab.chars), 3, (2,), 2, rng)
    with pytest.raises(ValueError, match="out of range"):
        embed_words(np.array([len(vocab)]), vocab, params)


def test_encode_sentence_pooled_width(embedder, vocab, rng):
    """Test that pooled aggregates are 4h wide and a single sentence becomes a batch of one."""
    params = LstmParams(embedder.output_dim, 3, rng)
    ids = vocab.word_ids(["i", "love", "?"])
    encoded = encode_sentence(embedder(ids), 3, params)

    assert encoded.hiddens.shape == (1, 3, 6)
    assert encoded.pooled.shape == (1, 12)
    assert encoded.lengths.tolist() == [3]


def test_encode_sentence_ignores_padding(embedder, vocab, rng):
    """Test that trailing padding does not change the aggregate."""
    params = LstmParams(embedder.output_dim, 3, rng)
    ids = vocab.word_ids(["i", "love", "?"])
    padded = np.concatenate([ids, [PAD_ID, PAD_ID]])

    short = encode_sentence(embedder(ids), 3, params).pooled.values
    long = encode_sentence(embedder(padded), 3, params).pooled.values
    np.testing.assert_allclose(short, long, atol=1e-12)


def test_encode_context(rng):
    """Test the context aggregate over utterance aggregates."""
    params = LstmParams(8, 2, rng)
    aggregates = Tensor(rng.normal(size=(3, 8)))

    encoded = encode_context(aggregates, 2, params)

    assert encoded.pooled.shape == (8,)
    assert encoded.context_hiddens.shape == (3, 4)
    np.testing.assert_array_equal(encoded.context_hiddens.values[2], np.zeros(4))


def test_encode_context_ablated_is_zero(rng):
    """Test that the ablated context aggregate is the zero vector."""
    encoded = encode_context(None, 0, LstmParams(8, 2, rng), ablated=True)

    np.testing.assert_array_equal(encoded.pooled.values, np.zeros(8))
    assert encoded.context_hiddens is None


def test_encode_context_empty(rng):
    """Test that an empty context raises outside ablated mode."""
    with pytest.raises(ValueError, match="empty context"):
        encode_context(None, 0, LstmParams(8, 2, rng))
