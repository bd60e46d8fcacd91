"""Word representation, the shared sentence encoder and the hierarchical context encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from persona_fusion.autodiff import Tensor, concat, take_rows
from persona_fusion.layers import (
    EVAL,
    CharConvParams,
    Dropout,
    LstmParams,
    Module,
    bilstm_encode,
    char_conv_embed,
    pool_max_last,
)
from persona_fusion.vocab import PAD_ID, Vocab


@dataclass
class EncodedSentence:
    """BiLSTM states of a batch of sentences.

    Attributes:
        hiddens: ``(n, capacity, 2h)``, zero at padding
        lengths: ``(n,)`` valid token counts
        pooled: ``(n, 4h)`` [max over valid states ; state at length-1]
    """

    hiddens: Tensor
    lengths: np.ndarray
    pooled: Tensor


@dataclass
class EncodedContext:
    """Second-level encoding of a context; ``pooled`` is the context aggregate."""

    utterance_aggregates: Tensor | None
    context_hiddens: Tensor | None
    pooled: Tensor


def embed_words(
    token_ids: np.ndarray, vocab: Vocab, char_params: CharConvParams, dropout: Dropout = EVAL
) -> Tensor:
    """Per-token vectors [pretrained ; corpus-estimated ; character convolution].

    The two word-vector parts come from the vocabulary's fixed table and never receive
    gradient. The character part is computed once per distinct id. Padding positions
    are the zero vector in every part.

    Args:
        token_ids: Integer array of any shape
        vocab: Vocabulary holding the fixed table and word spellings
        char_params: Character embedding table and filters
        dropout: Applied to the concatenated vectors

    Raises:
        ValueError: If an id is outside the vocabulary
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(vocab)):
        raise ValueError(f"token id out of range for vocabulary of {len(vocab)} words")
    dtype = char_params.char_table.dtype
    fixed = Tensor(vocab.fixed[ids].astype(dtype, copy=False))
    unique, inverse = np.unique(ids, return_inverse=True)
    char_vectors = char_conv_embed(vocab.char_matrix[unique], char_params)
    chars = take_rows(char_vectors, inverse.reshape(ids.shape))
    mask = (ids != PAD_ID)[..., None].astype(dtype)
    return dropout(concat([fixed, chars], axis=-1) * mask)


class WordEmbedder(Module):
    """Trainable character convolution on top of a vocabulary's fixed word vectors."""

    def __init__(
        self,
        vocab: Vocab,
        char_dim: int,
        widths: tuple[int, ...],
        filters: int,
        rng: np.random.Generator,
        dtype: str = "float64",
    ):
        self._vocab = vocab
        self.chars = CharConvParams(len(vocab.chars), char_dim, widths, filters, rng, dtype)

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    @property
    def output_dim(self) -> int:
        return self._vocab.fixed_dim + self.chars.output_dim

    def __call__(self, token_ids: np.ndarray, dropout: Dropout = EVAL) -> Tensor:
        return embed_words(token_ids, self._vocab, self.chars, dropout)


def encode_sentence(
    embedded: Tensor, lengths: np.ndarray | int, params: LstmParams, dropout: Dropout = EVAL
) -> EncodedSentence:
    """Encode sentences with the shared BiLSTM and pool them.

    Args:
        embedded: ``(n, capacity, d)`` word vectors (or one ``(capacity, d)`` sentence)
        lengths: Valid lengths, each at least 1
        params: Sentence BiLSTM shared by utterances, profiles and responses
        dropout: Applied to the hidden states

    Returns:
        The encoded batch; a single sentence comes back as a batch of one
    """
    if embedded.ndim == 2:
        embedded = embedded.reshape(1, *embedded.shape)
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    hiddens = dropout(bilstm_encode(embedded, lengths, params))
    return EncodedSentence(hiddens=hiddens, lengths=lengths, pooled=pool_max_last(hiddens, lengths))


def encode_context(
    utterance_aggregates: Tensor | None,
    count: int,
    params: LstmParams,
    ablated: bool = False,
    dropout: Dropout = EVAL,
) -> EncodedContext:
    """Run the context BiLSTM over utterance aggregates in turn order.

    Args:
        utterance_aggregates: ``(capacity, 4h)`` or batched ``(b, capacity, 4h)`` aggregates
        count: Number of valid utterances (per batch row when batched)
        params: Context BiLSTM, separate from the sentence encoder
        ablated: Context-ablated mode; the aggregate is the zero vector
        dropout: Applied to the context states

    Raises:
        ValueError: "empty context" when ``count`` is 0 outside ablated mode
    """
    if ablated:
        return EncodedContext(None, None, Tensor(np.zeros(4 * params.hidden_dim, dtype=params.fw_bias.dtype)))
    counts = np.atleast_1d(np.asarray(count, dtype=np.int64))
    if utterance_aggregates is None or (counts <= 0).any():
        raise ValueError("empty context")
    hiddens = dropout(bilstm_encode(utterance_aggregates, count, params))
    return EncodedContext(
        utterance_aggregates=utterance_aggregates,
        context_hiddens=hiddens,
        pooled=pool_max_last(hiddens, count),
    )
