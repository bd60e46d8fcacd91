"""Recurrent response-selection matchers with persona fusion.

Both families encode utterances, profiles and candidates with one shared sentence
BiLSTM, fuse the persona with the configured strategy and score each candidate
with an MLP over [context ; persona ; response]. The interactive family first
aligns every candidate against the concatenated context tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from persona_fusion.autodiff import Tensor, concat, log_softmax, softplus, take_rows
from persona_fusion.config import TrainConfig
from persona_fusion.corpus import MatchingExample, SentenceBlock, TrainingInstance
from persona_fusion.encoders import EncodedSentence, WordEmbedder, encode_context, encode_sentence
from persona_fusion.fusion import FusionParams, FusionWeights, fuse
from persona_fusion.layers import (
    EVAL,
    Dropout,
    Linear,
    LstmParams,
    Module,
    bilstm_encode,
    masked_softmax,
    pool_max_last,
)
from persona_fusion.models import Family, Strategy
from persona_fusion.vocab import Vocab


@dataclass
class MatchScores:
    """Per-candidate logits plus the persona fusion weights behind them (None without persona)."""

    logits: Tensor
    fusion: FusionWeights | None = None


def softmax_loss(logits: Tensor, label: int) -> Tensor:
    """Cross-entropy of the true candidate under a softmax over the candidate set."""
    return -log_softmax(logits)[label]


def binary_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    targets = np.asarray(targets, dtype=logits.dtype)
    return (softplus(logits) - logits * targets).mean()


def tile(vector: Tensor, count: int) -> Tensor:
    """Repeat a ``(d,)`` vector into ``(count, d)`` rows; gradients sum back."""
    return Tensor(np.ones((count, 1), dtype=vector.dtype)) @ vector.reshape(1, -1)


class Matcher(Module):
    """Common interface of every model family."""

    family: Family

    def __init__(self, config: TrainConfig, vocab: Vocab):
        if (vocab.pretrained_dim, vocab.corpus_dim) != (config.pretrained_dim, config.corpus_dim):
            raise ValueError(
                f"vocabulary vectors are {vocab.pretrained_dim}+{vocab.corpus_dim} wide, "
                f"config expects {config.pretrained_dim}+{config.corpus_dim}"
            )
        self._config = config
        self._vocab = vocab

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    @property
    def strategy(self) -> Strategy:
        return self._config.strategy

    def score(self, example: MatchingExample, dropout: Dropout = EVAL) -> MatchScores:
        raise NotImplementedError

    def ranking_scores(self, example: MatchingExample) -> np.ndarray:
        """Scores used to rank candidates in evaluation mode."""
        return self.score(example).logits.values

    def loss(self, instance: TrainingInstance, dropout: Dropout = EVAL) -> Tensor:
        logits = self.score(instance.example, dropout).logits
        if self._config.loss == "softmax":
            return softmax_loss(logits, int(np.argmax(instance.targets)))
        return binary_loss(logits, instance.targets)


class HreMatcher(Matcher):
    """Hierarchical recurrent encoder scorer."""

    family = Family.HRE

    def __init__(self, config: TrainConfig, vocab: Vocab, rng: np.random.Generator):
        super().__init__(config, vocab)
        dtype = config.dtype
        hidden, context_hidden = config.hidden_dim, config.context_hidden_dim
        self.embedder = WordEmbedder(
            vocab, config.char_embedding_dim, config.char_window_widths, config.char_filters, rng, dtype
        )
        self.sentence = LstmParams(self.embedder.output_dim, hidden, rng, dtype)
        self.context = LstmParams(4 * hidden, context_hidden, rng, dtype)
        self.fusion = FusionParams(config.strategy, 4 * hidden, 4 * context_hidden, 4 * hidden, rng, dtype)
        self.mlp_hidden = Linear(4 * context_hidden + 8 * hidden, config.mlp_hidden, rng, dtype)
        self.mlp_output = Linear(config.mlp_hidden, 1, rng, dtype)

    @property
    def aggregate_dim(self) -> int:
        return 4 * self._config.hidden_dim

    @property
    def context_dim(self) -> int:
        return 4 * self._config.context_hidden_dim

    def encode_block(self, block: SentenceBlock, dropout: Dropout = EVAL) -> EncodedSentence:
        """Encode every sentence of a block; all lengths must be positive."""
        return encode_sentence(self.embedder(block.ids, dropout), block.lengths, self.sentence, dropout)

    def encode_persona(self, example: MatchingExample, dropout: Dropout = EVAL) -> tuple[Tensor, np.ndarray] | None:
        """Profile aggregates with zero rows at padded profiles, or None when the persona is empty."""
        mask = example.persona.mask
        valid = np.flatnonzero(mask)
        if valid.size == 0:
            return None
        pooled = self.encode_block(example.persona.take(valid), dropout).pooled
        table = concat([pooled, Tensor(np.zeros((1, pooled.shape[1]), dtype=pooled.dtype))], axis=0)
        index = np.full(mask.shape[0], valid.size)
        index[valid] = np.arange(valid.size)
        return take_rows(table, index), mask

    def context_aggregate(self, example: MatchingExample, dropout: Dropout = EVAL) -> Tensor:
        if example.persona_config.ablate_context:
            return encode_context(None, 0, self.context, ablated=True).pooled
        utterances = self.encode_block(example.context, dropout)
        return encode_context(utterances.pooled, example.context_count, self.context, dropout=dropout).pooled

    def fuse_persona(
        self, example: MatchingExample, context: Tensor, responses: Tensor, dropout: Dropout = EVAL
    ) -> tuple[Tensor, FusionWeights | None]:
        encoded = self.encode_persona(example, dropout)
        count = responses.shape[0]
        if encoded is None:
            return Tensor(np.zeros((count, self.aggregate_dim), dtype=responses.dtype)), None
        profiles, mask = encoded
        return fuse(self.fusion, profiles, mask, context, responses)

    def head(self, context: Tensor, persona: Tensor, responses: Tensor, dropout: Dropout = EVAL) -> Tensor:
        """MLP over m = [context ; persona ; response], one logit per candidate."""
        features = concat([context, persona, responses], axis=-1)
        hidden = dropout(self.mlp_hidden(features).relu())
        return self.mlp_output(hidden).reshape(responses.shape[0])

    def score(self, example: MatchingExample, dropout: Dropout = EVAL) -> MatchScores:
        responses = self.encode_block(example.candidates, dropout).pooled
        context = self.context_aggregate(example, dropout)
        persona, weights = self.fuse_persona(example, context, responses, dropout)
        logits = self.head(tile(context, responses.shape[0]), persona, responses, dropout)
        return MatchScores(logits=logits, fusion=weights)


def hre_score(example: MatchingExample, matcher: HreMatcher, dropout: Dropout = EVAL) -> Tensor:
    """One raw logit per candidate; training applies a softmax over the set."""
    return matcher.score(example, dropout).logits


def enhance(x: Tensor, aligned: Tensor) -> Tensor:
    """[x ; aligned ; x - aligned ; x * aligned]."""
    return concat([x, aligned, x - aligned, x * aligned], axis=-1)


def imn_interact(
    context_hiddens: Tensor, response_hiddens: Tensor, response_lengths: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Global bidirectional cross-attention between context tokens and response tokens.

    ``e_ik = c_i . r_k``; each context token is aligned to the attention-weighted sum
    of response tokens and vice versa, then both sides are enhanced.

    Args:
        context_hiddens: ``(l_c, d)`` token states of all utterances concatenated
        response_hiddens: ``(l_r, d)`` or a padded batch ``(C, l_r, d)`` of candidates
        response_lengths: Valid lengths of a batch (all positions valid when None)

    Returns:
        Enhanced context ``(l_c, 4d)`` and response ``(l_r, 4d)``, with a leading candidate
        axis for batched responses
    """
    single = response_hiddens.ndim == 2
    responses = response_hiddens.reshape(1, *response_hiddens.shape) if single else response_hiddens
    count, capacity, _ = responses.shape
    lengths = np.full(count, capacity) if response_lengths is None else np.asarray(response_lengths, dtype=np.int64)
    if context_hiddens.shape[0] == 0 or capacity == 0 or (lengths <= 0).any():
        raise ValueError("empty sequence")

    scores = context_hiddens @ responses.transpose(0, 2, 1)
    valid = (np.arange(capacity)[None, :] < lengths[:, None])[:, None, :]
    context_aligned = masked_softmax(scores, valid) @ responses
    response_aligned = masked_softmax(scores.transpose(0, 2, 1)) @ context_hiddens

    context_batch = context_hiddens.reshape(1, *context_hiddens.shape) + Tensor(
        np.zeros((count, 1, 1), dtype=context_hiddens.dtype)
    )
    enhanced_context = enhance(context_batch, context_aligned)
    enhanced_response = enhance(responses, response_aligned)
    if single:
        return enhanced_context[0], enhanced_response[0]
    return enhanced_context, enhanced_response


class ImnMatcher(HreMatcher):
    """Interactive matching network: HRE modules plus cross-attention and a composition BiLSTM."""

    family = Family.IMN

    def __init__(self, config: TrainConfig, vocab: Vocab, rng: np.random.Generator):
        super().__init__(config, vocab, rng)
        hidden = config.hidden_dim
        composed_input = 8 * hidden if config.use_interaction else 2 * hidden
        self.composition = LstmParams(composed_input, hidden, rng, config.dtype)

    def _compose(self, sequences: Tensor, lengths: np.ndarray, dropout: Dropout) -> Tensor:
        return pool_max_last(dropout(bilstm_encode(sequences, lengths, self.composition)), lengths)

    def score(self, example: MatchingExample, dropout: Dropout = EVAL) -> MatchScores:
        candidates = self.encode_block(example.candidates, dropout)
        count = candidates.hiddens.shape[0]
        interact = self._config.use_interaction

        if example.persona_config.ablate_context:
            enhanced = candidates.hiddens
            if interact:
                enhanced = enhance(enhanced, Tensor(np.zeros(enhanced.shape, dtype=enhanced.dtype)))
            responses = self._compose(enhanced, candidates.lengths, dropout)
            context = tile(encode_context(None, 0, self.context, ablated=True).pooled, count)
        else:
            utterances = self.encode_block(example.context, dropout)
            rows, cols = np.nonzero(np.arange(utterances.hiddens.shape[1])[None, :] < utterances.lengths[:, None])
            flat_context = utterances.hiddens[rows, cols]
            if interact:
                enhanced_context, enhanced = imn_interact(flat_context, candidates.hiddens, candidates.lengths)
            else:
                enhanced = candidates.hiddens
                enhanced_context = flat_context.reshape(1, *flat_context.shape) + Tensor(
                    np.zeros((count, 1, 1), dtype=flat_context.dtype)
                )
            responses = self._compose(enhanced, candidates.lengths, dropout)

            # split the concatenated context back into utterances; padding points at a zero row
            n_utt, capacity = utterances.hiddens.shape[:2]
            total = flat_context.shape[0]
            index = np.full((n_utt, capacity), total)
            index[rows, cols] = np.arange(total)
            width = enhanced_context.shape[-1]
            padded = concat([enhanced_context, Tensor(np.zeros((count, 1, width), dtype=enhanced_context.dtype))], 1)
            per_utterance = padded[:, index].reshape(count * n_utt, capacity, width)
            aggregates = self._compose(per_utterance, np.tile(utterances.lengths, count), dropout)
            encoded = encode_context(
                aggregates.reshape(count, n_utt, aggregates.shape[-1]),
                np.full(count, n_utt),
                self.context,
                dropout=dropout,
            )
            context = encoded.pooled

        persona, weights = self.fuse_persona(example, context, responses, dropout)
        logits = self.head(context, persona, responses, dropout)
        return MatchScores(logits=logits, fusion=weights)


def imn_score(example: MatchingExample, matcher: ImnMatcher, dropout: Dropout = EVAL) -> Tensor:
    return matcher.score(example, dropout).logits
