"""A small transformer-encoder matcher and its persona input arrangements.

Sequences follow the ``[CLS] A [SEP] B [SEP]`` convention with segment ids for A/B.
The joint arrangement (persona and context in A, response in B) adds a third,
subtype embedding marking persona, context and response tokens.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, Field, model_validator

from persona_fusion.autodiff import Tensor, concat, gelu, take_rows
from persona_fusion.config import TrainConfig
from persona_fusion.corpus import MatchingExample
from persona_fusion.layers import EVAL, Dropout, LayerNormParams, Linear, Module, layer_norm, masked_softmax, parameter
from persona_fusion.matchers import Matcher, MatchScores
from persona_fusion.models import Family, Strategy
from persona_fusion.vocab import CLS_ID, PAD_ID, SEP_ID, Vocab

logger = logging.getLogger(__name__)

SUBTYPE_PERSONA, SUBTYPE_CONTEXT, SUBTYPE_RESPONSE = 0, 1, 2


class TransformerConfig(BaseModel):
    """Shape of the transformer encoder."""

    layers: int = Field(4, ge=1, description="Encoder blocks")
    heads: int = Field(4, ge=1, description="Attention heads per block")
    model_dim: int = Field(128, ge=1, description="Hidden width")
    ff_dim: int = Field(512, ge=1, description="Feed-forward width")
    max_seq_len: int = Field(320, ge=4, description="Rows of the position table")
    vocab_size: int = Field(..., ge=4, description="Rows of the token table")
    use_subtype: bool = Field(True, description="Add subtype embeddings")
    dropout: float = Field(0.1, ge=0, lt=1, description="Dropout on embeddings, attention and feed-forward outputs")

    @model_validator(mode="after")
    def check_heads(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        return self

    @classmethod
    def from_train_config(cls, config: TrainConfig, vocab_size: int) -> TransformerConfig:
        """Subtype embeddings only apply to the single-stream arrangement."""
        return cls(
            layers=config.transformer_layers,
            heads=config.transformer_heads,
            model_dim=config.transformer_dim,
            ff_dim=config.transformer_ff,
            max_seq_len=config.max_seq_len,
            vocab_size=vocab_size,
            use_subtype=config.use_subtype and config.strategy == Strategy.CRA,
            dropout=config.dropout,
        )


def _embedding(rng: np.random.Generator, rows: int, dim: int, dtype: str) -> Tensor:
    return parameter(rng.normal(0.0, 0.02, size=(rows, dim)).astype(dtype))


class EncoderBlock(Module):
    def __init__(self, config: TransformerConfig, rng: np.random.Generator, dtype: str):
        d = config.model_dim
        self.query = Linear(d, d, rng, dtype)
        self.key = Linear(d, d, rng, dtype)
        self.value = Linear(d, d, rng, dtype)
        self.attention_output = Linear(d, d, rng, dtype)
        self.attention_norm = LayerNormParams(d, dtype)
        self.ff_in = Linear(d, config.ff_dim, rng, dtype)
        self.ff_out = Linear(config.ff_dim, d, rng, dtype)
        self.ff_norm = LayerNormParams(d, dtype)


class TransformerParams(Module):
    """Token, position, segment and subtype tables, embedding norm and encoder blocks."""

    def __init__(self, config: TransformerConfig, rng: np.random.Generator, dtype: str = "float64"):
        d = config.model_dim
        self.tokens = _embedding(rng, config.vocab_size, d, dtype)
        self.positions = _embedding(rng, config.max_seq_len, d, dtype)
        self.segments = _embedding(rng, 2, d, dtype)
        self.subtypes = _embedding(rng, 3, d, dtype)
        self.embedding_norm = LayerNormParams(d, dtype)
        self.blocks = [EncoderBlock(config, rng, dtype) for _ in range(config.layers)]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, dim = x.shape
    return x.reshape(batch, length, heads, dim // heads).transpose(0, 2, 1, 3)


def transformer_encode(
    token_ids: np.ndarray,
    segment_ids: np.ndarray,
    subtype_ids: np.ndarray,
    attn_mask: np.ndarray,
    config: TransformerConfig,
    params: TransformerParams,
    dropout: Dropout = EVAL,
) -> Tensor:
    """Encode padded sequences; position 0 of each output row is the classification embedding.

    Args:
        token_ids: ``(batch, length)`` or ``(length,)`` token ids
        segment_ids: Same shape, 0 for sequence A and 1 for sequence B
        subtype_ids: Same shape, 0 persona, 1 context, 2 response
        attn_mask: True at real tokens; padded keys are never attended
        config: Encoder shape
        params: Encoder parameters
        dropout: Applied to embeddings, attention output and feed-forward output

    Returns:
        ``(batch, length, model_dim)`` states (no batch axis for 1-D input)

    Raises:
        ValueError: If the sequence is longer than ``max_seq_len``
    """
    single = np.ndim(token_ids) == 1
    ids, segments, subtypes, mask = (
        np.atleast_2d(np.asarray(a)) for a in (token_ids, segment_ids, subtype_ids, attn_mask)
    )
    length = ids.shape[1]
    if length > config.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len {config.max_seq_len}")

    x = take_rows(params.tokens, ids) + params.positions[:length] + take_rows(params.segments, segments)
    if config.use_subtype:
        x = x + take_rows(params.subtypes, subtypes)
    x = dropout(layer_norm(x, params.embedding_norm))

    heads = config.heads
    scale = 1.0 / np.sqrt(config.model_dim // heads)
    key_mask = mask.astype(bool)[:, None, None, :]
    batch = ids.shape[0]
    for block in params.blocks:
        q = _split_heads(block.query(x), heads)
        k = _split_heads(block.key(x), heads)
        v = _split_heads(block.value(x), heads)
        weights = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, key_mask)
        attended = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, length, config.model_dim)
        x = layer_norm(x + dropout(block.attention_output(attended)), block.attention_norm)
        hidden = gelu(block.ff_in(x))
        x = layer_norm(x + dropout(block.ff_out(hidden)), block.ff_norm)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# input arrangements
# ---------------------------------------------------------------------------


class Layout(StrEnum):
    """Which spans make up sequences A and B."""

    CONTEXT_RESPONSE = "context-response"
    PERSONA = "persona"
    PERSONA_CONTEXT = "persona-context"
    PERSONA_RESPONSE = "persona-response"
    JOINT = "persona-context-response"


_LAYOUT_SPANS: dict[Layout, tuple[tuple[int, ...], tuple[int, ...]]] = {
    Layout.CONTEXT_RESPONSE: ((SUBTYPE_CONTEXT,), (SUBTYPE_RESPONSE,)),
    Layout.PERSONA: ((SUBTYPE_PERSONA,), ()),
    Layout.PERSONA_CONTEXT: ((SUBTYPE_PERSONA,), (SUBTYPE_CONTEXT,)),
    Layout.PERSONA_RESPONSE: ((SUBTYPE_PERSONA,), (SUBTYPE_RESPONSE,)),
    Layout.JOINT: ((SUBTYPE_PERSONA, SUBTYPE_CONTEXT), (SUBTYPE_RESPONSE,)),
}


@dataclass
class ArrangedSequence:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    subtype_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


def _frame(first: list[tuple[int, list[int]]], second: list[tuple[int, list[int]]]) -> ArrangedSequence:
    non_empty = [subtype for subtype, tokens in first if tokens]
    cls_subtype = non_empty[0] if non_empty else first[0][0]
    tokens, segments, subtypes = [CLS_ID], [0], [cls_subtype]
    for subtype, span in first:
        tokens += span
        segments += [0] * len(span)
        subtypes += [subtype] * len(span)
    tokens.append(SEP_ID)
    segments.append(0)
    subtypes.append(second[0][0] if second else SUBTYPE_RESPONSE)
    if second:
        for subtype, span in second:
            tokens += span
            segments += [1] * len(span)
            subtypes += [subtype] * len(span)
        tokens.append(SEP_ID)
        segments.append(1)
        subtypes.append(SUBTYPE_RESPONSE)
    return ArrangedSequence(
        token_ids=np.array(tokens, dtype=np.int64),
        segment_ids=np.array(segments, dtype=np.int64),
        subtype_ids=np.array(subtypes, dtype=np.int64),
    )


def truncate_for_transformer(
    persona: Sequence[Sequence[int]],
    context: Sequence[Sequence[int]],
    response: Sequence[int] | None,
    budget: int = 320,
    layout: Layout | str = Layout.JOINT,
) -> ArrangedSequence:
    """Arrange spans into one sequence of at most ``budget`` tokens.

    Profiles are joined into one span, as are context utterances. When over budget the
    oldest context utterances go first, then tokens from the tail of the persona, then
    from the tail of the response (at least one response token stays). Specials are
    always kept.

    Raises:
        ValueError: If ``budget`` cannot hold the specials plus one token
    """
    layout = Layout(layout)
    first_spans, second_spans = _LAYOUT_SPANS[layout]
    used = set(first_spans) | set(second_spans)
    specials = 3 if second_spans else 2
    if budget < specials + 1:
        raise ValueError(f"budget {budget} is below the minimal frame of {specials + 1} tokens")

    utterances = [list(u) for u in context] if SUBTYPE_CONTEXT in used else []
    persona_tokens = [t for profile in persona for t in profile] if SUBTYPE_PERSONA in used else []
    response_tokens = list(response or []) if SUBTYPE_RESPONSE in used else []

    def total() -> int:
        return specials + len(persona_tokens) + sum(len(u) for u in utterances) + len(response_tokens)

    while total() > budget and utterances:
        utterances.pop(0)
    if total() > budget:
        persona_tokens = persona_tokens[: max(0, len(persona_tokens) - (total() - budget))]
    if total() > budget:
        response_tokens = response_tokens[: max(1, len(response_tokens) - (total() - budget))]
    if total() > budget:
        raise ValueError(f"cannot fit the arrangement into {budget} tokens")

    spans = {
        SUBTYPE_PERSONA: persona_tokens,
        SUBTYPE_CONTEXT: [t for u in utterances for t in u],
        SUBTYPE_RESPONSE: response_tokens,
    }
    return _frame([(s, spans[s]) for s in first_spans], [(s, spans[s]) for s in second_spans])


def pipeline_layouts(strategy: Strategy) -> list[Layout]:
    if strategy == Strategy.CRA:
        return [Layout.JOINT]
    second = {Strategy.NA: Layout.PERSONA, Strategy.CA: Layout.PERSONA_CONTEXT, Strategy.RA: Layout.PERSONA_RESPONSE}
    return [Layout.CONTEXT_RESPONSE, second[Strategy(strategy)]]


def arrange_pipelines(example: MatchingExample, strategy: Strategy, budget: int = 320) -> list[list[ArrangedSequence]]:
    """Arranged sequences per pipeline; a pipeline that ignores the response holds a single sequence."""
    persona = [list(row) for row in example.persona.rows()]
    context = [list(row) for row in example.context.rows()]
    responses = [list(example.candidates.ids[i, :n]) for i, n in enumerate(example.candidates.lengths)]
    pipelines = []
    for layout in pipeline_layouts(strategy):
        if SUBTYPE_RESPONSE in _LAYOUT_SPANS[layout][0] + _LAYOUT_SPANS[layout][1]:
            pipelines.append([truncate_for_transformer(persona, context, r, budget, layout) for r in responses])
        else:
            pipelines.append([truncate_for_transformer(persona, context, None, budget, layout)])
    return pipelines


def batch_sequences(sequences: Sequence[ArrangedSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad arranged sequences into ``(ids, segments, subtypes, mask)`` arrays."""
    length = max(len(s) for s in sequences)
    shape = (len(sequences), length)
    ids = np.full(shape, PAD_ID, dtype=np.int64)
    segments = np.zeros(shape, dtype=np.int64)
    subtypes = np.zeros(shape, dtype=np.int64)
    mask = np.zeros(shape, dtype=bool)
    for i, seq in enumerate(sequences):
        n = len(seq)
        ids[i, :n] = seq.token_ids
        segments[i, :n] = seq.segment_ids
        subtypes[i, :n] = seq.subtype_ids
        mask[i, :n] = True
    return ids, segments, subtypes, mask


class TransformerMatcher(Matcher):
    """Dual-pipeline (NA/CA/RA) or single-stream (CRA) transformer matcher with a sigmoid head.

    Both pipelines share one encoder. Without a persona the persona feature slot is zero.
    """

    family = Family.TRANSFORMER

    def __init__(self, config: TrainConfig, vocab: Vocab, rng: np.random.Generator):
        super().__init__(config, vocab)
        self._encoder_config = TransformerConfig.from_train_config(config, len(vocab))
        self.encoder = TransformerParams(self._encoder_config, rng, config.dtype)
        width = self._encoder_config.model_dim
        self.output = Linear(width if config.strategy == Strategy.CRA else 2 * width, 1, rng, config.dtype)

    @property
    def encoder_config(self) -> TransformerConfig:
        return self._encoder_config

    def classify(self, sequences: Sequence[ArrangedSequence], dropout: Dropout = EVAL) -> Tensor:
        """Classification embeddings ``(n, model_dim)`` of arranged sequences."""
        ids, segments, subtypes, mask = batch_sequences(sequences)
        states = transformer_encode(ids, segments, subtypes, mask, self._encoder_config, self.encoder, dropout)
        return states[:, 0]

    def score(self, example: MatchingExample, dropout: Dropout = EVAL) -> MatchScores:
        count = example.num_candidates
        pipelines = arrange_pipelines(example, self.strategy, self._encoder_config.max_seq_len)
        features = []
        for index, sequences in enumerate(pipelines):
            if index == 1 and not example.has_persona:
                features.append(Tensor(np.zeros((count, self._encoder_config.model_dim), dtype=self._config.dtype)))
                continue
            cls = self.classify(sequences, dropout)
            if cls.shape[0] == 1 and count > 1:
                cls = Tensor(np.ones((count, 1), dtype=cls.dtype)) @ cls
            features.append(cls)
        logits = self.output(concat(features, axis=-1)).reshape(count)
        return MatchScores(logits=logits)

    def ranking_scores(self, example: MatchingExample) -> np.ndarray:
        return bert_style_score(example, self).values


def bert_style_score(example: MatchingExample, matcher: TransformerMatcher, dropout: Dropout = EVAL) -> Tensor:
    """Match probability of every candidate under the matcher's arrangement."""
    return matcher.score(example, dropout).logits.sigmoid()
