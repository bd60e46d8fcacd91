"""Word and character vocabularies plus the fixed word-vector tables."""

import logging
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from persona_fusion.corpus import tokenize
from persona_fusion.models import DialogueRecord
from persona_fusion.seeding import stable_key, substream

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "<pad>", "<unk>", "[CLS]", "[SEP]"
SPECIAL_WORDS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
CHAR_PAD_ID, CHAR_UNK_ID = 0, 1


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file line does not hold a token and the expected number of floats."""


@dataclass
class Vocab:
    """Token and character id maps with the fixed (never trained) word-vector table.

    Attributes:
        words: Word for each id; ids 0-3 are padding, OOV, [CLS] and [SEP]
        chars: Character for each id; 0 is padding and 1 is OOV
        fixed: ``(len(words), pretrained_dim + corpus_dim)`` pretrained part followed by corpus part
        char_matrix: ``(len(words), max_word_chars)`` character ids of every word, zero padded
    """

    words: list[str]
    chars: list[str]
    fixed: np.ndarray
    pretrained_dim: int
    corpus_dim: int
    max_word_chars: int = 18
    word_to_id: dict[str, int] = field(init=False, repr=False)
    char_to_id: dict[str, int] = field(init=False, repr=False)
    char_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.words[: len(SPECIAL_WORDS)]) != SPECIAL_WORDS:
            raise ValueError(f"vocabulary must start with {SPECIAL_WORDS}")
        if self.fixed.shape != (len(self.words), self.pretrained_dim + self.corpus_dim):
            raise ValueError(f"fixed table shape {self.fixed.shape} does not match the vocabulary")
        self.word_to_id = {word: i for i, word in enumerate(self.words)}
        self.char_to_id = {char: i for i, char in enumerate(self.chars)}
        self.char_matrix = np.zeros((len(self.words), self.max_word_chars), dtype=np.int64)
        for i, word in enumerate(self.words):
            if word in SPECIAL_WORDS:
                continue
            ids = [self.char_to_id.get(ch, CHAR_UNK_ID) for ch in word[: self.max_word_chars]]
            self.char_matrix[i, : len(ids)] = ids

    def __len__(self) -> int:
        return len(self.words)

    @property
    def fixed_dim(self) -> int:
        return self.pretrained_dim + self.corpus_dim

    def word_ids(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.word_to_id.get(token, UNK_ID) for token in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids if int(i) != PAD_ID]


def record_texts(record: DialogueRecord) -> Iterator[str]:
    """Every string of a record: both persona versions, all turns and all candidates."""
    yield from record.persona_a
    yield from record.persona_b
    yield from record.persona_a_revised or []
    yield from record.persona_b_revised or []
    for turn in record.turns:
        yield turn.text
    for candidates in record.candidates:
        yield from candidates or []


def read_embeddings(path: str | Path, dim: int) -> dict[str, np.ndarray]:
    """Read a whitespace-separated embedding file (``token v1 ... vd`` per line).

    A leading word2vec-style header line of two integers is skipped.

    Raises:
        EmbeddingFormatError: If a line does not hold exactly ``dim`` floats
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if line_number == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"{path}: token '{token}' at line {line_number} has {len(values)} values, expected {dim}"
                )
            try:
                vectors[token] = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as e:
                raise EmbeddingFormatError(
                    f"{path}: token '{token}' at line {line_number} has a non-numeric value"
                ) from e
    logger.info(f"Read {len(vectors)} vectors of dimension {dim} from {path}")
    return vectors


def _fixed_part(
    words: list[str], path: str | Path | None, dim: int, seed: int, stream: str, dtype: str
) -> np.ndarray:
    table = np.zeros((len(words), dim), dtype=dtype)
    if path is not None:
        vectors = read_embeddings(path, dim)
        found = 0
        for i, word in enumerate(words):
            if word in vectors:
                table[i] = vectors[word]
                found += 1
        logger.info(f"{found} of {len(words) - len(SPECIAL_WORDS)} corpus tokens found in {path}")
        return table
    # No file: stand-in fixed vectors, one independent stream per token.
    for i, word in enumerate(words):
        if word in SPECIAL_WORDS:
            continue
        table[i] = substream(seed, stream, stable_key(word)).normal(0.0, 1.0 / np.sqrt(dim), size=dim)
    return table


def build_vocab(
    records: Iterable[DialogueRecord],
    pretrained_path: str | Path | None = None,
    corpus_path: str | Path | None = None,
    *,
    pretrained_dim: int = 300,
    corpus_dim: int = 100,
    max_word_chars: int = 18,
    seed: int = 0,
    dtype: str = "float64",
) -> Vocab:
    """Build the vocabulary of a corpus and its fixed word-vector table.

    Tokens are ordered by descending frequency, then alphabetically. Tokens absent
    from an embedding file get a zero row in that part. When a path is None the
    part is filled with seeded random vectors so desk-scale runs need no downloads.

    Args:
        records: Corpus records (train and validation)
        pretrained_path: General-purpose vectors of width ``pretrained_dim``
        corpus_path: Vectors estimated on the training corpus, width ``corpus_dim``
        pretrained_dim: Width of the pretrained part
        corpus_dim: Width of the corpus part
        max_word_chars: Characters kept per word for the character convolution
        seed: Seed for the stand-in vectors
        dtype: Table precision

    Returns:
        The vocabulary

    Raises:
        EmbeddingFormatError: On a dimension mismatch, naming the file and token
    """
    word_counts: Counter[str] = Counter()
    for record in records:
        for text in record_texts(record):
            word_counts.update(tokenize(text))
    for special in SPECIAL_WORDS:
        word_counts.pop(special, None)
    words = list(SPECIAL_WORDS) + sorted(word_counts, key=lambda w: (-word_counts[w], w))

    char_counts: Counter[str] = Counter()
    for word in words[len(SPECIAL_WORDS) :]:
        char_counts.update(word[:max_word_chars])
    chars = ["<pad>", "<unk>"] + sorted(char_counts, key=lambda c: (-char_counts[c], c))

    fixed = np.concatenate(
        [
            _fixed_part(words, pretrained_path, pretrained_dim, seed, "pretrained-vectors", dtype),
            _fixed_part(words, corpus_path, corpus_dim, seed, "corpus-vectors", dtype),
        ],
        axis=1,
    )
    logger.info(f"Built vocabulary of {len(words)} words and {len(chars)} characters")
    return Vocab(
        words=words,
        chars=chars,
        fixed=fixed,
        pretrained_dim=pretrained_dim,
        corpus_dim=corpus_dim,
        max_word_chars=max_word_chars,
    )
