"""Corpus formats, per-turn example assembly and negative sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from pydantic import ValidationError

from persona_fusion.models import (
    DialogueRecord,
    ExampleLimits,
    NegativeSampling,
    PersonaConfig,
    PersonaSide,
    Speaker,
    Turn,
)
from persona_fusion.seeding import stable_key, substream

if TYPE_CHECKING:
    from persona_fusion.vocab import Vocab

logger = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s]")
SILENCE = "__SILENCE__"


class CorpusFormatError(ValueError):
    """Raised when a corpus line cannot be parsed or validated."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and peel leading/trailing punctuation into separate tokens.

    >>> tokenize("Hi, I'm Bob!")
    ['hi', ',', "i'm", 'bob', '!']
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        lead: list[str] = []
        trail: list[str] = []
        while chunk and _PUNCT.fullmatch(chunk[0]):
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and _PUNCT.fullmatch(chunk[-1]):
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# reading and writing
# ---------------------------------------------------------------------------


def load_corpus(path: str | Path, fmt: str = "jsonl") -> list[DialogueRecord]:
    """Load dialogue records.

    Args:
        path: Corpus file
        fmt: "jsonl" (one DialogueRecord per line) or "parlai-text"

    Returns:
        Validated records in file order

    Raises:
        CorpusFormatError: On a line that is not valid JSON or not a valid record, with its line number
    """
    if fmt == "parlai-text":
        records, _ = convert_parlai(path)
        return records
    if fmt != "jsonl":
        raise ValueError(f"unknown corpus format '{fmt}'; expected jsonl or parlai-text")

    records: list[DialogueRecord] = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON: {e.msg}", line_number) from e
            try:
                records.append(DialogueRecord.model_validate(payload))
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(part) for part in first["loc"])
                detail = f"{where}: {first['msg']}" if where else first["msg"]
                raise CorpusFormatError(f"invalid dialogue record ({detail})", line_number) from e
    logger.info(f"Loaded {len(records)} dialogues from {path}")
    return records


def write_corpus(records: Iterable[DialogueRecord], path: str | Path) -> int:
    """Write records as JSONL; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write("\n")
            count += 1
    logger.info(f"Wrote {count} dialogues to {path}")
    return count


@dataclass
class ConversionReport:
    """Outcome of a ParlAI text conversion; problems are reported, not fatal."""

    dialogues: int = 0
    skipped_lines: list[tuple[int, str]] = field(default_factory=list)
    rejected_dialogues: list[tuple[int, str]] = field(default_factory=list)
    revised_fallbacks: int = 0


@dataclass
class _ParlaiDialogue:
    start_line: int
    self_persona: list[str] = field(default_factory=list)
    partner_persona: list[str] = field(default_factory=list)
    exchanges: list[tuple[int, str, str, list[str] | None]] = field(default_factory=list)


def _parse_parlai(path: str | Path, report: ConversionReport) -> list[_ParlaiDialogue]:
    dialogues: list[_ParlaiDialogue] = []
    current: _ParlaiDialogue | None = None
    with open(path, encoding="utf-8") as f:
        for line_number, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            number, _, rest = line.partition(" ")
            if not number.isdigit():
                report.skipped_lines.append((line_number, "missing line index"))
                continue
            if int(number) == 1 or current is None:
                current = _ParlaiDialogue(start_line=line_number)
                dialogues.append(current)
            if rest.startswith("your persona:"):
                current.self_persona.append(rest[len("your persona:") :].strip())
                continue
            if rest.startswith("partner's persona:"):
                current.partner_persona.append(rest[len("partner's persona:") :].strip())
                continue
            parts = rest.split("\t")
            if len(parts) < 2:
                report.skipped_lines.append((line_number, "expected tab-separated utterance and response"))
                continue
            candidates = parts[3].split("|") if len(parts) >= 4 and parts[3] else None
            current.exchanges.append((line_number, parts[0], parts[1], candidates))
    return dialogues


def _to_record(
    dialogue: _ParlaiDialogue, revised: _ParlaiDialogue | None, report: ConversionReport
) -> DialogueRecord | None:
    turns: list[Turn] = []
    candidates: list[list[str] | None] = []
    answers: list[int | None] = []
    for line_number, partner_text, label, cands in dialogue.exchanges:
        if partner_text != SILENCE:
            turns.append(Turn(speaker=Speaker.A, text=partner_text))
            candidates.append(None)
            answers.append(None)
        turns.append(Turn(speaker=Speaker.B, text=label))
        if cands is not None and label in cands:
            candidates.append(cands)
            answers.append(cands.index(label))
        else:
            if cands is not None:
                report.skipped_lines.append((line_number, "response not among its candidates"))
            candidates.append(None)
            answers.append(None)

    revised_a, revised_b = dialogue.partner_persona, dialogue.self_persona
    if revised is not None and 3 <= len(revised.partner_persona) <= 5 and 3 <= len(revised.self_persona) <= 5:
        revised_a, revised_b = revised.partner_persona, revised.self_persona
    else:
        report.revised_fallbacks += 1

    try:
        return DialogueRecord(
            persona_a=dialogue.partner_persona,
            persona_b=dialogue.self_persona,
            persona_a_revised=revised_a,
            persona_b_revised=revised_b,
            turns=turns,
            candidates=candidates,
            answer_index=answers,
        )
    except ValidationError as e:
        report.rejected_dialogues.append((dialogue.start_line, e.errors()[0]["msg"]))
        return None


def convert_parlai(
    original_path: str | Path, revised_path: str | Path | None = None
) -> tuple[list[DialogueRecord], ConversionReport]:
    """Convert the numbered ParlAI text format into dialogue records.

    "partner's persona:" lines describe speaker A and "your persona:" lines speaker B,
    whose responses carry the candidate sets. The revised file of the same split
    supplies revised profiles by dialogue order; without it the original profiles
    are reused.

    Args:
        original_path: ``*_original.txt`` file
        revised_path: Matching ``*_revised.txt`` file, optional

    Returns:
        Records plus a report of skipped lines, rejected dialogues and revised fallbacks
    """
    report = ConversionReport()
    originals = _parse_parlai(original_path, report)
    revised: list[_ParlaiDialogue] = []
    if revised_path is None:
        logger.warning(f"No revised persona file given for {original_path}; reusing original profiles")
    else:
        revised = _parse_parlai(revised_path, ConversionReport())
        if len(revised) != len(originals):
            logger.warning(
                f"{revised_path} holds {len(revised)} dialogues but {original_path} holds {len(originals)}"
            )

    records: list[DialogueRecord] = []
    for i, dialogue in enumerate(originals):
        record = _to_record(dialogue, revised[i] if i < len(revised) else None, report)
        if record is not None:
            records.append(record)
    report.dialogues = len(records)

    for line_number, reason in report.skipped_lines:
        logger.warning(f"{original_path}:{line_number}: skipped ({reason})")
    for line_number, reason in report.rejected_dialogues:
        logger.warning(f"{original_path}:{line_number}: dialogue rejected ({reason})")
    if revised_path is not None and report.revised_fallbacks:
        logger.warning(f"{report.revised_fallbacks} dialogues fell back to original profiles")
    logger.info(f"Converted {report.dialogues} dialogues from {original_path}")
    return records, report


# ---------------------------------------------------------------------------
# example assembly
# ---------------------------------------------------------------------------


@dataclass
class SentenceBlock:
    """Zero-padded token ids of several sentences: ``ids`` is ``(n, capacity)``, ``lengths`` is ``(n,)``."""

    ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[np.ndarray], total_rows: int | None = None) -> SentenceBlock:
        n = len(rows) if total_rows is None else total_rows
        capacity = max([len(r) for r in rows] + [1])
        ids = np.zeros((n, capacity), dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
            lengths[i] = len(row)
        return cls(ids=ids, lengths=lengths)

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def mask(self) -> np.ndarray:
        return self.lengths > 0

    def rows(self) -> list[np.ndarray]:
        """Unpadded id rows of the non-empty sentences."""
        return [self.ids[i, :n] for i, n in enumerate(self.lengths) if n > 0]

    def take(self, indices: Sequence[int] | np.ndarray) -> SentenceBlock:
        indices = np.asarray(indices, dtype=np.int64)
        return SentenceBlock(ids=self.ids[indices], lengths=self.lengths[indices])


@dataclass
class MatchingExample:
    """One ranking instance: context, persona and candidates of a response slot.

    The persona block always has ``max_profiles`` rows; padded profiles have length 0.
    A context-ablated example has an empty context block.
    """

    example_id: str
    context: SentenceBlock
    persona: SentenceBlock
    candidates: SentenceBlock
    label: int
    persona_config: PersonaConfig

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)

    @property
    def context_count(self) -> int:
        return int(self.context.mask.sum())

    @property
    def has_persona(self) -> bool:
        return bool(self.persona.mask.any())

    def select_candidates(self, indices: Sequence[int] | np.ndarray) -> MatchingExample:
        """The same example restricted to ``indices``; the label follows the true candidate."""
        indices = [int(i) for i in indices]
        label = indices.index(self.label) if self.label in indices else -1
        return replace(self, candidates=self.candidates.take(indices), label=label)


@dataclass
class AssemblyReport:
    examples: int = 0
    turns_without_candidates: int = 0
    silent_openings: int = 0


def _limit(tokens: list[str], limit: int) -> list[str]:
    return tokens[:limit]


def _assemble(
    record: DialogueRecord,
    persona_config: PersonaConfig,
    vocab: Vocab,
    limits: ExampleLimits,
    dialogue_id: str,
    report: AssemblyReport,
) -> list[MatchingExample]:
    utterances = [_limit(tokenize(turn.text), limits.max_utterance_words) for turn in record.turns]
    examples: list[MatchingExample] = []
    for t, turn in enumerate(record.turns):
        candidates = record.candidates[t]
        if candidates is None:
            report.turns_without_candidates += 1
            continue

        if persona_config.ablate_context:
            context_rows: list[np.ndarray] = []
        else:
            prior = [u for u in utterances[:t] if u]
            context_rows = [vocab.word_ids(u) for u in prior[-limits.max_context_utterances :]]
            if not context_rows:
                # a response that opens the dialogue answers the partner's silence
                report.silent_openings += 1
                context_rows = [vocab.word_ids([SILENCE])]

        if persona_config.side == PersonaSide.NONE:
            profiles: list[str] = []
        else:
            owner = turn.speaker
            if persona_config.side == PersonaSide.PARTNER:
                owner = Speaker.B if owner == Speaker.A else Speaker.A
            profiles = record.persona_of(owner, persona_config.version)
        profile_tokens = [_limit(tokenize(p), limits.max_profile_words) for p in profiles]
        profile_rows = [vocab.word_ids(p) for p in profile_tokens if p][: limits.max_profiles]

        candidate_rows = []
        for text in candidates:
            # an empty candidate still needs one position to encode
            tokens = _limit(tokenize(text), limits.max_response_words) or ["<unk>"]
            candidate_rows.append(vocab.word_ids(tokens))

        examples.append(
            MatchingExample(
                example_id=f"{dialogue_id}:{t}",
                context=SentenceBlock.from_rows(context_rows),
                persona=SentenceBlock.from_rows(profile_rows, total_rows=limits.max_profiles),
                candidates=SentenceBlock.from_rows(candidate_rows),
                label=int(record.answer_index[t]),
                persona_config=persona_config,
            )
        )
    report.examples += len(examples)
    return examples


def assemble_examples(
    record: DialogueRecord,
    persona_config: PersonaConfig,
    vocab: Vocab,
    limits: ExampleLimits | None = None,
    dialogue_id: str = "0",
) -> list[MatchingExample]:
    """One MatchingExample per candidate-bearing turn of ``record``.

    The context is every prior non-empty turn (last ``max_context_utterances`` kept,
    each cut to its first ``max_utterance_words`` words). The self persona belongs to the
    speaker of the response slot, the partner persona to the other speaker. A turn with
    no prior utterance gets a single ``__SILENCE__`` context row, as ParlAI data marks it.

    Args:
        record: A validated dialogue
        persona_config: Persona side/version and context ablation
        vocab: Vocabulary mapping tokens to ids
        limits: Length limits (defaults apply when None)
        dialogue_id: Prefix of the example ids

    Returns:
        Examples in turn order
    """
    report = AssemblyReport()
    examples = _assemble(record, persona_config, vocab, limits or ExampleLimits(), dialogue_id, report)
    return examples


def assemble_corpus(
    records: Sequence[DialogueRecord],
    persona_config: PersonaConfig,
    vocab: Vocab,
    limits: ExampleLimits | None = None,
) -> tuple[list[MatchingExample], AssemblyReport]:
    """Assemble every record; example ids are ``<record index>:<turn index>``."""
    report = AssemblyReport()
    limits = limits or ExampleLimits()
    examples: list[MatchingExample] = []
    for i, record in enumerate(records):
        examples.extend(_assemble(record, persona_config, vocab, limits, str(i), report))
    if report.silent_openings:
        logger.debug(f"{report.silent_openings} examples open their dialogue with a silence context")
    logger.info(f"Assembled {report.examples} examples ({persona_config.label}) from {len(records)} dialogues")
    return examples, report


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------


@dataclass
class TrainingInstance:
    """Candidates used for one training update on one example.

    ``targets`` is one-hot over ``example.candidates``; ``candidate_indices`` maps back to
    the positions in the full candidate set.
    """

    example: MatchingExample
    candidate_indices: np.ndarray
    targets: np.ndarray


def sample_negatives(example: MatchingExample, mode: NegativeSampling | str, epoch_seed: int) -> TrainingInstance:
    """Pick the candidates an example contributes to one training epoch.

    Args:
        example: Assembled example with its full candidate set
        mode: "static19" keeps every candidate; "dynamic1" pairs the true response with one
            negative drawn uniformly from the others
        epoch_seed: Seed of the current epoch; the draw also depends on the example id

    Returns:
        The training instance; for dynamic1 the true response comes first
    """
    mode = NegativeSampling(mode)
    count = example.num_candidates
    if mode == NegativeSampling.STATIC19:
        targets = np.zeros(count)
        targets[example.label] = 1.0
        return TrainingInstance(example=example, candidate_indices=np.arange(count), targets=targets)

    rng = substream(epoch_seed, "negatives", stable_key(example.example_id))
    draw = int(rng.integers(count - 1))
    negative = draw + 1 if draw >= example.label else draw
    indices = np.array([example.label, negative], dtype=np.int64)
    return TrainingInstance(
        example=example.select_candidates(indices), candidate_indices=indices, targets=np.array([1.0, 0.0])
    )
