from datetime import datetime
from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Family(StrEnum):
    """Response-selection model family."""

    HRE = "hre"
    IMN = "imn"
    TRANSFORMER = "transformer"


class Strategy(StrEnum):
    """Persona fusion strategy: none-, context-, response- or context-response-aware."""

    NA = "na"
    CA = "ca"
    RA = "ra"
    CRA = "cra"


class PersonaSide(StrEnum):
    SELF = "self"
    PARTNER = "partner"
    NONE = "none"


class PersonaVersion(StrEnum):
    ORIGINAL = "original"
    REVISED = "revised"


class Speaker(StrEnum):
    A = "A"
    B = "B"


class Turn(BaseModel):
    """One utterance of a dialogue."""

    speaker: Speaker = Field(..., description="Speaker of the utterance")
    text: str = Field(..., description="Raw utterance text")


class DialogueRecord(BaseModel):
    """A complete dialogue with both personas and per-turn candidate sets."""

    persona_a: list[str] = Field(..., description="Original profiles of speaker A")
    persona_b: list[str] = Field(..., description="Original profiles of speaker B")
    persona_a_revised: list[str] | None = Field(None, description="Revised profiles of speaker A")
    persona_b_revised: list[str] | None = Field(None, description="Revised profiles of speaker B")
    turns: list[Turn] = Field(..., description="Utterances in dialogue order")
    candidates: list[list[str] | None] = Field(..., description="Candidate responses per turn (null: none)")
    answer_index: list[int | None] = Field(..., description="Index of the true candidate per turn")

    @model_validator(mode="after")
    def check_dialogue(self):
        """Check alternation, candidate sets and profile counts; fill missing revised personas."""
        if self.persona_a_revised is None:
            self.persona_a_revised = list(self.persona_a)
        if self.persona_b_revised is None:
            self.persona_b_revised = list(self.persona_b)

        for label, profiles in (
            ("persona_a", self.persona_a),
            ("persona_b", self.persona_b),
            ("persona_a_revised", self.persona_a_revised),
            ("persona_b_revised", self.persona_b_revised),
        ):
            if not 3 <= len(profiles) <= 5:
                raise ValueError(f"{label} must hold 3 to 5 profiles, got {len(profiles)}")

        for i in range(1, len(self.turns)):
            if self.turns[i].speaker == self.turns[i - 1].speaker:
                raise ValueError(f"speakers do not alternate at turn {i}")

        if len(self.candidates) != len(self.turns) or len(self.answer_index) != len(self.turns):
            raise ValueError("candidates and answer_index must have one entry per turn")
        for i, (cands, answer) in enumerate(zip(self.candidates, self.answer_index, strict=True)):
            if cands is None:
                continue
            if len(cands) < 2:
                raise ValueError(f"candidate set at turn {i} needs at least 2 candidates")
            if answer is None or not 0 <= answer < len(cands):
                raise ValueError(f"candidate set at turn {i} has no true response")
        return self

    def persona_of(self, speaker: Speaker, version: "PersonaVersion") -> list[str]:
        if speaker == Speaker.A:
            profiles = self.persona_a if version == PersonaVersion.ORIGINAL else self.persona_a_revised
        else:
            profiles = self.persona_b if version == PersonaVersion.ORIGINAL else self.persona_b_revised
        return list(profiles or [])


class PersonaConfig(BaseModel):
    """Which persona an example is conditioned on, and whether the context is ablated."""

    model_config = ConfigDict(frozen=True)

    side: PersonaSide = Field(PersonaSide.SELF, description="self, partner or none")
    version: PersonaVersion = Field(PersonaVersion.ORIGINAL, description="original or revised profiles")
    ablate_context: bool = Field(False, description="Score persona-response matching with the context removed")

    @property
    def label(self) -> str:
        suffix = "-noctx" if self.ablate_context else ""
        return f"{self.side.value}-{self.version.value}{suffix}"


class ExampleRanking(BaseModel):
    """Candidate ordering for one example."""

    example_id: str = Field(..., description="Stable example id: <dialogue>:<turn>")
    true_index: int = Field(..., description="Index of the true candidate")
    order: list[int] = Field(..., description="Candidate indices, best first")
    rank: int = Field(..., ge=1, description="1-based rank of the true candidate")
    score_true: float = Field(..., description="Ranking score of the true candidate")


class ReportMetadata(BaseModel):
    family: Family | None = Field(None, description="Model family")
    strategy: Strategy | None = Field(None, description="Fusion strategy")
    persona_side: PersonaSide = Field(PersonaSide.SELF, description="Persona side")
    persona_version: PersonaVersion = Field(PersonaVersion.ORIGINAL, description="Persona version")
    ablate_context: bool = Field(False, description="Context ablated")
    use_subtype: bool = Field(True, description="Transformer subtype embeddings enabled")
    use_interaction: bool = Field(True, description="IMN cross-attention enabled")
    config_hash: str = Field("", description="SHA-256 of the canonical model config")
    corpus_hash: str = Field("", description="SHA-256 of the evaluated corpus file")
    seed: int = Field(0, description="Experiment seed")


class RankingReport(BaseModel):
    """Per-example rankings plus aggregate hits@k and MRR."""

    rankings: list[ExampleRanking] = Field(..., description="One entry per evaluated example")
    hits: dict[int, float] = Field(..., description="hits@k by k")
    mrr: float = Field(..., ge=0.0, le=1.0, description="Mean reciprocal rank")
    metadata: ReportMetadata = Field(default_factory=ReportMetadata, description="Run metadata")
    fusion_weights: dict[str, list[float]] = Field(
        default_factory=dict, description="Persona fusion weights for the true candidate, by example id"
    )

    @model_validator(mode="after")
    def check_metrics(self):
        """hits@k is nondecreasing in k and hits@1 never exceeds MRR."""
        ks = sorted(self.hits)
        for small, large in zip(ks, ks[1:], strict=False):
            if self.hits[small] > self.hits[large] + 1e-12:
                raise ValueError(f"hits@{small} exceeds hits@{large}")
        if 1 in self.hits and self.hits[1] > self.mrr + 1e-12:
            raise ValueError("hits@1 exceeds MRR")
        return self

    @property
    def hits1(self) -> float:
        return self.hits.get(1, 0.0)

    @property
    def n(self) -> int:
        return len(self.rankings)

    def aggregate(self) -> dict[str, Any]:
        """The aggregate JSON object written next to the metrics TSV."""
        return {
            "hits1": self.hits.get(1, 0.0),
            "hits5": self.hits.get(5, 0.0),
            "mrr": self.mrr,
            "n": self.n,
            "config_hash": self.metadata.config_hash,
            "family": self.metadata.family.value if self.metadata.family else None,
            "strategy": self.metadata.strategy.value if self.metadata.strategy else None,
            "persona_side": self.metadata.persona_side.value,
            "persona_version": self.metadata.persona_version.value,
            "ablate_context": self.metadata.ablate_context,
            "use_subtype": self.metadata.use_subtype,
            "use_interaction": self.metadata.use_interaction,
            "corpus_hash": self.metadata.corpus_hash,
            "seed": self.metadata.seed,
        }


class RunManifest(BaseModel):
    """Provenance record written by every artifact-producing command."""

    command: str = Field(..., description="Subcommand name")
    resolved_config: dict[str, Any] = Field(default_factory=dict, description="Final configuration")
    file_config: dict[str, Any] = Field(default_factory=dict, description="Values read from --config")
    overrides: dict[str, Any] = Field(default_factory=dict, description="Values set by command-line flags")
    corpus_hashes: dict[str, str] = Field(default_factory=dict, description="SHA-256 of each input file")
    seed: int | None = Field(None, description="Experiment seed")
    started_at: datetime = Field(..., description="UTC start time")
    finished_at: datetime | None = Field(None, description="UTC finish time")
    outputs: list[str] = Field(default_factory=list, description="Paths written by the command")


class Signal(StrEnum):
    """Which part of a synthetic example predicts the true response."""

    PERSONA = "persona"
    CONTEXT = "context"
    BOTH = "both"
    NONE = "none"


class SyntheticSpec(BaseModel):
    """Parameters of the synthetic oracle-labeled corpus."""

    num_dialogues: int = Field(100, ge=1, description="Number of dialogues to generate")
    topics: int = Field(24, ge=20, description="Number of topics; at least 20 so 19 negatives can be off-topic")
    signal: Signal = Field(Signal.PERSONA, description="persona, context, both or none")
    seed: int = Field(0, ge=0, description="Generation seed")
    partner_rate: float = Field(
        0.0, ge=0.0, le=1.0, description="Probability that the true response uses the partner's persona keyword"
    )
    turns_per_dialogue: int = Field(6, ge=2, description="Utterances per dialogue, opener included")
    num_candidates: int = Field(20, ge=2, description="Candidates per response slot")


class AggregateMetrics(BaseModel):
    """One row of a report table, read back from an aggregate JSON file."""

    hits1: float = Field(..., description="hits@1")
    hits5: float = Field(0.0, description="hits@5")
    mrr: float = Field(..., description="Mean reciprocal rank")
    n: int = Field(..., description="Number of examples")
    config_hash: str = Field("", description="SHA-256 of the canonical model config")
    family: Family | None = Field(None, description="Model family")
    strategy: Strategy | None = Field(None, description="Fusion strategy")
    persona_side: PersonaSide = Field(PersonaSide.SELF, description="Persona side")
    persona_version: PersonaVersion = Field(PersonaVersion.ORIGINAL, description="Persona version")
    ablate_context: bool = Field(False, description="Context ablated")
    use_subtype: bool = Field(True, description="Transformer subtype embeddings enabled")
    use_interaction: bool = Field(True, description="IMN cross-attention enabled")
    corpus_hash: str = Field("", description="SHA-256 of the evaluated corpus file")
    seed: int = Field(0, description="Experiment seed")


class NegativeSampling(StrEnum):
    STATIC19 = "static19"
    DYNAMIC1 = "dynamic1"


class ExampleLimits(BaseModel):
    """Length limits applied when assembling matching examples."""

    model_config = ConfigDict(frozen=True)

    max_word_chars: int = Field(18, ge=1, description="Characters kept per word")
    max_utterance_words: int = Field(20, ge=1, description="Words kept per context utterance (prefix)")
    max_context_utterances: int = Field(15, ge=1, description="Context utterances kept (suffix)")
    max_profile_words: int = Field(15, ge=1, description="Words kept per profile (prefix)")
    max_profiles: int = Field(5, ge=1, description="Profiles kept per persona")
    max_response_words: int = Field(20, ge=1, description="Words kept per candidate response (prefix)")
