import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from persona_fusion.models import (
    ExampleLimits,
    Family,
    NegativeSampling,
    PersonaConfig,
    PersonaSide,
    PersonaVersion,
    Strategy,
)

logger = logging.getLogger(__name__)

RECURRENT_DEFAULTS = {"batch_size": 16, "learning_rate": 0.001, "max_epochs": 10, "dropout": 0.2, "weight_decay": 0.0}
TRANSFORMER_DEFAULTS = {"batch_size": 12, "learning_rate": 2e-5, "max_epochs": 19, "dropout": 0.1, "weight_decay": 0.01}
TRANSFORMER_PRESETS = {
    "desk": {"transformer_layers": 4, "transformer_heads": 4, "transformer_dim": 128, "transformer_ff": 512},
    "base": {"transformer_layers": 12, "transformer_heads": 12, "transformer_dim": 768, "transformer_ff": 3072},
}

# Fields that change how a run executes but not what it computes.
_RUNTIME_FIELDS = {"threads"}


class ConfigFileError(ValueError):
    """Raised for a malformed config file or an invalid value; names the key and line when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line


class TrainConfig(BaseSettings):
    """Experiment configuration.

    Values come only from init arguments (config file plus command-line flags);
    environment variables are deliberately not consulted. Family-dependent fields
    left as None are resolved by :meth:`resolve_family_defaults`.
    """

    # experiment
    family: Family = Field(Family.HRE, description="hre, imn or transformer")
    strategy: Strategy = Field(Strategy.RA, description="na, ca, ra or cra")
    persona_side: PersonaSide = Field(PersonaSide.SELF, description="self, partner or none")
    persona_version: PersonaVersion = Field(PersonaVersion.ORIGINAL, description="original or revised")
    ablate_context: bool = Field(False, description="Remove the context (persona-response matching only)")
    seed: int = Field(0, ge=0, description="Experiment seed; every random stream derives from it")
    strict: bool = Field(True, description="Serial execution for bit-identical runs")
    threads: int = Field(1, ge=1, description="Evaluation worker threads when not strict")
    dtype: Literal["float64", "float32"] = Field("float64", description="Parameter and activation precision")

    # optimisation
    batch_size: int | None = Field(None, ge=1, description="Examples per update (16 recurrent, 12 transformer)")
    learning_rate: float | None = Field(None, gt=0, description="Initial rate (0.001 recurrent, 2e-5 transformer)")
    max_epochs: int | None = Field(None, ge=1, description="Epoch cap (10 recurrent, 19 transformer)")
    lr_decay_rate: float = Field(0.96, gt=0, le=1, description="Stepwise exponential decay factor (recurrent)")
    lr_decay_steps: int = Field(5000, ge=1, description="Updates between decay steps (recurrent)")
    weight_decay: float | None = Field(None, ge=0, description="Decoupled weight decay (0.01 transformer)")
    patience: int = Field(3, ge=1, description="Epochs without validation improvement before stopping")
    dropout: float | None = Field(None, ge=0, lt=1, description="Dropout rate (0.2 recurrent, 0.1 transformer)")

    # representation
    pretrained_dim: int = Field(300, ge=1, description="Fixed pretrained word vector width")
    corpus_dim: int = Field(100, ge=1, description="Fixed corpus-estimated word vector width")
    char_embedding_dim: int = Field(50, ge=1, description="Character embedding width")
    char_filters: int = Field(50, ge=1, description="Filters per character window width")
    char_widths: str = Field("3,4,5", description="Comma-separated character window widths")
    hidden_dim: int = Field(200, ge=1, description="Sentence BiLSTM hidden size per direction")
    context_hidden_dim: int | None = Field(None, ge=1, description="Context BiLSTM hidden size (default hidden_dim)")
    mlp_hidden: int = Field(256, ge=1, description="Hidden units of the matching MLP")
    use_interaction: bool = Field(True, description="IMN cross-attention interaction (false: identity)")

    # transformer
    transformer_preset: Literal["desk", "base"] = Field("desk", description="Size preset for the transformer")
    transformer_layers: int | None = Field(None, ge=1, description="Encoder layers")
    transformer_heads: int | None = Field(None, ge=1, description="Attention heads")
    transformer_dim: int | None = Field(None, ge=1, description="Model width")
    transformer_ff: int | None = Field(None, ge=1, description="Feed-forward width")
    max_seq_len: int = Field(320, ge=8, description="Maximum arranged sequence length")
    use_subtype: bool = Field(True, description="Add persona/context/response subtype embeddings")

    # limits
    max_word_chars: int = Field(18, ge=1)
    max_utterance_words: int = Field(20, ge=1)
    max_context_utterances: int = Field(15, ge=1)
    max_profile_words: int = Field(15, ge=1)
    max_profiles: int = Field(5, ge=1)
    max_response_words: int = Field(20, ge=1)

    model_config = SettingsConfigDict(extra="forbid")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    @model_validator(mode="after")
    def resolve_family_defaults(self):
        """Fill unset family-dependent values and apply the transformer size preset."""
        defaults = TRANSFORMER_DEFAULTS if self.family == Family.TRANSFORMER else RECURRENT_DEFAULTS
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        for name, value in TRANSFORMER_PRESETS[self.transformer_preset].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.context_hidden_dim is None:
            self.context_hidden_dim = self.hidden_dim

        if self.transformer_dim % self.transformer_heads != 0:
            raise ValueError(
                f"transformer_dim {self.transformer_dim} is not divisible by transformer_heads {self.transformer_heads}"
            )
        widths = self.char_window_widths
        if not widths or any(w < 1 for w in widths):
            raise ValueError(f"char_widths must list positive integers, got '{self.char_widths}'")
        return self

    @property
    def char_window_widths(self) -> tuple[int, ...]:
        try:
            return tuple(int(part) for part in self.char_widths.split(",") if part.strip())
        except ValueError as e:
            raise ValueError(f"char_widths must list integers, got '{self.char_widths}'") from e

    @property
    def is_recurrent(self) -> bool:
        return self.family != Family.TRANSFORMER

    @property
    def negative_sampling(self) -> NegativeSampling:
        return NegativeSampling.STATIC19 if self.is_recurrent else NegativeSampling.DYNAMIC1

    @property
    def loss(self) -> Literal["softmax", "binary"]:
        return "softmax" if self.is_recurrent else "binary"

    @property
    def persona_config(self) -> PersonaConfig:
        return PersonaConfig(side=self.persona_side, version=self.persona_version, ablate_context=self.ablate_context)

    @property
    def limits(self) -> ExampleLimits:
        return ExampleLimits(
            max_word_chars=self.max_word_chars,
            max_utterance_words=self.max_utterance_words,
            max_context_utterances=self.max_context_utterances,
            max_profile_words=self.max_profile_words,
            max_profiles=self.max_profiles,
            max_response_words=self.max_response_words,
        )

    def canonical_json(self) -> str:
        """Sorted, whitespace-free JSON of every field that affects results."""
        return json.dumps(self.model_dump(mode="json", exclude=_RUNTIME_FIELDS), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def parse_config_file(path: str | Path) -> dict[str, tuple[str, int]]:
    """Read a flat ``key=value`` file into ``{key: (raw value, line number)}``.

    Blank lines and lines starting with ``#`` are ignored.

    Raises:
        ConfigFileError: On a line without ``=``, an unknown key or a repeated key
    """
    entries: dict[str, tuple[str, int]] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {line_number}: expected key=value, got '{line}'", line=line_number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in TrainConfig.model_fields:
            raise ConfigFileError(f"unknown key '{key}' at line {line_number}", key=key, line=line_number)
        if key in entries:
            raise ConfigFileError(f"key '{key}' repeated at line {line_number}", key=key, line=line_number)
        entries[key] = (value, line_number)
    return entries


def config_load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Build a TrainConfig from an optional config file and command-line overrides.

    Args:
        path: Flat ``key=value`` file, or None for defaults only
        overrides: Values from command-line flags; None values are ignored and the rest win over the file

    Returns:
        The validated, family-resolved configuration

    Raises:
        ConfigFileError: On unknown keys or invalid values, naming the key and its line
    """
    entries = parse_config_file(path) if path is not None else {}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(flags) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigFileError(f"unknown key '{unknown[0]}'", key=unknown[0])

    values: dict[str, Any] = {key: (value if value != "" else None) for key, (value, _) in entries.items()}
    values.update(flags)
    try:
        config = TrainConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        line = entries[key][1] if key in entries and key not in flags else None
        where = f" at line {line}" if line is not None else ""
        label = f"'{key}'" if key else "config"
        raise ConfigFileError(f"invalid value for {label}{where}: {error['msg']}", key=key, line=line) from e
    logger.debug(f"Resolved config {config.config_hash[:12]} from {path or 'defaults'}")
    return config


def file_values(path: str | Path | None) -> dict[str, str]:
    """Raw values read from a config file, for the run manifest."""
    if path is None:
        return {}
    return {key: value for key, (value, _) in parse_config_file(path).items()}
