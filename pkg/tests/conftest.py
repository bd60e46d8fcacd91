"""Shared fixtures: a tiny synthetic corpus, its vocabulary and desk-sized configs."""

import pytest

from persona_fusion.config import TrainConfig
from persona_fusion.corpus import assemble_corpus
from persona_fusion.models import SyntheticSpec
from persona_fusion.synthetic import generate_synthetic
from persona_fusion.vocab import build_vocab

TINY = {
    "pretrained_dim": 4,
    "corpus_dim": 3,
    "char_embedding_dim": 3,
    "char_filters": 2,
    "char_widths": "2,3",
    "hidden_dim": 3,
    "mlp_hidden": 4,
    "transformer_layers": 1,
    "transformer_heads": 2,
    "transformer_dim": 8,
    "transformer_ff": 8,
    "max_seq_len": 96,
    "batch_size": 4,
    "max_epochs": 1,
}


def tiny_config(**values) -> TrainConfig:
    return TrainConfig(**{**TINY, **values})


@pytest.fixture
def records():
    """Three synthetic dialogues with two response slots of four candidates each."""
    return generate_synthetic(SyntheticSpec(num_dialogues=3, turns_per_dialogue=3, num_candidates=4, seed=1))


@pytest.fixture
def vocab(records):
    return build_vocab(records, pretrained_dim=4, corpus_dim=3, max_word_chars=18, seed=0)


@pytest.fixture
def examples(records, vocab):
    """Self-persona examples assembled from the tiny corpus."""
    assembled, _ = assemble_corpus(records, tiny_config().persona_config, vocab, tiny_config().limits)
    return assembled


@pytest.fixture
def make_config():
    """Factory for desk-sized configs; keyword arguments override the tiny defaults."""
    return tiny_config


@pytest.fixture
def tiny_config_file(tmp_path):
    """The tiny defaults as a flat key=value config file."""
    path = tmp_path / "tiny.cfg"
    path.write_text("".join(f"{key}={value}\n" for key, value in TINY.items()), encoding="utf-8")
    return path
