"""Tests for training, evaluation and model selection."""

import json

import numpy as np
import pytest

from persona_fusion.checkpoint import CheckpointMismatchError, checkpoint_bytes
from persona_fusion.corpus import assemble_corpus
from persona_fusion.harness import (
    TrainingDivergedError,
    build_matcher,
    evaluate,
    evaluate_examples,
    rank_examples,
    run_log_path,
    train,
    train_best_of,
)
from persona_fusion.matchers import HreMatcher, ImnMatcher
from persona_fusion.metrics import build_report, paired_significance
from persona_fusion.models import (
    ExampleRanking,
    Family,
    PersonaConfig,
    PersonaSide,
    Signal,
    Strategy,
    SyntheticSpec,
)
from persona_fusion.synthetic import generate_synthetic
from persona_fusion.transformer import TransformerMatcher
from persona_fusion.vocab import build_vocab


def report_with_ranks(*ranks: int):
    rankings = [
        ExampleRanking(example_id=str(i), true_index=0, order=[0], rank=rank, score_true=0.0)
        for i, rank in enumerate(ranks)
    ]
    return build_report(rankings)


@pytest.mark.parametrize(
    ("family", "expected"), [("hre", HreMatcher), ("imn", ImnMatcher), ("transformer", TransformerMatcher)]
)
def test_build_matcher_family(family, expected, make_config, vocab):
    """Test that the configured family picks the model class."""
    assert isinstance(build_matcher(make_config(family=family), vocab), expected)


def test_build_matcher_is_seed_deterministic(make_config, vocab):
    """Test that equal seeds give equal initial parameters."""
    first = build_matcher(make_config(seed=3), vocab).parameter_arrays()
    second = build_matcher(make_config(seed=3), vocab).parameter_arrays()
    other = build_matcher(make_config(seed=4), vocab).parameter_arrays()

    for name, array in first.items():
        np.testing.assert_array_equal(array, second[name])
    assert any(not np.array_equal(array, other[name]) for name, array in first.items())


def test_rank_examples_threaded_matches_strict(make_config, vocab, examples):
    """Test that threaded ranking returns the strict rankings in input order."""
    model = build_matcher(make_config(strategy="ra"), vocab)

    strict, strict_weights = rank_examples(model, examples)
    threaded, threaded_weights = rank_examples(model, examples, threads=3, strict=False)

    assert strict == threaded
    assert strict_weights == threaded_weights
    assert set(strict_weights) == {example.example_id for example in examples}


def test_evaluate_examples_metadata(make_config, vocab, examples):
    """Test that the report carries the model and persona settings."""
    config = make_config(family="imn", strategy="cra", use_interaction=False)
    report = evaluate_examples(build_matcher(config, vocab), examples, corpus_hash="abc")

    assert report.n == len(examples)
    assert report.metadata.family.value == "imn"
    assert report.metadata.strategy.value == "cra"
    assert report.metadata.config_hash == config.config_hash
    assert report.metadata.corpus_hash == "abc"
    assert report.metadata.use_interaction is False
    assert report.metadata.use_subtype is True
    assert 0.0 <= report.hits1 <= report.mrr <= 1.0


def test_evaluate_examples_empty(make_config, vocab):
    """Test that an empty example list is rejected."""
    with pytest.raises(ValueError, match="no examples"):
        evaluate_examples(build_matcher(make_config(), vocab), [])


def test_train_writes_step_and_epoch_lines(tmp_path, make_config, records, vocab):
    """Test the JSONL training log and the returned checkpoint."""
    log_path = tmp_path / "train_log.jsonl"
    result = train(make_config(max_epochs=2, patience=5), records, records, vocab, log_path)

    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    epochs = [line for line in lines if line["kind"] == "epoch"]
    steps = [line for line in lines if line["kind"] == "step"]

    assert [line["epoch"] for line in epochs] == [1, 2]
    assert set(epochs[0]) == {"kind", "epoch", "hits1", "hits5", "mrr", "loss"}
    assert [line["step"] for line in steps] == list(range(1, len(steps) + 1))
    assert result.log == log_path.read_text().splitlines()
    assert result.epochs_run == 2
    assert result.checkpoint.epoch == result.best_epoch


def test_train_is_deterministic(make_config, records, vocab):
    """Test that two runs with one seed give identical logs and checkpoint bytes."""
    config = make_config(strategy="ra", max_epochs=2)

    first = train(config, records, records, vocab)
    second = train(config, records, records, vocab)

    assert first.log == second.log
    assert checkpoint_bytes(first.checkpoint) == checkpoint_bytes(second.checkpoint)


def test_train_builds_vocab_when_missing(make_config, records):
    """Test training without a prebuilt vocabulary."""
    result = train(make_config(), records, records)

    assert result.checkpoint.vocab_words[:4] == build_vocab(records, pretrained_dim=4, corpus_dim=3).words[:4]


def test_train_transformer_one_epoch(make_config, records, vocab):
    """Test that the transformer family trains with linear decay for an epoch."""
    result = train(make_config(family="transformer", strategy="cra", dropout=0.1), records, records, vocab)

    assert result.epochs_run == 1
    assert result.checkpoint.config.family.value == "transformer"
    assert result.checkpoint.step == 2


def test_train_rejects_empty_splits(make_config, records, vocab):
    """Test that both splits must yield examples."""
    with pytest.raises(ValueError, match="training split"):
        train(make_config(), [], records, vocab)
    with pytest.raises(ValueError, match="validation split"):
        train(make_config(), records, [], vocab)


def test_early_stopping_keeps_best_epoch(mocker, make_config, records, vocab):
    """Test that training stops after the patience runs out and keeps the first epoch."""
    reports = [report_with_ranks(1, 2), report_with_ranks(1, 2, 2, 2), report_with_ranks(1, 2, 2, 2)]
    mocker.patch("persona_fusion.harness.evaluate_examples", side_effect=reports)

    result = train(make_config(max_epochs=5, patience=2), records, records, vocab)

    assert result.best_epoch == 1
    assert result.epochs_run == 3
    assert result.best_hits1 == 0.5
    assert [entry["hits1"] for entry in result.history] == [0.5, 0.25, 0.25]


def test_selection_breaks_hits_ties_by_mrr(mocker, make_config, records, vocab):
    """Test that equal hits@1 goes to the higher MRR and equal pairs to the earlier epoch."""
    reports = [report_with_ranks(1, 3), report_with_ranks(1, 2), report_with_ranks(1, 2)]
    mocker.patch("persona_fusion.harness.evaluate_examples", side_effect=reports)

    result = train(make_config(max_epochs=3, patience=5), records, records, vocab)

    assert result.best_epoch == 2
    assert result.best_mrr == pytest.approx(0.75)


def test_divergence_returns_last_good_checkpoint(mocker, make_config, records, vocab):
    """Test that a non-finite loss raises with the initial parameters as the last good state."""
    mocker.patch("persona_fusion.harness.train_step", side_effect=FloatingPointError("non-finite loss nan"))

    with pytest.raises(TrainingDivergedError, match="training diverged") as excinfo:
        train(make_config(), records, records, vocab)

    last_good = excinfo.value.last_good
    assert last_good.epoch == 0
    initial = build_matcher(make_config(), vocab).parameter_arrays()
    for name, array in initial.items():
        np.testing.assert_array_equal(last_good.tensors[name], array)


def test_evaluate_checks_family(make_config, records, vocab):
    """Test that a checkpoint cannot be evaluated as another family."""
    checkpoint = train(make_config(), records, records, vocab).checkpoint

    with pytest.raises(CheckpointMismatchError, match="holds a hre model"):
        evaluate(checkpoint, records, family="imn")


def test_evaluate_persona_override(make_config, records, vocab):
    """Test evaluation under a persona setting other than the training one."""
    checkpoint = train(make_config(), records, records, vocab).checkpoint

    default = evaluate(checkpoint, records)
    partner = evaluate(checkpoint, records, PersonaConfig(side=PersonaSide.PARTNER))

    assert default.metadata.persona_side == PersonaSide.SELF
    assert partner.metadata.persona_side == PersonaSide.PARTNER
    assert partner.n == default.n


def test_run_log_path(tmp_path):
    """Test per-seed log names for repeated runs."""
    path = tmp_path / "train_log.jsonl"

    assert run_log_path(None, 3, 2) is None
    assert run_log_path(path, 3, 1) == path
    assert run_log_path(path, 3, 2) == tmp_path / "train_log.seed3.jsonl"


def test_train_best_of_picks_best_seed(mocker, make_config, records, vocab, tmp_path):
    """Test consecutive seeds, per-seed logs and selection of the best run."""
    results = [
        mocker.Mock(best_hits1=0.4, best_mrr=0.5),
        mocker.Mock(best_hits1=0.6, best_mrr=0.7),
        mocker.Mock(best_hits1=0.6, best_mrr=0.7),
    ]
    mock_train = mocker.patch("persona_fusion.harness.train", side_effect=results)

    best = train_best_of(make_config(seed=10), records, records, runs=3, vocab=vocab, log_path=tmp_path / "log.jsonl")

    assert best is results[1]
    seeds = [call.args[0].seed for call in mock_train.call_args_list]
    assert seeds == [10, 11, 12]
    assert mock_train.call_args_list[2].args[4] == tmp_path / "log.seed12.jsonl"


def test_train_best_of_needs_a_run(make_config, records):
    with pytest.raises(ValueError, match="runs must be at least 1"):
        train_best_of(make_config(), records, records, runs=0)


@pytest.mark.slow
@pytest.mark.parametrize("family", list(Family))
def test_untrained_model_is_at_chance(family, make_config):
    """Test that a fresh model ranks the true response first about 1 time in 20 when nothing predicts it."""
    records = generate_synthetic(SyntheticSpec(num_dialogues=400, signal=Signal.NONE, seed=8))
    vocab = build_vocab(records, pretrained_dim=4, corpus_dim=3)
    examples, _ = assemble_corpus(records, PersonaConfig(), vocab)

    report = evaluate_examples(build_matcher(make_config(family=family), vocab), examples)

    assert report.n == 2000
    assert abs(report.hits1 - 0.05) < 0.02


@pytest.mark.slow
@pytest.mark.parametrize("strategy", list(Strategy))
@pytest.mark.parametrize("family", list(Family))
def test_memorises_small_training_set(family, strategy, make_config):
    """Test that every family and strategy ranks all 32 training examples correctly within 200 epochs."""
    spec = SyntheticSpec(num_dialogues=8, turns_per_dialogue=5, num_candidates=4, signal=Signal.PERSONA, seed=6)
    records = generate_synthetic(spec)
    config = make_config(
        family=family,
        strategy=strategy,
        hidden_dim=8,
        transformer_dim=16,
        transformer_ff=32,
        learning_rate=0.005,
        weight_decay=0.0,
        dropout=0.0,
        batch_size=8,
        max_epochs=200,
        patience=50,
    )

    result = train(config, records, records)

    assert result.best_hits1 == 1.0


def pooled_test_report(make_config, splits, vocab, **values):
    """Test-split rankings of three seeds pooled into one report with seed-qualified example ids."""
    train_records, valid_records, test_records = splits
    rankings = []
    for seed in range(3):
        config = make_config(seed=seed, hidden_dim=8, max_epochs=8, learning_rate=0.005, **values)
        checkpoint = train(config, train_records, valid_records, vocab).checkpoint
        report = evaluate(checkpoint, test_records)
        rankings += [r.model_copy(update={"example_id": f"{seed}/{r.example_id}"}) for r in report.rankings]
    return build_report(rankings)


def synthetic_splits(**values):
    splits = [
        generate_synthetic(SyntheticSpec(num_dialogues=n, seed=seed, **values))
        for n, seed in ((120, 20), (30, 21), (40, 22))
    ]
    vocab = build_vocab([*splits[0], *splits[1]], pretrained_dim=4, corpus_dim=3)
    return splits, vocab


@pytest.mark.slow
@pytest.mark.parametrize("strategy", ["ra", "cra"])
@pytest.mark.parametrize("family", ["hre", "imn"])
def test_response_aware_fusion_beats_plain_fusion(family, strategy, make_config):
    """Test that RA and CRA beat NA over three seeds when the persona predicts the response."""
    splits, vocab = synthetic_splits(signal=Signal.PERSONA)

    aware = pooled_test_report(make_config, splits, vocab, family=family, strategy=strategy)
    plain = pooled_test_report(make_config, splits, vocab, family=family, strategy="na")

    result = paired_significance(aware, plain)
    assert result.mean_difference > 0
    assert result.p_value < 0.05


@pytest.mark.slow
def test_self_persona_beats_partner_persona(make_config):
    """Test that the responder's own persona beats the partner's when it is the one that predicts the response."""
    splits, vocab = synthetic_splits(signal=Signal.PERSONA, partner_rate=0.0)

    own = pooled_test_report(make_config, splits, vocab, family="imn", strategy="ra", persona_side="self")
    partner = pooled_test_report(make_config, splits, vocab, family="imn", strategy="ra", persona_side="partner")

    result = paired_significance(own, partner)
    assert result.mean_difference > 0
    assert result.p_value < 0.05


@pytest.mark.slow
def test_subtype_embeddings_do_not_hurt(make_config):
    """Test that the single-stream transformer with subtype embeddings ranks at least as well as without."""
    splits, vocab = synthetic_splits(signal=Signal.PERSONA)
    values = {"family": "transformer", "strategy": "cra", "transformer_dim": 16, "transformer_ff": 32}

    with_subtype = pooled_test_report(make_config, splits, vocab, **values)
    without = pooled_test_report(make_config, splits, vocab, use_subtype=False, **values)

    result = paired_significance(with_subtype, without)
    assert result.n == with_subtype.n
    assert result.mean_difference >= 0
