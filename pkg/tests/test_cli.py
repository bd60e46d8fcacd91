"""Tests for the command-line interface."""

import json

import pytest
from typer.testing import CliRunner

from persona_fusion.checkpoint import CheckpointMismatchError, load_checkpoint
from persona_fusion.cli import app
from persona_fusion.corpus import load_corpus

PARLAI_TEXT = """1 partner's persona: i like dogs .
2 partner's persona: i live in ohio .
3 partner's persona: i am a nurse .
4 your persona: i play guitar .
5 your persona: i have two cats .
6 your persona: i love pizza .
7 hi there\thello !\t\tnope|hello !
8 how are you ?\tgreat thanks\t\tgreat thanks|bad
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def corpus(runner, tmp_path):
    """A tiny synthetic corpus written through the synth command."""
    path = tmp_path / "data" / "synthetic.jsonl"
    result = runner.invoke(
        app, ["synth", "-o", str(path), "--dialogues", "3", "--turns", "3", "--candidates", "4", "--seed", "1"]
    )
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture
def trained(runner, tmp_path, corpus, tiny_config_file):
    """Output directory of a one-epoch training run."""
    output_dir = tmp_path / "run"
    result = runner.invoke(
        app,
        ["train", "--train", str(corpus), "--valid", str(corpus), "-o", str(output_dir), "-c", str(tiny_config_file)],
    )
    assert result.exit_code == 0, result.output
    return output_dir


def test_synth_writes_corpus_and_manifest(corpus):
    """Test the synthetic corpus and its manifest."""
    manifest = json.loads((corpus.parent / "manifest.json").read_text())

    assert len(load_corpus(corpus)) == 3
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 1
    assert manifest["outputs"] == [str(corpus)]


def test_prepare_data(runner, tmp_path):
    """Test conversion of a ParlAI-format file."""
    original = tmp_path / "train_both_original.txt"
    original.write_text(PARLAI_TEXT, encoding="utf-8")
    output = tmp_path / "out" / "train.jsonl"

    result = runner.invoke(app, ["prepare-data", "--original", str(original), "-o", str(output)])

    assert result.exit_code == 0, result.output
    records = load_corpus(output)
    assert len(records) == 1
    assert records[0].persona_a[0] == "i like dogs ."
    manifest = json.loads((output.parent / "manifest.json").read_text())
    assert list(manifest["corpus_hashes"]) == [str(original)]


def test_train_writes_artifacts(trained, corpus, tiny_config_file):
    """Test checkpoint, training log and manifest of a training run."""
    checkpoint = load_checkpoint(trained / "model.ckpt")
    manifest = json.loads((trained / "manifest.json").read_text())
    log_lines = (trained / "train_log.jsonl").read_text().splitlines()

    assert checkpoint.config.hidden_dim == 3
    assert json.loads(log_lines[-1])["kind"] == "epoch"
    assert manifest["command"] == "train"
    assert manifest["file_config"]["hidden_dim"] == "3"
    assert set(manifest["corpus_hashes"]) == {str(corpus)}
    assert manifest["resolved_config"]["family"] == "hre"


def test_train_flags_override_config_file(runner, tmp_path, corpus, tiny_config_file):
    """Test that command-line flags win over the config file."""
    output_dir = tmp_path / "imn"
    args = ["train", "--train", str(corpus), "--valid", str(corpus), "-o", str(output_dir), "-c", str(tiny_config_file)]
    result = runner.invoke(app, [*args, "--family", "imn", "--strategy", "ca", "--set", "hidden_dim=2"])

    assert result.exit_code == 0, result.output
    config = load_checkpoint(output_dir / "model.ckpt").config
    assert config.family.value == "imn"
    assert config.strategy.value == "ca"
    assert config.hidden_dim == 2


def test_train_bad_config_is_usage_error(runner, tmp_path, corpus):
    """Test that an unknown config key exits with a usage error."""
    bad = tmp_path / "bad.cfg"
    bad.write_text("hidden_dim=3\nbogus=1\n", encoding="utf-8")

    args = ["train", "--train", str(corpus), "--valid", str(corpus), "-o", str(tmp_path), "-c", str(bad)]
    result = runner.invoke(app, args)

    assert result.exit_code == 2
    assert "bogus" in result.output


def test_evaluate_checkpoint(runner, tmp_path, trained, corpus):
    """Test the metrics TSV, aggregate JSON and fusion weights of an evaluation."""
    output_dir = tmp_path / "eval"
    result = runner.invoke(
        app, ["evaluate", "--data", str(corpus), "--checkpoint", str(trained / "model.ckpt"), "-o", str(output_dir)]
    )

    assert result.exit_code == 0, result.output
    rows = (output_dir / "metrics.tsv").read_text().splitlines()
    aggregate = json.loads((output_dir / "metrics.json").read_text())
    assert rows[0] == "example_id\trank\tscore_true\thits1"
    assert len(rows) == 1 + aggregate["n"] == 7
    assert aggregate["family"] == "hre"
    assert (output_dir / "fusion_weights.tsv").exists()
    assert "MRR" in result.output


def test_evaluate_without_checkpoint(runner, tmp_path, corpus, tiny_config_file):
    """Test that evaluation without a checkpoint ranks with an untrained model."""
    output_dir = tmp_path / "chance"
    result = runner.invoke(
        app,
        ["evaluate", "--data", str(corpus), "-o", str(output_dir), "-c", str(tiny_config_file), "--family", "imn"],
    )

    assert result.exit_code == 0, result.output
    assert json.loads((output_dir / "metrics.json").read_text())["family"] == "imn"


@pytest.mark.slow
def test_evaluate_untrained_model_is_at_chance(runner, tmp_path, tiny_config_file):
    """Test that evaluating an untrained seed-0 model gives hits@1 near 1 in 20."""
    data = tmp_path / "none.jsonl"
    runner.invoke(app, ["synth", "-o", str(data), "--dialogues", "400", "--signal", "none", "--seed", "8"])

    args = ["evaluate", "--data", str(data), "-o", str(tmp_path / "eval"), "-c", str(tiny_config_file)]
    result = runner.invoke(app, args)

    assert result.exit_code == 0, result.output
    aggregate = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert aggregate["n"] == 2000
    assert aggregate["seed"] == 0
    assert abs(aggregate["hits1"] - 0.05) < 0.02


def test_evaluate_family_mismatch(runner, tmp_path, trained, corpus):
    """Test that a checkpoint cannot be evaluated as another family."""
    result = runner.invoke(
        app,
        [
            "evaluate",
            "--data",
            str(corpus),
            "--checkpoint",
            str(trained / "model.ckpt"),
            "-o",
            str(tmp_path / "eval"),
            "--family",
            "transformer",
        ],
    )

    assert result.exit_code == 1
    assert isinstance(result.exception, CheckpointMismatchError)


def test_rank_writes_orderings(runner, tmp_path, trained, corpus):
    """Test the full candidate ordering of every example."""
    output_dir = tmp_path / "ranked"
    result = runner.invoke(
        app, ["rank", "--data", str(corpus), "--checkpoint", str(trained / "model.ckpt"), "-o", str(output_dir)]
    )

    assert result.exit_code == 0, result.output
    header, *rows = (output_dir / "rankings.tsv").read_text().splitlines()
    assert header == "example_id\ttrue_index\trank\torder"
    assert len(rows) == 6
    assert sorted(int(i) for i in rows[0].split("\t")[3].split(",")) == [0, 1, 2, 3]


def write_aggregate(path, family, strategy, side="self", hits1=0.5, mrr=0.6, **extra):
    data = {"hits1": hits1, "mrr": mrr, "n": 10, "family": family, "strategy": strategy, "persona_side": side}
    path.write_text(json.dumps({**data, **extra}), encoding="utf-8")
    return path


def test_report_with_reference(runner, tmp_path, trained, corpus):
    """Test the results table with published reference numbers."""
    output_dir = tmp_path / "eval"
    runner.invoke(
        app, ["evaluate", "--data", str(corpus), "--checkpoint", str(trained / "model.ckpt"), "-o", str(output_dir)]
    )
    table = tmp_path / "tables" / "results.tsv"

    result = runner.invoke(app, ["report", str(output_dir / "metrics.json"), "--with-reference", "-o", str(table)])

    assert result.exit_code == 0, result.output
    header, row = table.read_text().splitlines()
    assert header.split("\t") == [
        "model",
        "self-original:hits1",
        "self-original:mrr",
        "self-original:reference_hits1",
        "self-original:reference_mrr",
    ]
    assert row.split("\t")[0] == "hre-ra"
    assert row.split("\t")[3:] == ["58.1", "71.8"]
    assert (table.parent / "manifest.json").exists()


def test_report_model_by_persona_matrix(runner, tmp_path):
    """Test that results pivot into models by rows and persona settings by columns."""
    inputs = [
        write_aggregate(tmp_path / "a.json", "imn", "ra", "partner", hits1=0.25, mrr=0.5),
        write_aggregate(tmp_path / "b.json", "hre", "ra", "self", hits1=0.5, mrr=0.625),
        write_aggregate(tmp_path / "c.json", "imn", "ra", "self", hits1=0.75, mrr=0.875),
        write_aggregate(tmp_path / "d.json", "hre", "ra", "partner", hits1=0.125, mrr=0.25),
    ]
    table = tmp_path / "results.tsv"

    result = runner.invoke(app, ["report", *map(str, inputs), "-o", str(table)])

    assert result.exit_code == 0, result.output
    header, *rows = [line.split("\t") for line in table.read_text().splitlines()]
    assert header == [
        "model",
        "self-original:hits1",
        "self-original:mrr",
        "partner-original:hits1",
        "partner-original:mrr",
    ]
    assert rows == [
        ["imn-ra", "75.0", "87.5", "25.0", "50.0"],
        ["hre-ra", "50.0", "62.5", "12.5", "25.0"],
    ]


def test_report_labels_subtype_ablation(runner, tmp_path):
    """Test that the transformer without subtype embeddings gets its own row and reference."""
    full = write_aggregate(tmp_path / "full.json", "transformer", "cra")
    ablated = write_aggregate(tmp_path / "ablated.json", "transformer", "cra", use_subtype=False)
    table = tmp_path / "results.tsv"

    result = runner.invoke(app, ["report", str(full), str(ablated), "--with-reference", "-o", str(table)])

    assert result.exit_code == 0, result.output
    rows = [line.split("\t") for line in table.read_text().splitlines()[1:]]
    assert [row[0] for row in rows] == ["transformer-cra", "transformer-cra-nosubtype"]
    assert rows[0][3:] == ["84.3", "90.3"]
    assert rows[1][3:] == ["83.6", "89.9"]


def test_report_rejects_missing_family(runner, tmp_path):
    """Test that an aggregate without a model family is a usage error."""
    path = tmp_path / "nofamily.json"
    path.write_text(json.dumps({"hits1": 0.5, "mrr": 0.6, "n": 4}), encoding="utf-8")

    result = runner.invoke(app, ["report", str(path)])

    assert result.exit_code == 2


def test_report_rejects_other_json(runner, tmp_path):
    """Test that a file without aggregate metrics is a usage error."""
    other = tmp_path / "other.json"
    other.write_text('{"unrelated": true}', encoding="utf-8")

    result = runner.invoke(app, ["report", str(other)])

    assert result.exit_code == 2


def test_chat_ranks_pool_until_quit(runner, tmp_path, trained):
    """Test one chat turn followed by /quit."""
    candidates = tmp_path / "pool.txt"
    candidates.write_text("i love pizza\nhello there\nmy cat sleeps all day\n", encoding="utf-8")
    persona = tmp_path / "persona.txt"
    persona.write_text("i love pizza .\ni have a cat .\ni live by the sea .\n", encoding="utf-8")

    result = runner.invoke(
        app,
        [
            "chat",
            "--checkpoint",
            str(trained / "model.ckpt"),
            "--candidates",
            str(candidates),
            "--persona",
            str(persona),
        ],
        input="hi there\n/quit\n",
    )

    assert result.exit_code == 0, result.output
    assert "3 candidates loaded" in result.output
    assert "1. " in result.output
    assert "3. " in result.output


def test_chat_needs_two_candidates(runner, tmp_path, trained):
    candidates = tmp_path / "pool.txt"
    candidates.write_text("only one\n", encoding="utf-8")

    result = runner.invoke(app, ["chat", "--checkpoint", str(trained / "model.ckpt"), "--candidates", str(candidates)])

    assert result.exit_code == 2
