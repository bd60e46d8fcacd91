"""Command-line interface: data preparation, training, evaluation, ranking, chat and report tables."""

import json
import logging
from collections.abc import Sequence
from datetime import UTC, datetime
from pathlib import Path
from typing import Annotated, Any

import click
import typer
from rich import box
from rich.console import Console
from rich.table import Table

from persona_fusion.checkpoint import ModelCheckpoint, from_matcher, load_checkpoint, restore_matcher, save_checkpoint
from persona_fusion.config import ConfigFileError, TrainConfig, config_load, file_values
from persona_fusion.corpus import (
    MatchingExample,
    SentenceBlock,
    assemble_corpus,
    convert_parlai,
    file_sha256,
    load_corpus,
    tokenize,
    write_corpus,
)
from persona_fusion.harness import build_matcher, evaluate, rank_examples, run_log_path, score_example, train_best_of
from persona_fusion.metrics import PUBLISHED_RESULTS, rank_candidates, reference_key
from persona_fusion.models import (
    AggregateMetrics,
    Family,
    PersonaConfig,
    PersonaSide,
    PersonaVersion,
    RankingReport,
    RunManifest,
    Signal,
    Strategy,
    SyntheticSpec,
)
from persona_fusion.synthetic import generate_synthetic
from persona_fusion.vocab import build_vocab

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="persona-fusion",
    help="Train and compare persona-fusion response selection models",
    add_completion=False,
    no_args_is_help=True,
)

console = Console()

MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"
METRICS_TSV = "metrics.tsv"
METRICS_JSON = "metrics.json"
FUSION_TSV = "fusion_weights.tsv"
RANKINGS_TSV = "rankings.tsv"


@app.callback()
def configure(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level")] = False,
) -> None:
    """Persona-fusion response selection."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        force=True,
    )


def _now() -> datetime:
    return datetime.now(UTC)


def _write_manifest(
    directory: Path,
    command: str,
    started_at: datetime,
    outputs: Sequence[Path],
    inputs: Sequence[Path] = (),
    config: TrainConfig | None = None,
    config_path: Path | None = None,
    overrides: dict[str, Any] | None = None,
    seed: int | None = None,
) -> Path:
    manifest = RunManifest(
        command=command,
        resolved_config=config.model_dump(mode="json") if config is not None else {},
        file_config=file_values(config_path),
        overrides={k: v for k, v in (overrides or {}).items() if v is not None},
        corpus_hashes={str(path): file_sha256(path) for path in inputs},
        seed=seed if seed is not None else (config.seed if config is not None else None),
        started_at=started_at,
        finished_at=_now(),
        outputs=[str(path) for path in outputs],
    )
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def _parse_settings(assignments: list[str] | None) -> dict[str, str]:
    values: dict[str, str] = {}
    for item in assignments or []:
        if "=" not in item:
            raise typer.BadParameter(f"expected key=value, got '{item}'", param_hint="--set")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _load_config(config_path: Path | None, overrides: dict[str, Any]) -> TrainConfig:
    try:
        return config_load(config_path, overrides)
    except ConfigFileError as e:
        raise typer.BadParameter(str(e), param_hint="--config" if e.line is not None else None) from e


def _report_table(title: str, report: RankingReport) -> Table:
    table = Table(title=title, box=box.ROUNDED, show_header=True, header_style="bold magenta")
    table.add_column("metric", style="cyan")
    table.add_column("value", justify="right")
    for k in sorted(report.hits):
        table.add_row(f"hits@{k}", f"{report.hits[k]:.4f}")
    table.add_row("MRR", f"{report.mrr:.4f}")
    table.add_row("examples", str(report.n))
    return table


FamilyOption = Annotated[Family | None, typer.Option("--family", help="Model family")]
StrategyOption = Annotated[Strategy | None, typer.Option("--strategy", help="Persona fusion strategy")]
SideOption = Annotated[PersonaSide | None, typer.Option("--persona-side", help="Persona to condition on")]
VersionOption = Annotated[PersonaVersion | None, typer.Option("--persona-version", help="Original or revised")]
AblateOption = Annotated[
    bool | None, typer.Option("--ablate-context/--keep-context", help="Remove the context from every example")
]
SeedOption = Annotated[int | None, typer.Option("--seed", min=0, help="Experiment seed")]
ConfigOption = Annotated[
    Path | None, typer.Option("--config", "-c", exists=True, dir_okay=False, help="Flat key=value config file")
]
ThreadsOption = Annotated[int | None, typer.Option("--threads", min=1, help="Evaluation threads (non-strict only)")]
StrictOption = Annotated[bool | None, typer.Option("--strict/--no-strict", help="Serial, bit-reproducible execution")]
SetOption = Annotated[list[str] | None, typer.Option("--set", help="Extra config value as key=value (repeatable)")]


@app.command("prepare-data")
def prepare_data(
    original: Annotated[Path, typer.Option("--original", exists=True, dir_okay=False, help="*_original.txt file")],
    output: Annotated[Path, typer.Option("--output", "-o", help="JSONL corpus to write")],
    revised: Annotated[
        Path | None, typer.Option("--revised", exists=True, dir_okay=False, help="Matching *_revised.txt file")
    ] = None,
) -> None:
    """Convert ParlAI-format persona dialogues into the JSONL corpus format."""
    started = _now()
    records, report = convert_parlai(original, revised)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(records, output)
    inputs = [original] + ([revised] if revised is not None else [])
    _write_manifest(output.parent, "prepare-data", started, [output], inputs)
    console.print(
        f"[green]Wrote {report.dialogues} dialogues[/green] to {output} "
        f"({len(report.skipped_lines)} skipped lines, {len(report.rejected_dialogues)} rejected dialogues)"
    )


@app.command()
def synth(
    output: Annotated[Path, typer.Option("--output", "-o", help="JSONL corpus to write")],
    dialogues: Annotated[int, typer.Option("--dialogues", min=1, help="Number of dialogues")] = 100,
    topics: Annotated[int, typer.Option("--topics", min=20, help="Number of topics")] = 24,
    signal: Annotated[Signal, typer.Option("--signal", help="What predicts the true response")] = Signal.PERSONA,
    seed: Annotated[int, typer.Option("--seed", min=0, help="Generation seed")] = 0,
    partner_rate: Annotated[
        float, typer.Option("--partner-rate", min=0.0, max=1.0, help="Share of responses using the partner persona")
    ] = 0.0,
    turns: Annotated[int, typer.Option("--turns", min=2, help="Utterances per dialogue")] = 6,
    candidates: Annotated[int, typer.Option("--candidates", min=2, help="Candidates per response slot")] = 20,
) -> None:
    """Generate a synthetic corpus whose true responses are predictable by construction."""
    started = _now()
    spec = SyntheticSpec(
        num_dialogues=dialogues,
        topics=topics,
        signal=signal,
        seed=seed,
        partner_rate=partner_rate,
        turns_per_dialogue=turns,
        num_candidates=candidates,
    )
    output.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(generate_synthetic(spec), output)
    _write_manifest(output.parent, "synth", started, [output], overrides=spec.model_dump(mode="json"), seed=seed)
    console.print(f"[green]Wrote {dialogues} synthetic dialogues[/green] to {output}")


@app.command("train")
def train_command(
    train_path: Annotated[Path, typer.Option("--train", exists=True, dir_okay=False, help="Training JSONL corpus")],
    valid_path: Annotated[Path, typer.Option("--valid", exists=True, dir_okay=False, help="Validation JSONL corpus")],
    output_dir: Annotated[Path, typer.Option("--output-dir", "-o", help="Directory for checkpoint, log, manifest")],
    family: FamilyOption = None,
    strategy: StrategyOption = None,
    persona_side: SideOption = None,
    persona_version: VersionOption = None,
    ablate_context: AblateOption = None,
    seed: SeedOption = None,
    config_path: ConfigOption = None,
    threads: ThreadsOption = None,
    strict: StrictOption = None,
    settings: SetOption = None,
    runs: Annotated[int, typer.Option("--runs", min=1, help="Train seeds seed..seed+runs-1, keep the best")] = 1,
    pretrained_vectors: Annotated[
        Path | None, typer.Option("--pretrained-vectors", exists=True, dir_okay=False, help="General word vectors")
    ] = None,
    corpus_vectors: Annotated[
        Path | None, typer.Option("--corpus-vectors", exists=True, dir_okay=False, help="Corpus-trained word vectors")
    ] = None,
) -> None:
    """Train a matcher and keep the epoch with the best validation hits@1."""
    started = _now()
    overrides: dict[str, Any] = {
        "family": family,
        "strategy": strategy,
        "persona_side": persona_side,
        "persona_version": persona_version,
        "ablate_context": ablate_context,
        "seed": seed,
        "threads": threads,
        "strict": strict,
        **_parse_settings(settings),
    }
    config = _load_config(config_path, overrides)
    train_records = load_corpus(train_path)
    valid_records = load_corpus(valid_path)
    vocab = build_vocab(
        [*train_records, *valid_records],
        pretrained_vectors,
        corpus_vectors,
        pretrained_dim=config.pretrained_dim,
        corpus_dim=config.corpus_dim,
        max_word_chars=config.max_word_chars,
        seed=config.seed,
        dtype=config.dtype,
    )
    output_dir.mkdir(parents=True, exist_ok=True)
    result = train_best_of(config, train_records, valid_records, runs, vocab, output_dir / TRAIN_LOG)
    checkpoint_path = save_checkpoint(result.checkpoint, output_dir / CHECKPOINT)

    logs = [run_log_path(output_dir / TRAIN_LOG, config.seed + i, runs) for i in range(runs)]
    inputs = [train_path, valid_path] + [p for p in (pretrained_vectors, corpus_vectors) if p is not None]
    _write_manifest(
        output_dir, "train", started, [checkpoint_path, *logs], inputs, config, config_path, overrides, config.seed
    )
    console.print(
        f"[green]Saved[/green] {checkpoint_path}: epoch {result.best_epoch}, seed {result.seed}, "
        f"validation hits@1 {result.best_hits1:.4f}, MRR {result.best_mrr:.4f}"
    )


def _persona_request(
    config: TrainConfig,
    side: PersonaSide | None,
    version: PersonaVersion | None,
    ablate: bool | None,
) -> PersonaConfig:
    return PersonaConfig(
        side=side if side is not None else config.persona_side,
        version=version if version is not None else config.persona_version,
        ablate_context=ablate if ablate is not None else config.ablate_context,
    )


def _untrained_checkpoint(config: TrainConfig, data: Sequence) -> ModelCheckpoint:
    vocab = build_vocab(
        data,
        pretrained_dim=config.pretrained_dim,
        corpus_dim=config.corpus_dim,
        max_word_chars=config.max_word_chars,
        seed=config.seed,
        dtype=config.dtype,
    )
    return from_matcher(build_matcher(config, vocab))


@app.command("evaluate")
def evaluate_command(
    data: Annotated[Path, typer.Option("--data", exists=True, dir_okay=False, help="JSONL corpus to evaluate on")],
    output_dir: Annotated[Path, typer.Option("--output-dir", "-o", help="Directory for metrics and manifest")],
    checkpoint_path: Annotated[
        Path | None,
        typer.Option("--checkpoint", exists=True, dir_okay=False, help="Trained model (omit: untrained model)"),
    ] = None,
    family: FamilyOption = None,
    strategy: StrategyOption = None,
    persona_side: SideOption = None,
    persona_version: VersionOption = None,
    ablate_context: AblateOption = None,
    seed: SeedOption = None,
    config_path: ConfigOption = None,
    threads: ThreadsOption = None,
    strict: StrictOption = None,
    settings: SetOption = None,
) -> None:
    """Rank every candidate of every example and write hits@k/MRR reports."""
    started = _now()
    records = load_corpus(data)
    overrides: dict[str, Any] = {"threads": threads, "strict": strict}
    if checkpoint_path is not None:
        checkpoint = load_checkpoint(checkpoint_path)
        config = checkpoint.config
    else:
        overrides.update(
            {
                "family": family,
                "strategy": strategy,
                "persona_side": persona_side,
                "persona_version": persona_version,
                "ablate_context": ablate_context,
                "seed": seed,
                **_parse_settings(settings),
            }
        )
        config = _load_config(config_path, overrides)
        checkpoint = _untrained_checkpoint(config, records)

    persona = _persona_request(config, persona_side, persona_version, ablate_context)
    report = evaluate(
        checkpoint,
        records,
        persona,
        family=family,
        strategy=strategy,
        threads=threads or config.threads,
        strict=strict if strict is not None else config.strict,
        corpus_hash=file_sha256(data),
    )

    output_dir.mkdir(parents=True, exist_ok=True)
    outputs = [output_dir / METRICS_TSV, output_dir / METRICS_JSON]
    with open(outputs[0], "w", encoding="utf-8", newline="\n") as f:
        f.write("example_id\trank\tscore_true\thits1\n")
        for ranking in report.rankings:
            f.write(f"{ranking.example_id}\t{ranking.rank}\t{ranking.score_true!r}\t{int(ranking.rank == 1)}\n")
    outputs[1].write_text(json.dumps(report.aggregate(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if report.fusion_weights:
        outputs.append(output_dir / FUSION_TSV)
        with open(outputs[-1], "w", encoding="utf-8", newline="\n") as f:
            f.write("example_id\tstrategy\tweights\n")
            for example_id, weights in report.fusion_weights.items():
                f.write(f"{example_id}\t{config.strategy.value}\t{','.join(repr(w) for w in weights)}\n")

    inputs = [data] + ([checkpoint_path] if checkpoint_path is not None else [])
    _write_manifest(output_dir, "evaluate", started, outputs, inputs, config, config_path, overrides)
    console.print(_report_table(f"{config.family.value}-{config.strategy.value} ({persona.label})", report))


@app.command()
def rank(
    data: Annotated[Path, typer.Option("--data", exists=True, dir_okay=False, help="JSONL corpus to rank")],
    checkpoint_path: Annotated[Path, typer.Option("--checkpoint", exists=True, dir_okay=False, help="Trained model")],
    output_dir: Annotated[Path, typer.Option("--output-dir", "-o", help="Directory for rankings and manifest")],
    persona_side: SideOption = None,
    persona_version: VersionOption = None,
    ablate_context: AblateOption = None,
    threads: ThreadsOption = None,
    strict: StrictOption = None,
) -> None:
    """Write the full candidate ordering of every example."""
    started = _now()
    checkpoint = load_checkpoint(checkpoint_path)
    model = restore_matcher(checkpoint)
    config = model.config
    persona = _persona_request(config, persona_side, persona_version, ablate_context)
    examples, _ = assemble_corpus(load_corpus(data), persona, model.vocab, config.limits)
    rankings, _ = rank_examples(
        model, examples, threads or config.threads, strict if strict is not None else config.strict
    )

    output_dir.mkdir(parents=True, exist_ok=True)
    output = output_dir / RANKINGS_TSV
    with open(output, "w", encoding="utf-8", newline="\n") as f:
        f.write("example_id\ttrue_index\trank\torder\n")
        for ranking in rankings:
            order = ",".join(map(str, ranking.order))
            f.write(f"{ranking.example_id}\t{ranking.true_index}\t{ranking.rank}\t{order}\n")
    overrides = {"threads": threads, "strict": strict}
    _write_manifest(output_dir, "rank", started, [output], [data, checkpoint_path], config, None, overrides)
    console.print(f"[green]Ranked {len(rankings)} examples[/green] into {output}")


def _read_lines(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


@app.command()
def chat(
    checkpoint_path: Annotated[Path, typer.Option("--checkpoint", exists=True, dir_okay=False, help="Trained model")],
    candidates_path: Annotated[
        Path, typer.Option("--candidates", exists=True, dir_okay=False, help="Candidate responses, one per line")
    ],
    persona_path: Annotated[
        Path | None, typer.Option("--persona", exists=True, dir_okay=False, help="Bot profiles, one per line")
    ] = None,
    top: Annotated[int, typer.Option("--top", min=1, help="Candidates shown per turn")] = 3,
) -> None:
    """Terminal demo: type utterances, the model ranks the candidate pool each turn.

    The best candidate becomes the bot's reply and joins the context. Type /quit to stop.
    """
    model = restore_matcher(load_checkpoint(checkpoint_path))
    vocab, limits = model.vocab, model.config.limits
    pool = _read_lines(candidates_path)
    if len(pool) < 2:
        raise typer.BadParameter("the candidate file needs at least 2 lines", param_hint="--candidates")
    profiles = _read_lines(persona_path) if persona_path is not None else []
    persona_rows = [vocab.word_ids(tokenize(p)[: limits.max_profile_words]) for p in profiles if tokenize(p)]
    persona = PersonaConfig(
        side=PersonaSide.SELF if persona_rows else PersonaSide.NONE, version=model.config.persona_version
    )
    candidate_rows = [vocab.word_ids(tokenize(c)[: limits.max_response_words] or ["<unk>"]) for c in pool]
    history: list[list[str]] = []

    console.print(f"[bold cyan]{len(pool)} candidates loaded.[/bold cyan] Type /quit to stop.")
    turn = 0
    while True:
        try:
            text = typer.prompt("you", default="", show_default=False)
        except click.exceptions.Abort:
            break
        if text.strip() == "/quit":
            break
        tokens = tokenize(text)[: limits.max_utterance_words]
        if not tokens:
            continue
        history.append(tokens)
        context = [vocab.word_ids(u) for u in history[-limits.max_context_utterances :]]
        example = MatchingExample(
            example_id=f"chat:{turn}",
            context=SentenceBlock.from_rows(context),
            persona=SentenceBlock.from_rows(persona_rows[: limits.max_profiles], total_rows=limits.max_profiles),
            candidates=SentenceBlock.from_rows(candidate_rows),
            label=0,
            persona_config=persona,
        )
        order, _ = rank_candidates(score_example(model, example), 0)
        for position, index in enumerate(order[:top], start=1):
            style = "bold green" if position == 1 else "dim"
            console.print(f"[{style}]{position}. {pool[index]}[/{style}]")
        history.append(tokenize(pool[order[0]])[: limits.max_utterance_words])
        turn += 1


def _persona_order(persona: PersonaConfig) -> tuple[int, int, int]:
    sides = list(PersonaSide)
    versions = list(PersonaVersion)
    return int(persona.ablate_context), versions.index(persona.version), sides.index(persona.side)


def _percent(value: float) -> str:
    return f"{100 * value:.1f}"


@app.command()
def report(
    inputs: Annotated[list[Path], typer.Argument(exists=True, dir_okay=False, help="Aggregate metrics JSON files")],
    output: Annotated[Path | None, typer.Option("--output", "-o", help="TSV table to write")] = None,
    with_reference: Annotated[
        bool, typer.Option("--with-reference", help="Add the published full-scale numbers where known")
    ] = False,
) -> None:
    """Tabulate results as a model x persona setting matrix of hits@1 / MRR (percent).

    Rows are models (family-strategy, with a -nosubtype suffix for the transformer ablation)
    and columns are persona settings, each split into hits@1 and MRR.
    """
    started = _now()
    cells: dict[tuple[str, str], AggregateMetrics] = {}
    models: list[str] = []
    personas: dict[str, PersonaConfig] = {}
    for path in inputs:
        try:
            metrics = AggregateMetrics.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as e:
            raise typer.BadParameter(f"{path} is not an aggregate metrics file: {e}") from e
        if metrics.family is None:
            raise typer.BadParameter(f"{path} does not name a model family")
        persona = PersonaConfig(
            side=metrics.persona_side, version=metrics.persona_version, ablate_context=metrics.ablate_context
        )
        key = reference_key(metrics.family, metrics.strategy, persona, use_subtype=metrics.use_subtype)
        model_label, persona_label = key.split("/")
        if (model_label, persona_label) in cells:
            raise typer.BadParameter(f"{path} repeats the {key} cell")
        cells[model_label, persona_label] = metrics
        if model_label not in models:
            models.append(model_label)
        personas[persona_label] = persona
    columns = sorted(personas, key=lambda label: _persona_order(personas[label]))

    header = ["model"]
    for persona_label in columns:
        header += [f"{persona_label}:hits1", f"{persona_label}:mrr"]
        if with_reference:
            header += [f"{persona_label}:reference_hits1", f"{persona_label}:reference_mrr"]
    rows: list[list[str]] = []
    for model_label in models:
        row = [model_label]
        for persona_label in columns:
            cell = cells.get((model_label, persona_label))
            row += [_percent(cell.hits1), _percent(cell.mrr)] if cell else ["-", "-"]
            if with_reference:
                reference = PUBLISHED_RESULTS.get(f"{model_label}/{persona_label}")
                row += [f"{reference[0]:.1f}", f"{reference[1]:.1f}"] if reference else ["-", "-"]
        rows.append(row)

    table = Table(title="Response selection results", box=box.ROUNDED, header_style="bold magenta")
    table.add_column("model", justify="left")
    for name in header[1:]:
        persona_label, metric = name.split(":")
        title = {"hits1": "hits@1", "mrr": "MRR", "reference_hits1": "ref hits@1", "reference_mrr": "ref MRR"}[metric]
        table.add_column(f"{persona_label}\n{title}", justify="right")
    for row in rows:
        table.add_row(*row)
    console.print(table)

    if output is not None:
        output.parent.mkdir(parents=True, exist_ok=True)
        lines = ["\t".join(header)] + ["\t".join(row) for row in rows]
        output.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_manifest(output.parent, "report", started, [output], inputs)
