"""Training, evaluation and model selection."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np

from persona_fusion.autodiff import Tape, Tensor, backward
from persona_fusion.checkpoint import ModelCheckpoint, from_matcher, restore_matcher
from persona_fusion.config import TrainConfig
from persona_fusion.corpus import MatchingExample, assemble_corpus, sample_negatives
from persona_fusion.layers import Dropout
from persona_fusion.matchers import HreMatcher, ImnMatcher, Matcher
from persona_fusion.metrics import build_report, rank_candidates
from persona_fusion.models import (
    DialogueRecord,
    ExampleRanking,
    Family,
    PersonaConfig,
    RankingReport,
    ReportMetadata,
    Strategy,
)
from persona_fusion.optim import AdamState, NonFiniteGradientError, adam_step
from persona_fusion.seeding import derive_seed, substream
from persona_fusion.transformer import TransformerMatcher
from persona_fusion.vocab import Vocab, build_vocab

logger = logging.getLogger(__name__)

_MATCHERS: dict[Family, type[Matcher]] = {
    Family.HRE: HreMatcher,
    Family.IMN: ImnMatcher,
    Family.TRANSFORMER: TransformerMatcher,
}


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    Attributes:
        last_good: The best checkpoint seen so far, or the initial parameters
    """

    def __init__(self, message: str, last_good: ModelCheckpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    """Best checkpoint of a training run plus its log."""

    checkpoint: ModelCheckpoint
    best_epoch: int
    best_mrr: float
    epochs_run: int
    log: list[str] = field(default_factory=list)
    history: list[dict[str, Any]] = field(default_factory=list)

    @property
    def best_hits1(self) -> float:
        return self.checkpoint.best_hits1

    @property
    def seed(self) -> int:
        return self.checkpoint.config.seed


def build_matcher(config: TrainConfig, vocab: Vocab) -> Matcher:
    """Freshly initialised matcher of ``config.family``; init draws from the "init" substream."""
    return _MATCHERS[config.family](config, vocab, substream(config.seed, "init"))


def score_example(model: Matcher, example: MatchingExample) -> np.ndarray:
    """Evaluation-mode ranking scores, one per candidate."""
    return np.asarray(model.ranking_scores(example), dtype=np.float64)


def _rank_one(model: Matcher, example: MatchingExample) -> tuple[ExampleRanking, list[float] | None]:
    weights = None
    if model.family == Family.TRANSFORMER:
        scores = score_example(model, example)
    else:
        result = model.score(example)
        scores = np.asarray(result.logits.values, dtype=np.float64)
        if result.fusion is not None:
            matrix = result.fusion.as_array()
            row = matrix[example.label] if matrix.ndim == 2 else matrix
            weights = [float(w) for w in row]
    order, rank = rank_candidates(scores, example.label)
    ranking = ExampleRanking(
        example_id=example.example_id,
        true_index=example.label,
        order=order,
        rank=rank,
        score_true=float(scores[example.label]),
    )
    return ranking, weights


def rank_examples(
    model: Matcher, examples: Sequence[MatchingExample], threads: int = 1, strict: bool = True
) -> tuple[list[ExampleRanking], dict[str, list[float]]]:
    """Rank every candidate set.

    Args:
        model: Matcher in evaluation mode
        examples: Examples to rank
        threads: Worker threads; ignored in strict mode
        strict: Serial execution

    Returns:
        Rankings in input order and the true candidate's fusion weights by example id
    """
    if strict or threads <= 1:
        results = [_rank_one(model, example) for example in examples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda example: _rank_one(model, example), examples))
    rankings = [ranking for ranking, _ in results]
    weights = {ranking.example_id: w for ranking, w in results if w is not None}
    return rankings, weights


def evaluate_examples(
    model: Matcher,
    examples: Sequence[MatchingExample],
    threads: int = 1,
    strict: bool = True,
    corpus_hash: str = "",
) -> RankingReport:
    """RankingReport of ``model`` over already assembled examples."""
    if not examples:
        raise ValueError("no examples to evaluate")
    config = model.config
    persona = examples[0].persona_config
    rankings, weights = rank_examples(model, examples, threads, strict)
    metadata = ReportMetadata(
        family=config.family,
        strategy=config.strategy,
        persona_side=persona.side,
        persona_version=persona.version,
        ablate_context=persona.ablate_context,
        use_subtype=config.use_subtype,
        use_interaction=config.use_interaction,
        config_hash=config.config_hash,
        corpus_hash=corpus_hash,
        seed=config.seed,
    )
    return build_report(rankings, metadata=metadata, fusion_weights=weights)


def evaluate(
    checkpoint: ModelCheckpoint,
    records: Sequence[DialogueRecord],
    persona_config: PersonaConfig | None = None,
    *,
    family: Family | str | None = None,
    strategy: Strategy | str | None = None,
    threads: int = 1,
    strict: bool = True,
    corpus_hash: str = "",
) -> RankingReport:
    """Rank all candidates of every example in ``records`` with the checkpointed model.

    Args:
        checkpoint: Trained model
        records: Evaluation split
        persona_config: Persona side/version and context ablation (default: the training setting)
        family: Expected model family, checked against the checkpoint
        strategy: Expected fusion strategy, checked against the checkpoint
        threads: Evaluation worker threads when not strict
        strict: Serial execution
        corpus_hash: SHA-256 of the evaluated file, recorded in the report

    Returns:
        Per-example rankings with hits@1/2/5 and MRR

    Raises:
        CheckpointMismatchError: If the checkpoint holds another family or strategy
    """
    try:
        model = restore_matcher(checkpoint, family, strategy)
        persona_config = persona_config or model.config.persona_config
        examples, _ = assemble_corpus(records, persona_config, model.vocab, model.config.limits)
        report = evaluate_examples(model, examples, threads, strict, corpus_hash)
        logger.info(
            f"Evaluated {report.n} examples ({persona_config.label}): "
            f"hits@1={report.hits1:.4f} MRR={report.mrr:.4f}"
        )
        return report
    except Exception as e:
        logger.error(f"Error evaluating checkpoint: {str(e)}")
        raise


def _optimizer(config: TrainConfig, steps_per_epoch: int) -> AdamState:
    if config.is_recurrent:
        return AdamState(
            learning_rate=config.learning_rate,
            decay_rate=config.lr_decay_rate,
            decay_steps=config.lr_decay_steps,
            weight_decay=config.weight_decay,
        )
    return AdamState(
        learning_rate=config.learning_rate,
        total_steps=steps_per_epoch * config.max_epochs,
        weight_decay=config.weight_decay,
    )


def _emit(entry: dict[str, Any], log: list[str], sink: IO[str] | None) -> None:
    line = json.dumps(entry, separators=(",", ":"))
    log.append(line)
    if sink is not None:
        sink.write(line + "\n")
        sink.flush()


def train_step(
    model: Matcher,
    batch: Sequence[MatchingExample],
    state: AdamState,
    epoch_seed: int,
    dropout: Dropout,
) -> float:
    """One Adam update on the mean loss of ``batch``; returns the loss before the update.

    Raises:
        FloatingPointError: If the loss is not finite
        NonFiniteGradientError: If a gradient is not finite (parameters are left untouched)
    """
    params = model.parameters()
    mode = model.config.negative_sampling
    with Tape() as tape:
        total: Tensor | None = None
        for example in batch:
            loss = model.loss(sample_negatives(example, mode, epoch_seed), dropout)
            total = loss if total is None else total + loss
        batch_loss = total / len(batch)
        value = batch_loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        backward(tape, batch_loss, list(params.values()))
    adam_step(params, {name: param.grad for name, param in params.items()}, state)
    return value


def train(
    config: TrainConfig,
    train_records: Sequence[DialogueRecord],
    valid_records: Sequence[DialogueRecord],
    vocab: Vocab | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train a matcher and keep the epoch with the best validation hits@1.

    Ties on hits@1 go to the higher MRR, then to the earlier epoch. Training stops
    after ``config.patience`` epochs without improvement or at ``config.max_epochs``.
    Every random draw comes from a named substream of ``config.seed``.

    Args:
        config: Resolved training configuration
        train_records: Training split
        valid_records: Validation split used for model selection
        vocab: Vocabulary; built from both splits when None
        log_path: JSONL training log (step and epoch lines)

    Returns:
        The best checkpoint and the training log

    Raises:
        TrainingDivergedError: If the loss or a gradient becomes non-finite
    """
    if vocab is None:
        vocab = build_vocab(
            [*train_records, *valid_records],
            pretrained_dim=config.pretrained_dim,
            corpus_dim=config.corpus_dim,
            max_word_chars=config.max_word_chars,
            seed=config.seed,
            dtype=config.dtype,
        )
    model = build_matcher(config, vocab)
    train_examples, _ = assemble_corpus(train_records, config.persona_config, vocab, config.limits)
    valid_examples, _ = assemble_corpus(valid_records, config.persona_config, vocab, config.limits)
    if not train_examples:
        raise ValueError("the training split yields no examples")
    if not valid_examples:
        raise ValueError("the validation split yields no examples")

    batch_size = config.batch_size
    steps_per_epoch = math.ceil(len(train_examples) / batch_size)
    state = _optimizer(config, steps_per_epoch)
    best = from_matcher(model)
    best_mrr, best_epoch, stale, epoch = -1.0, 0, 0, 0
    log: list[str] = []
    history: list[dict[str, Any]] = []
    logger.info(
        f"Training {config.family.value}-{config.strategy.value} ({config.persona_config.label}) on "
        f"{len(train_examples)} examples, {steps_per_epoch} steps per epoch, seed {config.seed}"
    )

    sink = Path(log_path).open("w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = substream(config.seed, "shuffle", epoch).permutation(len(train_examples))
            epoch_seed = derive_seed(config.seed, "negatives", epoch)
            losses: list[float] = []
            for index, start in enumerate(range(0, len(train_examples), batch_size)):
                batch = [train_examples[i] for i in order[start : start + batch_size]]
                dropout = Dropout(config.dropout, substream(config.seed, "dropout", epoch, index), training=True)
                try:
                    loss = train_step(model, batch, state, epoch_seed, dropout)
                except (FloatingPointError, NonFiniteGradientError) as e:
                    logger.error(f"Training diverged at epoch {epoch}, step {state.step + 1}: {str(e)}")
                    raise TrainingDivergedError(f"training diverged: {e}", best) from e
                losses.append(loss)
                _emit({"kind": "step", "epoch": epoch, "step": state.step, "loss": loss}, log, sink)

            report = evaluate_examples(model, valid_examples, config.threads, config.strict)
            mean_loss = float(np.mean(losses))
            entry = {
                "kind": "epoch",
                "epoch": epoch,
                "hits1": report.hits1,
                "hits5": report.hits.get(5, 0.0),
                "mrr": report.mrr,
                "loss": mean_loss,
            }
            _emit(entry, log, sink)
            history.append(entry)
            logger.info(
                f"Epoch {epoch}: loss {mean_loss:.4f}, validation hits@1 {report.hits1:.4f}, MRR {report.mrr:.4f}"
            )

            if (report.hits1, report.mrr) > (best.best_hits1, best_mrr) or best_epoch == 0:
                best = from_matcher(model, step=state.step, best_hits1=report.hits1, epoch=epoch)
                best_mrr, best_epoch, stale = report.mrr, epoch, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info(f"No validation improvement for {stale} epochs; stopping after epoch {epoch}")
                    break
    finally:
        if sink is not None:
            sink.close()

    logger.info(f"Best epoch {best_epoch}: validation hits@1 {best.best_hits1:.4f}, MRR {best_mrr:.4f}")
    return TrainResult(
        checkpoint=best, best_epoch=best_epoch, best_mrr=best_mrr, epochs_run=epoch, log=log, history=history
    )


def run_log_path(log_path: str | Path | None, seed: int, runs: int) -> Path | None:
    """Per-run log file: ``log_path`` itself for a single run, ``<stem>.seed<seed><suffix>`` otherwise."""
    if log_path is None:
        return None
    path = Path(log_path)
    return path if runs == 1 else path.with_name(f"{path.stem}.seed{seed}{path.suffix}")


def train_best_of(
    config: TrainConfig,
    train_records: Sequence[DialogueRecord],
    valid_records: Sequence[DialogueRecord],
    runs: int = 1,
    vocab: Vocab | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train ``runs`` seeds (``seed``, ``seed + 1``, ...) and keep the best validation run.

    All runs share one vocabulary. Ties go to the higher MRR, then the earlier seed.
    """
    if runs < 1:
        raise ValueError(f"runs must be at least 1, got {runs}")
    if vocab is None:
        vocab = build_vocab(
            [*train_records, *valid_records],
            pretrained_dim=config.pretrained_dim,
            corpus_dim=config.corpus_dim,
            max_word_chars=config.max_word_chars,
            seed=config.seed,
            dtype=config.dtype,
        )
    best: TrainResult | None = None
    for offset in range(runs):
        seed = config.seed + offset
        run_config = config.model_copy(update={"seed": seed})
        result = train(run_config, train_records, valid_records, vocab, run_log_path(log_path, seed, runs))
        if best is None or (result.best_hits1, result.best_mrr) > (best.best_hits1, best.best_mrr):
            best = result
    if runs > 1:
        logger.info(f"Best of {runs} runs: seed {best.seed} with validation hits@1 {best.best_hits1:.4f}")
    return best
