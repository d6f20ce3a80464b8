"""
Training Loops
Mini-batch Adam loops for the base parser, the case module (parser frozen),
the retriever and ConcatCBR, plus the finetuning arm of the timing study.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from baselines.concat_cbr import ConcatCbrParser
from baselines.retriever import SentenceEncoder, retriever_loss, ted_weights
from data.dataset_io import Corpus
from data.schema import Example
from model.autodiff import Tensor, as_tensor
from model.optim import Adam
from model.parser import TextToQueryParser
from model.structcbr import CbrModule, loss_phi
from utils.error_handler import ContractViolation, NumericError

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    """Outcome of one loop; `updates` counts optimizer steps actually applied"""
    phase: str
    updates: int = 0
    seconds: float = 0.0
    losses: List[float] = field(default_factory=list)
    skipped: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    def to_dict(self) -> Dict:
        tail = self.losses[-10:]
        return {
            "updates": self.updates,
            "seconds": round(self.seconds, 4),
            "final_loss": self.final_loss,
            "mean_loss_last10": float(np.mean(tail)) if tail else None,
            "skipped": self.skipped,
        }


def shuffled_batches(items: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[List]:
    """Endless reshuffled passes over `items`, one batch at a time"""
    if not items:
        return
    while True:
        order = rng.permutation(len(items))
        for start in range(0, len(order), batch_size):
            yield [items[int(i)] for i in order[start:start + batch_size]]


def epoch_batches(items: Sequence, batch_size: int, rng: np.random.Generator) -> List[List]:
    order = rng.permutation(len(items))
    return [[items[int(i)] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


def _apply(loss: Tensor, optimizer: Adam, result: TrainingResult, count: int) -> None:
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"{result.phase}: non-finite loss {value} at update {result.updates}")
    result.losses.append(value / max(1, count))
    if not loss.requires_grad:
        # nothing trainable reached this batch
        result.skipped += 1
        return
    (loss / float(max(1, count))).backward()
    optimizer.step()
    result.updates += 1


def _run_loop(phase: str, steps: int, batches: Iterator[List], optimizer: Adam,
              batch_loss: Callable[[List], Tuple[Tensor, int]], log_every: int = 50,
              show_progress: bool = False) -> TrainingResult:
    result = TrainingResult(phase)
    start = time.perf_counter()
    for step in tqdm(range(steps), desc=phase, disable=not show_progress, unit="step"):
        batch = next(batches, None)
        if batch is None:
            logger.warning(f"{phase}: no training items, stopping")
            break
        optimizer.zero_grad()
        loss, count = batch_loss(batch)
        _apply(loss, optimizer, result, count)
        if log_every and (step + 1) % log_every == 0 and result.losses:
            logger.info(f"{phase}: step {step + 1}/{steps} loss={result.losses[-1]:.4f}")
    result.seconds = time.perf_counter() - start
    return result


def _sum(losses: List[Tensor]) -> Tensor:
    total = as_tensor(0.0)
    for loss in losses:
        total = total + loss
    return total


# ---------------------------------------------------------------------------
# Base parser
# ---------------------------------------------------------------------------

def train_base(parser: TextToQueryParser, corpus: Corpus, examples: Sequence[Example], steps: int,
               batch_size: int, lr: float, seed: int, grad_clip: Optional[float] = None,
               log_every: int = 50, show_progress: bool = False) -> TrainingResult:
    """Teacher-forced beam loss summed over gold subtrees, averaged over the batch"""
    rng = np.random.default_rng(seed)
    optimizer = Adam(parser.named_parameters(), lr=lr, clip_norm=grad_clip)

    def batch_loss(batch):
        return _sum([parser.loss(ex, corpus) for ex in batch]), len(batch)

    result = _run_loop("train-base", steps, shuffled_batches(list(examples), batch_size, rng), optimizer,
                       batch_loss, log_every, show_progress)
    logger.info(f"Base training done: {result.updates} updates in {result.seconds:.1f}s")
    return result


# ---------------------------------------------------------------------------
# Case module
# ---------------------------------------------------------------------------

def same_schema_groups(examples: Sequence[Example], group_size: int, rng: np.random.Generator) -> List[List[Example]]:
    """Shuffled groups of up to `group_size` examples that share a schema"""
    by_schema: Dict[str, List[Example]] = {}
    for ex in examples:
        by_schema.setdefault(ex.schema_id, []).append(ex)
    groups = []
    for schema_id in sorted(by_schema):
        members = by_schema[schema_id]
        order = rng.permutation(len(members))
        for start in range(0, len(order), group_size):
            group = [members[int(i)] for i in order[start:start + group_size]]
            if len(group) >= 2:
                groups.append(group)
            else:
                logger.warning(f"{group[0].example_id}: left alone in schema {schema_id}, no group this pass")
    return [groups[int(i)] for i in rng.permutation(len(groups))]


def _group_stream(examples: Sequence[Example], group_size: int, groups_per_batch: int,
                  rng: np.random.Generator) -> Iterator[List[List[Example]]]:
    while True:
        groups = same_schema_groups(examples, group_size, rng)
        if not groups:
            return
        for start in range(0, len(groups), groups_per_batch):
            yield groups[start:start + groups_per_batch]


def assert_theta_untouched(parser: TextToQueryParser) -> None:
    """The case-module loss must not reach the parser's parameters"""
    for name, tensor in parser.named_parameters().items():
        if tensor.grad is not None and np.any(tensor.grad != 0.0):
            raise ContractViolation(f"parser parameter {name} received a gradient during case-module training")


def train_cbr(cbr: CbrModule, parser: TextToQueryParser, corpus: Corpus, examples: Sequence[Example], steps: int,
              batch_size: int, group_size: int, lr: float, seed: int, grad_clip: Optional[float] = None,
              log_every: int = 50, show_progress: bool = False) -> TrainingResult:
    """
    Train phi with theta frozen.

    A batch of `batch_size` examples is made of batch_size / group_size
    same-schema groups; each member decodes against the rest of its group.
    """
    rng = np.random.default_rng(seed)
    optimizer = Adam(cbr.named_parameters(), lr=lr, clip_norm=grad_clip)
    groups_per_batch = max(1, batch_size // group_size)
    before = parser.parameter_hash()

    def batch_loss(batch):
        parser.zero_grad()
        losses, members = [], 0
        for group in batch:
            loss, count = loss_phi(cbr, parser, group, corpus)
            losses.append(loss)
            members += count
        return _sum(losses), members

    result = _run_loop("train-cbr", steps, _group_stream(list(examples), group_size, groups_per_batch, rng),
                       optimizer, batch_loss, log_every, show_progress)
    assert_theta_untouched(parser)
    if parser.parameter_hash() != before:
        raise ContractViolation("parser parameters changed during case-module training")
    logger.info(f"Case-module training done: {result.updates} updates in {result.seconds:.1f}s")
    return result


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def sample_partners(anchor: Example, pool: Sequence[Example], count: int,
                    rng: np.random.Generator) -> List[Example]:
    """Up to `count` distinct pool members other than the anchor"""
    candidates = [ex for ex in pool if ex.example_id != anchor.example_id]
    if len(candidates) <= count:
        return candidates
    picks = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[int(i)] for i in sorted(picks)]


def train_retriever(encoder: SentenceEncoder, examples: Sequence[Example], steps: int, batch_size: int,
                    partners: int, lr: float, seed: int, log_every: int = 50,
                    show_progress: bool = False) -> TrainingResult:
    """Cosine between utterances is pulled toward the tree-edit similarity of their queries"""
    rng = np.random.default_rng(seed)
    pool = list(examples)
    optimizer = Adam(encoder.named_parameters(), lr=lr)

    def batch_loss(batch):
        losses = []
        for anchor in batch:
            chosen = sample_partners(anchor, pool, partners, rng)
            if not chosen:
                continue
            weights = ted_weights(anchor.gold, [p.gold for p in chosen])
            losses.append(retriever_loss(encoder, anchor.tokens, [p.tokens for p in chosen], weights))
        return _sum(losses), len(losses)

    result = _run_loop("train-retriever", steps, shuffled_batches(pool, batch_size, rng), optimizer,
                       batch_loss, log_every, show_progress)
    logger.info(f"Retriever training done: {result.updates} updates")
    return result


def train_concatcbr(model: ConcatCbrParser, corpus: Corpus, examples: Sequence[Example], steps: int,
                    batch_size: int, lr: float, seed: int, grad_clip: Optional[float] = None,
                    log_every: int = 50, show_progress: bool = False) -> TrainingResult:
    """Continue training the parser with retrieved train cases on its input (self excluded)"""
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parser.named_parameters(), lr=lr, clip_norm=grad_clip)

    def batch_loss(batch):
        return _sum([model.loss(ex, corpus) for ex in batch]), len(batch)

    result = _run_loop("train-concatcbr", steps, shuffled_batches(list(examples), batch_size, rng), optimizer,
                       batch_loss, log_every, show_progress)
    logger.info(f"ConcatCBR training done: {result.updates} updates")
    return result


# ---------------------------------------------------------------------------
# Finetuning arm
# ---------------------------------------------------------------------------

def finetune_updates(epochs: int, cases: int, batch_size: int) -> int:
    return epochs * math.ceil(cases / batch_size) if cases else 0


def finetune(parser: TextToQueryParser, corpus: Corpus, cases: Sequence[Example], epochs: int, batch_size: int,
             lr: float, seed: int, grad_clip: Optional[float] = None) -> TrainingResult:
    """
    Full-theta updates on the adaptation cases only; mutates `parser`.

    Callers pass a copy. Update count is epochs * ceil(|cases| / batch_size).
    """
    rng = np.random.default_rng(seed)
    optimizer = Adam(parser.named_parameters(), lr=lr, clip_norm=grad_clip)
    result = TrainingResult("finetune")
    start = time.perf_counter()
    for _ in range(epochs):
        for batch in epoch_batches(list(cases), batch_size, rng):
            optimizer.zero_grad()
            _apply(_sum([parser.loss(ex, corpus) for ex in batch]), optimizer, result, len(batch))
    result.seconds = time.perf_counter() - start
    expected = finetune_updates(epochs, len(cases), batch_size)
    if result.updates + result.skipped != expected:
        raise ContractViolation(f"finetune applied {result.updates} updates, expected {expected}")
    return result
