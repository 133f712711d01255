"""Training loop: epochs, evaluation, early stopping, checkpoints.

Each epoch reshuffles the patch set, walks it in whole batches (forward
in train mode, fused softmax/cross-entropy gradient, full backward, one
Adam step per batch), then scores the evaluation images.

Early stopping keeps a reference epoch that advances only when an
evaluation improves on it by at least `min_improvement` (relative by
default); training stops once the current epoch is `patience_epochs`
past the reference.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ChannelStats, PatchSet, shuffle_epoch, standardize
from .errors import ConfigError, ContractError, NumericalError
from .losses import AdamState, adam_step, softmax_ce_with_grad
from .metrics import (ScoreTable, confusion_matrix, dsc_from_confusion,
                      iou_from_confusion)
from .network import Network, backward, forward, infer_logits, save_model

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and stopping settings for one training run."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 100
    patience_epochs: int = 20
    min_improvement: float = 0.01
    improvement_mode: str = "relative"
    eval_every: int = 1
    seed: int = 0
    checkpoint_dir: str | None = None
    keep_all_checkpoints: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience_epochs < 1:
            raise ConfigError(
                f"patience_epochs must be >= 1, got {self.patience_epochs}"
            )
        if not 0.0 < self.min_improvement < 1.0:
            raise ConfigError(
                f"min_improvement must lie strictly between 0 and 1, got "
                f"{self.min_improvement}"
            )
        if self.improvement_mode not in ("relative", "absolute"):
            raise ConfigError(
                f"improvement_mode must be 'relative' or 'absolute', got "
                f"{self.improvement_mode!r}"
            )
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    eval_mean_dsc: float  # nan on epochs without an evaluation


@dataclass
class TrainHistory:
    """Epoch records in order; epochs are consecutive integers from 1."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        expected = self.records[-1].epoch + 1 if self.records else 1
        if record.epoch != expected:
            raise ContractError(
                f"epoch {record.epoch} breaks the consecutive sequence "
                f"(expected {expected})"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def evaluated(self) -> list[EpochRecord]:
        return [r for r in self.records if math.isfinite(r.eval_mean_dsc)]

    @property
    def best_epoch(self) -> int:
        """Epoch of the highest evaluation DSC (earliest on exact ties)."""
        scored = self.evaluated()
        if not scored:
            raise ContractError("no evaluated epochs in history")
        best = scored[0]
        for r in scored[1:]:
            if r.eval_mean_dsc > best.eval_mean_dsc:
                best = r
        return best.epoch

    @property
    def best_dsc(self) -> float:
        scored = self.evaluated()
        if not scored:
            raise ContractError("no evaluated epochs in history")
        return max(r.eval_mean_dsc for r in scored)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_acc", "eval_mean_dsc"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.mean_loss),
                                 repr(r.train_accuracy), repr(r.eval_mean_dsc)])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        history = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                history.append(EpochRecord(
                    epoch=int(row["epoch"]),
                    mean_loss=float(row["loss"]),
                    train_accuracy=float(row["train_acc"]),
                    eval_mean_dsc=float(row["eval_mean_dsc"]),
                ))
        return history


def train_epoch(net: Network, patches: PatchSet, adam: AdamState,
                stats: ChannelStats) -> tuple[float, float]:
    """One pass over the patch set; one Adam step per batch.

    Returns:
        (mean batch loss, pixel accuracy over the epoch).
    """
    params = net.parameters()
    if len(adam.m) != len(params):
        raise ContractError("optimizer state does not match the network")
    total_loss = 0.0
    correct = 0
    pixels = 0
    batches = 0
    for imgs, labs in patches.iter_batches():
        x = standardize(imgs, stats)
        labels = labs.astype(np.int64)
        logits, cache = forward(net, x, "train")
        pred = logits.argmax(axis=3)
        correct += int((pred == labels).sum())
        pixels += labels.size
        loss, grad = softmax_ce_with_grad(logits, labels)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss in batch {batches + 1}")
        grads = backward(net, cache, grad)
        adam_step(params, grads, adam)
        total_loss += loss
        batches += 1
    return total_loss / batches, correct / pixels


def evaluate_model(net: Network, pairs, stats: ChannelStats) -> ScoreTable:
    """Score full-image predictions for (image, label) pairs."""
    if not pairs:
        raise ContractError("need at least one evaluation pair")
    k = net.manifest.class_count
    dsc_rows = []
    iou_rows = []
    for img, labels in pairs:
        logits = infer_logits(net, standardize(np.asarray(img), stats))
        pred = logits.argmax(axis=2)
        cm = confusion_matrix(pred, np.asarray(labels), k)
        dsc_rows.append(dsc_from_confusion(cm))
        iou_rows.append(iou_from_confusion(cm))
    return ScoreTable(np.asarray(dsc_rows), np.asarray(iou_rows))


def early_stop_check(history: TrainHistory, config: TrainConfig) -> bool:
    """True when the latest epoch is `patience_epochs` past the reference.

    The reference starts at the first evaluated epoch and advances to
    any later epoch whose DSC improves on the reference by at least
    min_improvement (relative: dsc >= ref * (1 + m); absolute:
    dsc >= ref + m).
    """
    scored = history.evaluated()
    if not scored:
        return False
    ref = scored[0]
    for r in scored[1:]:
        if config.improvement_mode == "relative":
            bar = ref.eval_mean_dsc * (1.0 + config.min_improvement)
        else:
            bar = ref.eval_mean_dsc + config.min_improvement
        if r.eval_mean_dsc >= bar:
            ref = r
    return scored[-1].epoch - ref.epoch >= config.patience_epochs


def _prune_checkpoints(ckpt_dir: Path, keep_epochs) -> None:
    keep = {f"epoch_{e:04d}.hsg" for e in keep_epochs}
    for f in ckpt_dir.glob("epoch_*.hsg"):
        if f.name not in keep:
            f.unlink()


def train(net: Network, patches: PatchSet, eval_pairs, stats: ChannelStats,
          config: TrainConfig, log=None) -> tuple[Network, TrainHistory]:
    """Full training loop; returns the best-evaluation network and history.

    The input network is optimized in place; the returned network is a
    snapshot of the epoch with the highest evaluation DSC (earliest on
    ties). If an epoch aborts on a numerical failure, the last completed
    epoch's snapshot (or the initial state) is returned with the history
    collected so far. With a checkpoint_dir set, per-epoch model files
    are written and pruned to the best and latest epoch unless
    keep_all_checkpoints is set.
    """
    if not eval_pairs:
        raise ContractError("need at least one evaluation pair")
    rng = np.random.default_rng(config.seed)
    adam = AdamState.init(net.parameters(), alpha=config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2,
                          epsilon=config.adam_epsilon)
    history = TrainHistory()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_net: Network | None = None
    best_dsc = -math.inf
    best_epoch = 0
    last_good = net.copy()
    ps = patches
    for epoch in range(1, config.max_epochs + 1):
        ps = shuffle_epoch(ps, rng)
        try:
            loss, acc = train_epoch(net, ps, adam, stats)
        except NumericalError as exc:
            if log:
                log(f"epoch {epoch}: aborted on numerical failure: {exc}")
            break
        last_good = net.copy()
        if epoch % config.eval_every == 0:
            dsc = evaluate_model(net, eval_pairs, stats).mean_dsc
        else:
            dsc = float("nan")
        history.append(EpochRecord(epoch=epoch, mean_loss=loss,
                                   train_accuracy=acc, eval_mean_dsc=dsc))
        if log:
            log(f"epoch {epoch}: loss {loss:.6f}, accuracy {acc:.4f}, "
                f"eval DSC {dsc:.4f}")
        if math.isfinite(dsc) and dsc > best_dsc:
            best_dsc = dsc
            best_epoch = epoch
            best_net = net.copy()
        if ckpt_dir is not None:
            save_model(net, ckpt_dir / f"epoch_{epoch:04d}.hsg", stats)
            if not config.keep_all_checkpoints:
                keep = {epoch}
                if best_epoch:
                    keep.add(best_epoch)
                _prune_checkpoints(ckpt_dir, keep)
        if early_stop_check(history, config):
            if log:
                log(f"early stop after epoch {epoch}")
            break
    if best_net is None:
        best_net = last_good
    return best_net, history
