"""Toy classification training with metric and scaling-weight logging."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vbb import tensor as T
from vbb.backbone import VBBModel, save_checkpoint
from vbb.errors import NumericError
from vbb.harness.config import RunConfig
from vbb.harness.csvio import write_csv
from vbb.harness.data import SyntheticDataset, make_dataset
from vbb.harness.optim import AdamW, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: VBBModel
    train_accuracy: list[float]
    test_accuracy: list[float]
    losses: list[float]

    @property
    def final_accuracy(self) -> float:
        return self.train_accuracy[-1]

    @property
    def best_accuracy(self) -> float:
        return max(self.train_accuracy)


def accuracy(model: VBBModel, data: SyntheticDataset, batch_size: int = 128) -> float:
    correct = 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            logits = model.forward(data.images[start:start + batch_size], mode="eval")
            correct += int((logits.data.argmax(axis=1) == data.labels[start:start + batch_size]).sum())
    return correct / len(data)


def _scaling_row(epoch: int, model: VBBModel) -> list:
    row: list = [epoch]
    for stats in model.scaling_weight_stats():
        row.extend(stats)
    return row


def train(cfg: RunConfig, out_dir=None) -> TrainResult:
    """Train one model; writes CSVs and a checkpoint when ``out_dir`` is set.

    Raises :class:`NumericError` as soon as a batch loss is not finite.
    """
    model = VBBModel(cfg.model)
    size = cfg.model.image_size
    train_set = make_dataset(cfg.task, cfg.samples, size, cfg.seed, cfg.noise)
    test_set = make_dataset(cfg.task, cfg.test_samples, size, cfg.seed + 1_000_003, cfg.noise)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    order_rng = np.random.default_rng([cfg.seed, 7])

    metrics, scaling = [], [_scaling_row(0, model)]
    result = TrainResult(model, [], [], [])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.lr = cosine_lr(cfg.lr, step, total)
            opt.zero_grad()
            logits = model.forward(train_set.images[idx], mode="train", step=step)
            loss = T.cross_entropy_with_logits(logits, train_set.labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
            step += 1
        mean_loss = float(np.mean(batch_losses))
        train_acc = accuracy(model, train_set)
        test_acc = accuracy(model, test_set)
        result.losses.append(mean_loss)
        result.train_accuracy.append(train_acc)
        result.test_accuracy.append(test_acc)
        metrics.append([epoch, mean_loss, train_acc, test_acc, opt.lr])
        scaling.append(_scaling_row(epoch, model))
        log.info("epoch %d loss %.4f train_acc %.3f test_acc %.3f", epoch, mean_loss, train_acc, test_acc)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", ["epoch", "loss", "train_accuracy", "test_accuracy", "lr"], metrics)
        header = ["epoch"]
        for i in range(len(cfg.model.stages)):
            header += [f"stage{i}_alpha", f"stage{i}_beta", f"stage{i}_lambda"]
        write_csv(out / "scaling_weights.csv", header, scaling)
        save_checkpoint(model, out / "checkpoint.vbb")
    return result
