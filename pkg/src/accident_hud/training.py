"""Training and evaluation of the hotspot classifier."""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset

from ._io import fmt, write_csv
from .imagery import DatasetManifest, ManifestEntry, load_image, preprocess
from .model import CLASS_NAMES, HOTSPOT, HotspotClassifier

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    learning_rate: float = 0.001
    momentum: float = 0.9
    mode: str = "full"  # or "fc_only"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "fc_only"):
            raise ValueError(f"mode must be 'full' or 'fc_only', got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0 or self.momentum < 0:
            raise ValueError("training hyperparameters must be positive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BinaryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


def binary_metrics(y_true, y_pred, positive: int = HOTSPOT) -> BinaryMetrics:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    pos_t, pos_p = y_true == positive, y_pred == positive
    tp = int(np.sum(pos_t & pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    n = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryMetrics((tp + tn) / n if n else 0.0, precision, recall, f1, tp, fp, tn, fn)


class ImageDataset(Dataset):
    def __init__(self, entries: list[ManifestEntry], mean, std):
        self.entries = entries
        self.mean, self.std = mean, std
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if i not in self._cache:
            x = preprocess(load_image(self.entries[i].path), self.mean, self.std)
            self._cache[i] = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))
        return self._cache[i], CLASS_NAMES.index(self.entries[i].label)


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    test: Optional[BinaryMetrics] = None


def _loader(entries, model, batch_size, shuffle, gen=None):
    if not entries:
        return None
    ds = ImageDataset(entries, model.backbone.mean, model.backbone.std)
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=gen)


def _configure(model: HotspotClassifier, mode: str):
    full = mode == "full"
    model.backbone.set_trainable(full)
    for p in model.abm.parameters():
        p.requires_grad_(full)
    for p in model.fc.parameters():
        p.requires_grad_(True)
    return [p for p in model.parameters() if p.requires_grad]


def _set_train_mode(model: HotspotClassifier, mode: str):
    model.train()
    if mode == "fc_only":
        # frozen parts keep their batch-norm statistics too
        model.backbone.eval()
        model.abm.eval()


def run_epoch(model, loader, criterion, optimizer, mode):
    _set_train_mode(model, mode)
    total, count = 0.0, 0
    for x, y in loader:
        optimizer.zero_grad()
        loss = criterion(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} after {count} samples")
        loss.backward()
        optimizer.step()
        total += loss.item() * len(y)
        count += len(y)
    return total / count


@torch.no_grad()
def predict(model, loader):
    model.eval()
    ys, preds, losses = [], [], []
    for x, y in loader:
        logits = model(x)
        losses.append(nn.functional.cross_entropy(logits, y, reduction="sum").item())
        ys.append(y)
        preds.append(logits.argmax(dim=1))
    y = torch.cat(ys).numpy()
    return y, torch.cat(preds).numpy(), sum(losses) / len(y)


def evaluate(entries_or_loader, model) -> BinaryMetrics:
    loader = entries_or_loader
    if isinstance(entries_or_loader, list):
        loader = _loader(entries_or_loader, model, 16, False)
    y, pred, _ = predict(model, loader)
    return binary_metrics(y, pred)


def train(manifest: DatasetManifest, config: TrainConfig, model: HotspotClassifier,
          log_path=None, on_epoch=None) -> TrainResult:
    """Fit ``model`` in place with SGD + momentum.

    The loss is cross-entropy over the two softmax outputs, which equals
    binary cross-entropy on the hotspot probability. ``on_epoch(row, model)``
    is called after every epoch; a truthy return stops training early.
    """
    gen = seed_everything(config.seed)
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("manifest has an empty train split")
    train_loader = _loader(train_entries, model, config.batch_size, True, gen)
    val_loader = _loader(manifest.split("val"), model, config.batch_size, False)
    test_loader = _loader(manifest.split("test"), model, config.batch_size, False)

    params = _configure(model, config.mode)
    optimizer = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    criterion = nn.CrossEntropyLoss()
    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        train_loss = run_epoch(model, train_loader, criterion, optimizer, config.mode)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": math.nan, "val_acc": math.nan}
        if val_loader is not None:
            y, pred, val_loss = predict(model, val_loader)
            row["val_loss"], row["val_acc"] = val_loss, float(np.mean(y == pred))
        result.history.append(row)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.3f", epoch, train_loss, row["val_loss"], row["val_acc"])
        if on_epoch is not None and on_epoch(row, model):
            break
    if test_loader is not None:
        result.test = evaluate(test_loader, model)
    if log_path is not None:
        write_training_log(log_path, result.history)
    return result


def write_training_log(path, history) -> None:
    write_csv(path, ["epoch", "train_loss", "val_loss", "val_acc"],
              [[r["epoch"], fmt(r["train_loss"]), fmt(r["val_loss"]), fmt(r["val_acc"])] for r in history])
