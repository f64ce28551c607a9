"""Training recipe: weighted multi-head loss, step schedule with warmup,
SGD with Nesterov momentum, and the epoch loop with metrics logging.

The default configuration trains for 200 epochs at batch size 128, starting
from lr 0.1 (reached linearly over the first epoch) and dividing by 5 after
epochs 60, 120 and 160, with weight decay 5e-4 on every parameter.

In deterministic mode all randomness (shuffling, augmentation, dropout) is
driven by saved generator state, data loading is single-threaded, and the
wall-time column of the metrics CSV is written as 0.0 so that two runs with
the same seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from .augment import augment_batch, normalize, to_unit
from .data import Cifar100Dataset, compute_channel_means
from .errors import ConfigError, TrainingDiverged
from .models import SEResNet, load_checkpoint, save_checkpoint

METRICS_HEADER = ["epoch", "train_loss", "train_err", "test_err", "lr", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    base_lr: float = 0.1
    decay_epochs: tuple[int, ...] = (60, 120, 160)
    decay_factor: float = 5.0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True
    warmup_epochs: int = 1
    seed: int = 0
    loss_weights: tuple[float, ...] = ()
    augment: bool = True
    random_crop: bool = True
    random_flip: bool = True
    random_rotation: bool = True
    exclude_bn_from_decay: bool = False
    deterministic: bool = True
    checkpoint_every: int = 1
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("base_lr and decay_factor must be positive")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigError(f"decay epoch {self.decay_epochs[-1]} not below epochs={self.epochs}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss weights must be nonnegative, got {self.loss_weights}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float
    lr: float
    seconds: float


TrainingHistory = list[EpochRecord]


def combine_losses(main_loss, aux_losses, weights) -> Tensor | float:
    """Weighted sum: main + sum_k w_k * aux_k. Works on floats or tensors."""
    if len(aux_losses) != len(weights):
        raise ValueError(f"{len(aux_losses)} aux losses but {len(weights)} weights")
    total = main_loss
    for w, loss in zip(weights, aux_losses):
        total = total + w * loss
    return total


def combined_loss(main_logits: Tensor, aux_logits_list, labels: Tensor, weights) -> Tensor:
    """Mean cross-entropy of the main head plus weighted aux cross-entropies."""
    n = main_logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels outside [0, {n})")
    main = F.cross_entropy(main_logits, labels)
    aux = [F.cross_entropy(logits, labels) for logits in aux_logits_list]
    return combine_losses(main, aux, weights)


def lr_at(epoch: int, step_in_epoch: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for one optimizer step.

    Warmup epochs ramp linearly per step, reaching ``base_lr`` exactly at the
    final warmup step; afterwards the rate is ``base_lr / decay_factor**k``
    where k counts decay epochs <= epoch (decay applies at the boundary).
    """
    if epoch < cfg.warmup_epochs:
        total = cfg.warmup_epochs * steps_per_epoch
        return cfg.base_lr * (epoch * steps_per_epoch + step_in_epoch + 1) / total
    k = sum(1 for d in cfg.decay_epochs if d <= epoch)
    return cfg.base_lr / cfg.decay_factor**k


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    if cfg.exclude_bn_from_decay:
        bn_params, other = [], []
        for module in model.modules():
            target = bn_params if isinstance(module, torch.nn.BatchNorm2d) else other
            target.extend(module.parameters(recurse=False))
        groups = [
            {"params": other, "weight_decay": cfg.weight_decay},
            {"params": bn_params, "weight_decay": 0.0},
        ]
    else:
        groups = [{"params": list(model.parameters()), "weight_decay": cfg.weight_decay}]
    return torch.optim.SGD(
        groups, lr=cfg.base_lr, momentum=cfg.momentum, nesterov=cfg.nesterov, weight_decay=cfg.weight_decay
    )


def evaluate(model: SEResNet, dataset: Cifar100Dataset, mean, batch_size: int = 256) -> float:
    """Top-1 accuracy percentage over the full split (normalization only)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = torch.from_numpy(dataset.images[start : start + batch_size])
            labels = torch.from_numpy(dataset.fine_labels[start : start + batch_size])
            batch = normalize(to_unit(images), mean)
            out = model(batch)
            correct += (out.main_logits.argmax(dim=1) == labels).sum().item()
    if was_training:
        model.train()
    return 100.0 * correct / len(dataset)


def append_metrics_row(path: Path, record: EpochRecord) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow(
            [record.epoch, record.train_loss, record.train_err, record.test_err, record.lr, record.seconds]
        )


def read_metrics_csv(path) -> TrainingHistory:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [
            EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]))
            for r in reader
        ]


def train(
    model: SEResNet,
    train_set: Cifar100Dataset,
    test_set: Cifar100Dataset,
    cfg: TrainConfig,
    out_dir,
    mean=None,
    resume_from=None,
    log=None,
) -> TrainingHistory:
    """Run the full recipe; returns one record per completed epoch.

    Writes ``metrics.csv`` (append-only) and ``last.ckpt`` under ``out_dir``.
    With ``resume_from`` pointing at a checkpoint, model/optimizer/rng state
    are restored and the loop continues at the saved epoch + 1; the
    continued history matches an uninterrupted run with the same seed.
    """
    cfg.validate()
    if model.spec.num_classes <= int(train_set.fine_labels.max()):
        raise ConfigError(
            f"model has {model.spec.num_classes} classes but labels reach {int(train_set.fine_labels.max())}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    if mean is None:
        # note: with a subset this differs from the cached full-split means
        mean = compute_channel_means(train_set)

    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    optimizer = build_optimizer(model, cfg)
    data_rng = torch.Generator()
    data_rng.manual_seed(cfg.seed)
    start_epoch = 0
    history: TrainingHistory = []

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["optimizer"] is None:
            raise ConfigError(f"checkpoint {resume_from} carries no optimizer state; cannot resume")
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        torch.set_rng_state(payload["torch_rng"])
        data_rng.set_state(payload["data_rng"])
        start_epoch = payload["epoch"] + 1

    images = torch.from_numpy(train_set.images)
    labels = torch.from_numpy(train_set.fine_labels)
    n = len(train_set)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.monotonic()
        perm = torch.randperm(n, generator=data_rng)
        loss_sum = 0.0
        seen = 0
        correct = 0
        lr = cfg.base_lr
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            batch_images = images[idx]
            batch_labels = labels[idx]
            if cfg.augment:
                batch = augment_batch(
                    batch_images,
                    data_rng,
                    mean,
                    crop=cfg.random_crop,
                    flip=cfg.random_flip,
                    rotation=cfg.random_rotation,
                )
            else:
                batch = normalize(to_unit(batch_images), mean)

            lr = lr_at(epoch, step, steps_per_epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            out = model(batch)
            loss = combined_loss(out.main_logits, out.aux_logits, batch_labels, cfg.loss_weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            loss_sum += loss.item() * len(idx)
            correct += (out.main_logits.argmax(dim=1) == batch_labels).sum().item()
            seen += len(idx)

        test_acc = evaluate(model, test_set, mean, cfg.eval_batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_err=100.0 * (1.0 - correct / seen),
            test_err=100.0 - test_acc,
            lr=lr,
            seconds=0.0 if cfg.deterministic else time.monotonic() - t0,
        )
        history.append(record)
        append_metrics_row(metrics_path, record)
        if log is not None:
            log(record)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            save_checkpoint(out_dir / "last.ckpt", model, epoch, optimizer, data_rng.get_state())
    return history
