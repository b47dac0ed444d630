"""Mini-batch training of the twin network on augmented view pairs."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import AugmentationPool, augment_batch
from .infer import argmax_rows, label_representations
from .losses import LossConfig, loss_terms
from .metrics import evaluate
from .network import DivergenceError, Network, NetworkConfig, build_network, label_forward, to_tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "loss", "loss_w", "loss_b")
EVAL_COLUMNS = ("acc", "kappa", "nmi", "ari", "purity", "divergence")


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 100
    base_lr: float = 0.02
    lr_decay_factor: float = 0.1
    decay_interval_epochs: int = 20
    weight_decay: float = 5e-3
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.decay_interval_epochs < 1:
            raise ValueError("decay_interval_epochs must be positive")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    loss_w: float
    loss_b: float
    acc: float | None = None
    kappa: float | None = None
    nmi: float | None = None
    ari: float | None = None
    purity: float | None = None
    divergence: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        has_eval = any(r.acc is not None for r in self.records)
        columns = HISTORY_COLUMNS + (EVAL_COLUMNS if has_eval else ())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for r in self.records:
            row = []
            for name in columns:
                value = getattr(r, name)
                row.append(value if name == "epoch" else ("" if value is None else f"{value:.10g}"))
            writer.writerow(row)
        return buf.getvalue()


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by ``lr_decay_factor`` every ``decay_interval_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return config.base_lr * config.lr_decay_factor ** (epoch // config.decay_interval_epochs)


def make_optimizer(net: Network, config: TrainConfig) -> torch.optim.Adam:
    # torch's Adam adds weight_decay * param to the gradient (L2, not decoupled)
    return torch.optim.Adam(net.parameters(), lr=config.base_lr, betas=config.betas,
                            eps=config.adam_eps, weight_decay=config.weight_decay)


def train_step(net: Network, optimizer, view_a: np.ndarray, view_b: np.ndarray, loss_config: LossConfig):
    """One optimizer step on a view pair; returns ``(loss, loss_w, loss_b)`` floats."""
    optimizer.zero_grad(set_to_none=True)
    _, ya = label_forward(net, to_tensor(view_a))
    _, yb = label_forward(net, to_tensor(view_b))
    loss, lw, lb = loss_terms(ya, yb, loss_config)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return loss.item(), lw.item(), lb.item()


def epoch_seeds(seed: int, epoch: int) -> tuple[np.random.Generator, int]:
    """Shuffling generator and augmentation base seed for one epoch."""
    shuffle_rng = np.random.default_rng([seed, epoch, 0])
    aug_seed = int(np.random.SeedSequence([seed, epoch, 1]).generate_state(1, dtype=np.uint64)[0])
    return shuffle_rng, aug_seed


def _as_array(patches) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        return patches.astype(np.float32, copy=False)
    return np.stack([p.values for p in patches]).astype(np.float32)


def train(patches, pool: AugmentationPool, net_config: NetworkConfig, train_config: TrainConfig,
          ground_truth=None, pool_b: AugmentationPool | None = None, eval_patches=None):
    """Optimise a freshly initialised network; returns ``(network, history)``.

    ``ground_truth`` holds one label per evaluation patch (``eval_patches``,
    default ``patches``); entries outside ``[0, C)`` are ignored. When given,
    every epoch record also carries clustering metrics and the divergence
    score of the label representations.
    """
    data = _as_array(patches)
    m = train_config.batch_size
    if data.shape[0] < m:
        raise ValueError(f"{data.shape[0]} patches is fewer than one batch of {m}")
    if data.shape[-1] != net_config.input_channels:
        raise ValueError(f"patches have {data.shape[-1]} channels, network expects {net_config.input_channels}")

    net = build_network(net_config, train_config.seed)
    optimizer = make_optimizer(net, train_config)
    history = TrainHistory()

    if ground_truth is not None:
        eval_data = data if eval_patches is None else _as_array(eval_patches)
        truth = np.asarray(ground_truth, dtype=np.int64)
        if truth.shape[0] != eval_data.shape[0]:
            raise ValueError("ground_truth length differs from the evaluation patches")
        keep = (truth >= 0) & (truth < net_config.cluster_count)
        eval_data, truth = eval_data[keep], truth[keep]

    n_batches = data.shape[0] // m
    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(train_config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        shuffle_rng, aug_seed = epoch_seeds(train_config.seed, epoch)
        order = shuffle_rng.permutation(data.shape[0])
        net.train()
        sums = np.zeros(3)
        for b in range(n_batches):
            idx = order[b * m:(b + 1) * m]
            view_a, view_b = augment_batch(data[idx], pool, aug_seed, idx, pool_b)
            try:
                sums += train_step(net, optimizer, view_a, view_b, train_config.loss)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch + 1}, batch {b + 1}: {exc}") from None
        loss, lw, lb = sums / n_batches
        record = EpochRecord(epoch + 1, lr, loss, lw, lb)
        if ground_truth is not None:
            y = label_representations(net, eval_data, train_config.eval_batch_size)
            pred, _ = argmax_rows(y)
            report = evaluate(pred, truth, net_config.cluster_count, y)
            for name in EVAL_COLUMNS:
                setattr(record, name, getattr(report, name))
        history.records.append(record)
        log.info("epoch %d lr %.3g loss %.5f (W %.4f, B %.4f)%s", epoch + 1, lr, loss, lw, lb,
                 "" if record.acc is None else f" acc {record.acc:.4f}")
    net.eval()
    return net, history

