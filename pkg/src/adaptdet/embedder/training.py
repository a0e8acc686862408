"""Pair sampling and the siamese training loop.

Pairs are drawn so that a fraction ``positive_fraction`` (default one half)
shares a class and has target 1; the rest come from two different classes with
target 0. The cosine output is mapped to [0, 1] and regressed onto the target
with a mean squared error.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from adaptdet.embedder.siamese import (
    EmbedderConfig,
    init_model,
    module_checksum,
    next_version,
    preprocess,
    save_checkpoint,
)
from adaptdet.gallery import augment
from adaptdet.ingest import ImagePatch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 10
    freeze_backbone_epochs: int = 1
    positive_fraction: float = 0.5
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    pairs_per_epoch: int = 2048
    augment: bool = True  # expand every training patch into its 8 rotations

    def __post_init__(self) -> None:
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie strictly between 0 and 1")
        if self.epochs < 0 or self.freeze_backbone_epochs < 0:
            raise ValueError("epochs and freeze_backbone_epochs must be non-negative")
        # epochs=0 is a no-op run, so the default freeze of 1 is tolerated there
        if self.epochs > 0 and self.freeze_backbone_epochs > self.epochs:
            raise ValueError("freeze_backbone_epochs cannot exceed epochs")
        if self.batch_size <= 0 or self.pairs_per_epoch <= 0:
            raise ValueError("batch_size and pairs_per_epoch must be positive")


def _check_dataset(sizes: Mapping[str, int]) -> list[str]:
    classes = sorted(c for c, n in sizes.items() if n > 0)
    if len(classes) < 2:
        raise ValueError("pair sampling needs at least two non-empty classes (no negatives possible otherwise)")
    return classes


def sample_pair_indices(
    sizes: Mapping[str, int], positive_fraction: float, rng: np.random.Generator
) -> Iterator[tuple[str, int, str, int, int]]:
    """Endless stream of ``(class_q, idx_q, class_g, idx_g, target)``."""
    classes = _check_dataset(sizes)
    while True:
        if rng.random() < positive_fraction:
            c = classes[rng.integers(len(classes))]
            n = sizes[c]
            if n >= 2:
                i, j = rng.choice(n, size=2, replace=False)
            else:
                i = j = 0
            yield c, int(i), c, int(j), 1
        else:
            a, b = rng.choice(len(classes), size=2, replace=False)
            ca, cb = classes[a], classes[b]
            yield ca, int(rng.integers(sizes[ca])), cb, int(rng.integers(sizes[cb])), 0


def sample_pairs(
    dataset: Mapping[str, Sequence[ImagePatch]], positive_fraction: float = 0.5, rng: np.random.Generator | None = None
) -> Iterator[tuple[ImagePatch, ImagePatch, int]]:
    """Endless stream of ``(query_patch, gallery_patch, target)`` triples."""
    rng = rng if rng is not None else np.random.default_rng()
    sizes = {c: len(p) for c, p in dataset.items()}
    for cq, iq, cg, ig, target in sample_pair_indices(sizes, positive_fraction, rng):
        yield dataset[cq][iq], dataset[cg][ig], target


@dataclass
class TrainResult:
    checkpoint: Path
    embedder_version: str
    epoch_losses: list[float]
    step_losses: list[tuple[int, int, float]] = field(repr=False)
    backbone_checksums: list[str] = field(repr=False)  # [init, after epoch 1, ...]


def train(
    dataset: Mapping[str, Sequence[ImagePatch]],
    config: TrainConfig,
    embedder_config: EmbedderConfig,
    checkpoint_path: str | Path,
    log_path: str | Path | None = None,
) -> TrainResult:
    _check_dataset({c: len(p) for c, p in dataset.items()})
    model = init_model(embedder_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)

    pools = {}
    for c in sorted(dataset):
        patches = list(dataset[c])
        if config.augment:
            patches = [a for p in patches for a in augment(p)]
        if patches:
            pools[c] = preprocess(patches, embedder_config.input_size)
    sampler = sample_pair_indices({c: len(t) for c, t in pools.items()}, config.positive_fraction, rng)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    checksums = [module_checksum(model.backbone)]
    epoch_losses: list[float] = []
    step_losses: list[tuple[int, int, float]] = []
    steps_per_epoch = math.ceil(config.pairs_per_epoch / config.batch_size)
    log_fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")
    try:
        for epoch in range(1, config.epochs + 1):
            frozen = epoch <= config.freeze_backbone_epochs
            model.train()
            model.backbone.requires_grad_(not frozen)
            if frozen:
                model.backbone.eval()  # keep normalisation buffers fixed as well
            total = 0.0
            for step in range(steps_per_epoch):
                n = min(config.batch_size, config.pairs_per_epoch - step * config.batch_size)
                picks = [next(sampler) for _ in range(n)]
                q = torch.stack([pools[cq][iq] for cq, iq, _, _, _ in picks])
                g = torch.stack([pools[cg][ig] for _, _, cg, ig, _ in picks])
                target = torch.tensor([t for *_, t in picks], dtype=torch.float32)
                optimizer.zero_grad(set_to_none=True)
                loss = F.mse_loss((model(q, g) + 1.0) / 2.0, target)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, step)
                loss.backward()
                optimizer.step()
                total += value * n
                step_losses.append((epoch, step, value))
                if log_fh:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, "loss": value}) + "\n")
            epoch_losses.append(total / config.pairs_per_epoch)
            checksums.append(module_checksum(model.backbone))
            logger.info("epoch %d/%d mean loss %.5f%s", epoch, config.epochs, epoch_losses[-1], " (backbone frozen)" if frozen else "")
    finally:
        if log_fh:
            log_fh.close()

    version = next_version(embedder_config.embedder_version, embedder_config.backbone_id)
    model.backbone.requires_grad_(True)
    save_checkpoint(
        checkpoint_path,
        model,
        embedder_config,
        version,
        extra={"train_config": asdict(config), "optimizer": "adam", "loss": "mse_mapped_cosine", "epoch_losses": epoch_losses},
    )
    return TrainResult(Path(checkpoint_path), version, epoch_losses, step_losses, checksums)
