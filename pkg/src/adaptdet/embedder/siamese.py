"""Siamese matching network: one shared backbone + linear projection per branch,
compared with cosine similarity."""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from adaptdet.embedder.base import EmbedderError, letterbox
from adaptdet.ingest import ImagePatch

CHECKPOINT_FORMAT_VERSION = 1
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EmbedderConfig:
    backbone_id: str = "grid-mean"
    input_size: int = 224
    feature_dim: int | None = None  # inferred from the backbone when None
    checkpoint: str | None = None
    embedder_version: str | None = None
    pretrained: bool = False  # torchvision ImageNet weights, needs network access

    def __post_init__(self) -> None:
        if self.input_size <= 0:
            raise ValueError("input_size must be positive")
        if self.feature_dim is not None and self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown embedder config keys: {sorted(unknown)}")
        return cls(**d)


class TinyBackbone(nn.Module):
    """Small conv net for smoke tests and CPU experiments."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out_dim = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def _strip_classifier(model: nn.Module) -> int:
    # replace the final Linear of the classification head with Identity
    for attr in ("heads", "head", "fc", "classifier"):
        head = getattr(model, attr, None)
        if head is None:
            continue
        if isinstance(head, nn.Linear):
            setattr(model, attr, nn.Identity())
            return head.in_features
        linears = [(name, m) for name, m in head.named_modules() if isinstance(m, nn.Linear)]
        if linears:
            name, lin = linears[-1]
            parent = head
            *path, leaf = name.split(".")
            for p in path:
                parent = getattr(parent, p)
            setattr(parent, leaf, nn.Identity())
            return lin.in_features
    raise EmbedderError(f"cannot locate a classification head on {type(model).__name__}")


def build_backbone(backbone_id: str, pretrained: bool = False) -> tuple[nn.Module, int]:
    """Backbone module and its feature width."""
    if backbone_id == "tiny":
        net = TinyBackbone()
        return net, net.out_dim
    import torchvision

    try:
        model = torchvision.models.get_model(backbone_id, weights="DEFAULT" if pretrained else None)
    except ValueError as exc:
        raise EmbedderError(f"unknown backbone {backbone_id!r}") from exc
    return model, _strip_classifier(model)


class SiameseNet(nn.Module):
    def __init__(self, backbone: nn.Module, feature_dim: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, feature_dim)
        self.feature_dim = feature_dim

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    # both branches are the same module; kept as names for readability at call sites
    embed_query = branch
    embed_gallery = branch

    def forward(self, query: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
        return F.cosine_similarity(self.embed_query(query), self.embed_gallery(gallery), dim=1)


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def preprocess(patches: Sequence[ImagePatch | np.ndarray], input_size: int) -> torch.Tensor:
    arr = np.stack([letterbox(np.asarray(getattr(p, "pixels", p)), input_size) for p in patches])
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).float().div_(255.0)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def init_model(config: EmbedderConfig, seed: int = 0) -> SiameseNet:
    """Fresh model for training; loads weights from ``config.checkpoint`` if set.

    A checkpoint may be a full siamese checkpoint written by :func:`save_checkpoint`
    or a bare backbone state dict.
    """
    torch.manual_seed(seed)
    backbone, dim = build_backbone(config.backbone_id, config.pretrained)
    if config.feature_dim is not None and config.feature_dim != dim:
        raise EmbedderError(f"backbone {config.backbone_id} yields {dim} features, config says {config.feature_dim}")
    model = SiameseNet(backbone, dim)
    if config.checkpoint:
        state = _torch_load(config.checkpoint)
        if "model_state" in state:
            model.load_state_dict(state["model_state"])
        else:
            missing, _ = backbone.load_state_dict(state, strict=False)
            if missing:
                raise EmbedderError(f"backbone weights in {config.checkpoint} miss {len(missing)} tensors")
    elif config.backbone_id != "tiny" and not config.pretrained:
        raise EmbedderError(f"backbone {config.backbone_id!r} needs a checkpoint or pretrained=true")
    return model


def _torch_load(path: str | Path) -> dict:
    if not Path(path).is_file():
        raise EmbedderError(f"checkpoint not found: {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise EmbedderError(f"cannot read checkpoint {path}: {exc}") from exc


def next_version(version: str | None, backbone_id: str) -> str:
    base = version or f"{backbone_id}/r0"
    m = re.fullmatch(r"(.*)/r(\d+)", base)
    if m:
        return f"{m.group(1)}/r{int(m.group(2)) + 1}"
    return f"{base}/r1"


def save_checkpoint(path: str | Path, model: SiameseNet, config: EmbedderConfig, version: str, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(config)
    cfg.update(feature_dim=model.feature_dim, checkpoint=None, embedder_version=version)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "embedder_config": cfg,
        "embedder_version": version,
        "model_state": model.state_dict(),
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class TorchEmbedder:
    """Inference wrapper around a trained :class:`SiameseNet` checkpoint."""

    def __init__(self, model: SiameseNet, config: EmbedderConfig, version: str, batch_size: int = 32):
        self.model = model.eval()
        self.config = config
        self.version = version
        self.dim = model.feature_dim
        self.batch_size = batch_size

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "TorchEmbedder":
        state = _torch_load(path)
        if state.get("format_version") != CHECKPOINT_FORMAT_VERSION or "model_state" not in state:
            raise EmbedderError(f"{path} is not a siamese checkpoint of a supported version")
        config = EmbedderConfig.from_dict(state["embedder_config"])
        backbone, dim = build_backbone(config.backbone_id)
        model = SiameseNet(backbone, dim)
        model.load_state_dict(state["model_state"])
        return cls(model, config, state["embedder_version"])

    @torch.inference_mode()
    def _run(self, patches: Sequence[ImagePatch], branch) -> np.ndarray:
        out = []
        for i in range(0, len(patches), self.batch_size):
            x = preprocess(patches[i : i + self.batch_size], self.config.input_size)
            out.append(branch(x).double().numpy())
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.dim))

    def embed_batch(self, patches: Sequence[ImagePatch]) -> np.ndarray:
        return self._run(list(patches), self.model.embed_gallery)

    def embed_query_batch(self, patches: Sequence[ImagePatch]) -> np.ndarray:
        return self._run(list(patches), self.model.embed_query)

    def embed(self, patch: ImagePatch) -> np.ndarray:
        return self.embed_batch([patch])[0]
