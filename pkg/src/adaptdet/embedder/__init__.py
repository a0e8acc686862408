from adaptdet.embedder.base import Embedder, EmbedderError, Embedding, as_vector, letterbox, similarity
from adaptdet.embedder.grid import GridMeanEmbedder
from adaptdet.embedder.siamese import EmbedderConfig, SiameseNet, TorchEmbedder, module_checksum


def load_embedder(config: EmbedderConfig):
    """Embedder for inference. Model-backed backbones need a trained checkpoint."""
    if config.backbone_id == "grid-mean":
        return GridMeanEmbedder()
    if not config.checkpoint:
        raise EmbedderError(f"backbone {config.backbone_id!r} requires a checkpoint for inference")
    return TorchEmbedder.from_checkpoint(config.checkpoint)


def embed(patch, embedder) -> Embedding:
    """Embed one patch and return the unit-normalised vector."""
    return Embedding(as_vector(embedder.embed(patch))).normalize()


__all__ = [
    "Embedder",
    "EmbedderConfig",
    "EmbedderError",
    "Embedding",
    "GridMeanEmbedder",
    "SiameseNet",
    "TorchEmbedder",
    "embed",
    "letterbox",
    "load_embedder",
    "module_checksum",
    "similarity",
]
