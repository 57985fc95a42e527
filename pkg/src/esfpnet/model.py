"""Model assembly and checkpoint serialization."""

from pathlib import Path

import torch
import torch.nn as nn

from .backbone import MixTransformer, load_pretrained
from .decoder import ESFPDecoder
from .errors import CheckpointError
from .variants import VariantSpec, get_variant

CHECKPOINT_FORMAT_VERSION = 1


class ESFPNet(nn.Module):
    """Encoder-decoder segmentation network returning one logit per pixel."""

    def __init__(self, variant: VariantSpec, drop_rate: float = 0.0,
                 attn_drop_rate: float = 0.0, drop_path_rate: float = 0.0):
        super().__init__()
        self.variant = variant
        self.encoder = MixTransformer(
            variant.stages, drop_rate=drop_rate,
            attn_drop_rate=attn_drop_rate, drop_path_rate=drop_path_rate,
        )
        self.decoder = ESFPDecoder(variant.decoder)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(images))

    def freeze_encoder(self, frozen: bool = True) -> None:
        for param in self.encoder.parameters():
            param.requires_grad = not frozen


def build(variant_id: str, *, pretrained=None, strict_pretrained: bool = False,
          freeze_encoder: bool = False, seed: int | None = None,
          drop_rate: float = 0.0, attn_drop_rate: float = 0.0,
          drop_path_rate: float = 0.0) -> ESFPNet:
    """Construct a variant, optionally loading pretrained encoder weights.

    ``seed`` makes random initialization reproducible without perturbing the
    caller's global RNG state.
    """
    variant = get_variant(variant_id)
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            model = ESFPNet(variant, drop_rate, attn_drop_rate, drop_path_rate)
    else:
        model = ESFPNet(variant, drop_rate, attn_drop_rate, drop_path_rate)
    if pretrained is not None:
        manifest = load_pretrained(model.encoder, pretrained, strict=strict_pretrained)
        model.pretrained_manifest = manifest
    if freeze_encoder:
        model.freeze_encoder(True)
    return model


def save_model(model: ESFPNet, path) -> Path:
    """Serialize variant id plus weights; the file alone rebuilds the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "variant_id": model.variant.id,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_model(path, expect_variant: str | None = None) -> ESFPNet:
    """Rebuild a model from :func:`save_model` output.

    Truncated or foreign files raise CheckpointError rather than returning a
    partially loaded model. ``expect_variant`` pins the variant id.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"model file {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"model file {path} is truncated or corrupt: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise CheckpointError(f"model file {path} does not hold a serialized model")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"model file {path} has format version {version!r}, "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    variant_id = payload.get("variant_id")
    if expect_variant is not None and str(variant_id) != str(expect_variant).upper():
        raise CheckpointError(
            f"model file {path} holds variant {variant_id!r}, expected {expect_variant!r}"
        )
    model = build(variant_id)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except Exception as exc:
        raise CheckpointError(f"model file {path} is inconsistent: {exc}") from exc
    return model
