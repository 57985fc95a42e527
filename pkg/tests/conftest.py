"""Shared fixtures and synthetic-data builders."""

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from esfpnet import EncoderStageConfig, DecoderConfig, Sample

# Canonical dataset names required by the fixed multi-dataset protocols.
TOY_DATASET_NAMES = (
    "cvc-clinicdb", "cvc-colondb", "cvc-t", "etis-laribpolypdb", "kvasir",
)


def make_blob_sample(rng: np.random.Generator, size: int = 64, lesion: bool = True,
                     dataset: str = "toy", case_id: str | None = None,
                     frame_id: str | None = None, idx: int = 0) -> Sample:
    """Dark noisy background with (optionally) one bright disk as the lesion."""
    image = rng.integers(20, 60, (size, size, 3)).astype(np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    if lesion:
        yy, xx = np.mgrid[:size, :size]
        cy, cx = rng.integers(size // 4, 3 * size // 4, 2)
        radius = int(rng.integers(size // 6, size // 4))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        image[disk] = rng.integers(180, 255, 3).astype(np.uint8)
        mask[disk] = 1
    return Sample(
        image=image, mask=mask,
        case_id=case_id if case_id is not None else f"case{idx}",
        frame_id=frame_id if frame_id is not None else f"case{idx}_frame{idx}",
        dataset=dataset,
    )


def make_toy_datasets(seed: int = 0, names=TOY_DATASET_NAMES, per_dataset: int = 6,
                      size: int = 64, normal_every: int = 4):
    """In-memory toy corpus: ``per_dataset`` frames per dataset, a few normal."""
    rng = np.random.default_rng(seed)
    datasets = {}
    for name in names:
        samples = []
        for i in range(per_dataset):
            lesion = (i % normal_every) != (normal_every - 1)
            samples.append(make_blob_sample(
                rng, size=size, lesion=lesion, dataset=name,
                case_id=f"{name}c{i // 2}", frame_id=f"{name}c{i // 2}_f{i}",
            ))
        datasets[name] = samples
    return datasets


def write_dataset_dir(root: Path, name: str, samples) -> Path:
    """Materialize samples as the images/ + masks/ on-disk layout."""
    base = Path(root) / name
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for sample in samples:
        Image.fromarray(sample.image).save(base / "images" / f"{sample.frame_id}.png")
        Image.fromarray((sample.mask * 255).astype(np.uint8)).save(
            base / "masks" / f"{sample.frame_id}.png")
    return base


def write_toy_root(root: Path, seed: int = 0, **kwargs) -> Path:
    datasets = make_toy_datasets(seed=seed, **kwargs)
    for name, samples in datasets.items():
        write_dataset_dir(root, name, samples)
    return Path(root)


def tiny_stage(embed_dim=8, depth=2, num_heads=1, sr_ratio=2, mlp_ratio=2,
               patch_size=3, stride=2) -> EncoderStageConfig:
    return EncoderStageConfig(
        embed_dim=embed_dim, depth=depth, num_heads=num_heads, sr_ratio=sr_ratio,
        mlp_ratio=mlp_ratio, patch_size=patch_size, stride=stride,
    )


def tiny_decoder_config(dims=(4, 8, 12, 16), predict_dim=4) -> DecoderConfig:
    return DecoderConfig(per_stage_dims=dims, predict_dim=predict_dim)


@pytest.fixture(scope="session")
def b0_model():
    from esfpnet import build
    return build("B0", seed=0).eval()


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
    yield
