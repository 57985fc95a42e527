"""Dataset ingestion, preprocessing, augmentation, sampling and split protocols.

On-disk layout: a dataset directory holds ``images/`` and ``masks/`` with
files paired by stem. Masks are grayscale and binarized at 128. A frame's
case id is the part of the stem before the first underscore (the whole stem
when there is none), which lets case-level splitting work on any dataset that
encodes the case in its filenames.
"""

import logging
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, IngestError
from .metrics import LESION, NORMAL
from .variants import DEFAULT_INPUT_SIZE, IMAGENET_MEAN, IMAGENET_STD

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
MASK_BINARIZE_THRESHOLD = 128

PROTOCOLS = ("learning-ability", "generalizability", "power-balance", "case-level")
SUBSETS = ("train", "validation", "test")

# Canonical dataset names required by the fixed multi-dataset protocols.
GENERALIZABILITY_TRAIN = ("cvc-clinicdb", "kvasir")
GENERALIZABILITY_TEST = ("cvc-colondb", "etis-laribpolypdb")
POWER_BALANCE_EXTRA_TEST = ("cvc-colondb", "cvc-t", "etis-laribpolypdb")


@dataclass
class Sample:
    """One frame: RGB image, binary mask, and provenance ids."""

    image: np.ndarray
    mask: np.ndarray
    case_id: str
    frame_id: str
    dataset: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image "
                f"{self.image.shape[:2]}"
            )
        values = np.unique(self.mask)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"mask must be binary, found values {values[:8]}")

    @property
    def label(self) -> str:
        """Derived from the mask, so label and mask can never disagree."""
        return LESION if self.mask.any() else NORMAL


def case_id_from_stem(stem: str) -> str:
    return stem.split("_", 1)[0]


def _index_by_stem(directory: Path) -> dict[str, Path]:
    index: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_EXTENSIONS:
            index.setdefault(path.stem, path)
    return index


def load_dataset(root, dataset_name: str | None = None, strict: bool = True) -> list[Sample]:
    """Read every image/mask pair under ``root``.

    Problems (missing directory, unpaired file, size mismatch) are itemized;
    in strict mode they raise IngestError, otherwise the offending pairs are
    skipped with a logged warning.
    """
    root = Path(root)
    name = dataset_name if dataset_name is not None else root.name
    problems: list[str] = []
    images_dir = root / "images"
    masks_dir = root / "masks"
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise IngestError([f"{name}: missing directory {d}"])

    image_index = _index_by_stem(images_dir)
    mask_index = _index_by_stem(masks_dir)
    for stem in sorted(set(image_index) - set(mask_index)):
        problems.append(f"{name}: image {stem!r} has no mask")
    for stem in sorted(set(mask_index) - set(image_index)):
        problems.append(f"{name}: mask {stem!r} has no image")

    samples: list[Sample] = []
    for stem in sorted(set(image_index) & set(mask_index)):
        image = np.asarray(Image.open(image_index[stem]).convert("RGB"))
        mask_raw = np.asarray(Image.open(mask_index[stem]).convert("L"))
        if mask_raw.shape != image.shape[:2]:
            problems.append(
                f"{name}: {stem!r} image is {image.shape[:2]}, mask is {mask_raw.shape}"
            )
            continue
        mask = (mask_raw >= MASK_BINARIZE_THRESHOLD).astype(np.uint8)
        samples.append(Sample(
            image=image, mask=mask,
            case_id=case_id_from_stem(stem), frame_id=stem, dataset=name,
        ))

    if problems:
        if strict:
            raise IngestError(problems)
        for problem in problems:
            logger.warning("skipping: %s", problem)
    return samples


def load_dataset_root(root, strict: bool = True) -> dict[str, list[Sample]]:
    """Load every dataset subdirectory of ``root`` into a name -> samples map."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError([f"data root {root} does not exist"])
    datasets: dict[str, list[Sample]] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        datasets[sub.name] = load_dataset(sub, dataset_name=sub.name, strict=strict)
    if not datasets:
        raise IngestError([f"data root {root} contains no dataset directories"])
    return datasets


def preprocess_image(image: np.ndarray, size: int = DEFAULT_INPUT_SIZE,
                     mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Resize an RGB uint8 image to ``size`` square and normalize per channel."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    resized = np.asarray(
        Image.fromarray(image).resize((size, size), Image.BILINEAR),
        dtype=np.float32,
    ) / 255.0
    mean_arr = np.asarray(mean, dtype=np.float32)
    std_arr = np.asarray(std, dtype=np.float32)
    normalized = (resized - mean_arr) / std_arr
    return torch.from_numpy(np.ascontiguousarray(normalized.transpose(2, 0, 1)))


def preprocess_mask(mask: np.ndarray, size: int = DEFAULT_INPUT_SIZE) -> torch.Tensor:
    """Nearest-neighbour resize keeps the mask exactly binary."""
    resized = np.asarray(Image.fromarray(mask).resize((size, size), Image.NEAREST))
    return torch.from_numpy(resized.astype(np.float32))[None]


def preprocess(sample: Sample, size: int = DEFAULT_INPUT_SIZE,
               mean=IMAGENET_MEAN, std=IMAGENET_STD) -> tuple[torch.Tensor, torch.Tensor]:
    """Model-ready pair: (3, S, S) normalized image and (1, S, S) binary mask."""
    return (
        preprocess_image(sample.image, size, mean, std),
        preprocess_mask(sample.mask, size),
    )


@dataclass(frozen=True)
class AugmentConfig:
    """Paired geometric and photometric augmentation probabilities."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    max_rotation_deg: float = 15.0
    p_brightness: float = 0.5
    brightness_range: tuple[float, float] = (0.8, 1.2)


IDENTITY_AUGMENT = AugmentConfig(p_hflip=0.0, p_vflip=0.0, p_rotate=0.0, p_brightness=0.0)


def augment(sample: Sample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Randomly flip, rotate and rescale brightness; mask stays binary.

    The same number of random draws happens regardless of which transforms
    fire, so a given rng state always maps to the same output.
    """
    u_hflip, u_vflip, u_rotate = rng.random(3)
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    u_brightness = rng.random()
    lo, hi = cfg.brightness_range
    factor = rng.uniform(lo, hi)

    image, mask = sample.image, sample.mask
    if u_hflip < cfg.p_hflip:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if u_vflip < cfg.p_vflip:
        image = image[::-1]
        mask = mask[::-1]
    if u_rotate < cfg.p_rotate and angle != 0.0:
        image = np.asarray(Image.fromarray(np.ascontiguousarray(image)).rotate(
            angle, resample=Image.BILINEAR, fillcolor=(0, 0, 0)))
        mask = np.asarray(Image.fromarray(np.ascontiguousarray(mask)).rotate(
            angle, resample=Image.NEAREST, fillcolor=0))
    if u_brightness < cfg.p_brightness:
        image = np.clip(image.astype(np.float32) * factor, 0, 255).astype(np.uint8)

    if image is sample.image and mask is sample.mask:
        return sample
    return replace(sample, image=np.ascontiguousarray(image),
                   mask=np.ascontiguousarray(mask))


def class_weights(labels: Sequence[str]) -> np.ndarray:
    """Per-index draw probabilities proportional to inverse class frequency."""
    if not labels:
        raise ConfigError("cannot build a sampler over an empty label list")
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    weights = np.asarray([1.0 / counts[label] for label in labels], dtype=np.float64)
    return weights / weights.sum()


def balanced_sampler(labels: Sequence[str], rng: np.random.Generator,
                     block: int = 256) -> Iterator[int]:
    """Infinite with-replacement index stream balancing class frequencies."""
    p = class_weights(labels)
    n = len(labels)
    while True:
        for idx in rng.choice(n, size=block, p=p):
            yield int(idx)


@dataclass
class SplitManifest:
    """Assignment of (dataset, frame id) pairs to train/validation/test."""

    protocol: str
    seed: int
    subsets: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def __post_init__(self):
        for subset in SUBSETS:
            self.subsets.setdefault(subset, [])
        self.validate()

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(
                f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}"
            )
        seen: dict[tuple[str, str], str] = {}
        for subset, entries in self.subsets.items():
            if subset not in SUBSETS:
                raise ConfigError(f"unknown subset {subset!r}")
            for entry in entries:
                if entry in seen and seen[entry] != subset:
                    raise ConfigError(
                        f"entry {entry} assigned to both {seen[entry]} and {subset}"
                    )
                seen[entry] = subset

    def entries(self, subset: str) -> list[tuple[str, str]]:
        return list(self.subsets.get(subset, []))

    def counts(self) -> dict[str, int]:
        return {subset: len(self.subsets.get(subset, [])) for subset in SUBSETS}

    def to_lines(self) -> list[str]:
        lines = [f"protocol\t{self.protocol}", f"seed\t{self.seed}"]
        for subset in SUBSETS:
            lines.extend(
                f"{subset}\t{dataset}\t{frame_id}"
                for dataset, frame_id in self.subsets.get(subset, [])
            )
        return lines

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "SplitManifest":
        lines = Path(path).read_text().splitlines()
        if len(lines) < 2 or not lines[0].startswith("protocol\t") \
                or not lines[1].startswith("seed\t"):
            raise ConfigError(f"{path} is not a split manifest")
        protocol = lines[0].split("\t", 1)[1]
        seed = int(lines[1].split("\t", 1)[1])
        subsets: dict[str, list[tuple[str, str]]] = {s: [] for s in SUBSETS}
        for lineno, line in enumerate(lines[2:], start=3):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected subset<TAB>dataset<TAB>id")
            subset, dataset, frame_id = parts
            if subset not in SUBSETS:
                raise ConfigError(f"{path}:{lineno}: unknown subset {subset!r}")
            subsets[subset].append((dataset, frame_id))
        return cls(protocol=protocol, seed=seed, subsets=subsets)


def _shuffled_ids(samples: Sequence[Sample], rng: np.random.Generator) -> list[str]:
    ids = sorted(s.frame_id for s in samples)
    return [ids[i] for i in rng.permutation(len(ids))]


def _require_datasets(datasets: Mapping[str, Sequence[Sample]],
                      required: Sequence[str], protocol: str) -> dict[str, str]:
    """Map canonical lowercase names to actual dataset keys, or fail loudly."""
    by_lower = {name.lower(): name for name in datasets}
    missing = [name for name in required if name not in by_lower]
    if missing:
        raise ConfigError(
            f"protocol {protocol!r} needs datasets {list(required)}; "
            f"missing {missing} (have {sorted(datasets)})"
        )
    return {name: by_lower[name] for name in required}


def _split_learning_ability(datasets, rng) -> dict[str, list[tuple[str, str]]]:
    subsets = {s: [] for s in SUBSETS}
    for name in sorted(datasets):
        ids = _shuffled_ids(datasets[name], rng)
        n = len(ids)
        n_train = int(0.8 * n)
        n_val = int(0.1 * n)
        subsets["train"] += [(name, i) for i in ids[:n_train]]
        subsets["validation"] += [(name, i) for i in ids[n_train:n_train + n_val]]
        subsets["test"] += [(name, i) for i in ids[n_train + n_val:]]
    return subsets


def _split_train_pool_90_10(datasets, keys, rng) -> tuple[list, list, dict]:
    """90/10 train/holdout per training dataset; returns holdouts per dataset."""
    train, validation, holdout = [], [], {}
    for canonical in keys:
        name = keys[canonical]
        ids = _shuffled_ids(datasets[name], rng)
        n_train = int(round(0.9 * len(ids)))
        train += [(name, i) for i in ids[:n_train]]
        holdout[name] = [(name, i) for i in ids[n_train:]]
        validation += holdout[name]
    return train, validation, holdout


def _split_generalizability(datasets, rng) -> dict[str, list[tuple[str, str]]]:
    keys = _require_datasets(
        datasets, GENERALIZABILITY_TRAIN + GENERALIZABILITY_TEST, "generalizability")
    train, validation, _ = _split_train_pool_90_10(
        datasets, {k: keys[k] for k in GENERALIZABILITY_TRAIN}, rng)
    test = []
    for canonical in GENERALIZABILITY_TEST:
        name = keys[canonical]
        test += [(name, i) for i in sorted(s.frame_id for s in datasets[name])]
    return {"train": train, "validation": validation, "test": test}


def _split_power_balance(datasets, rng) -> dict[str, list[tuple[str, str]]]:
    keys = _require_datasets(
        datasets, GENERALIZABILITY_TRAIN + POWER_BALANCE_EXTRA_TEST, "power-balance")
    train, _, holdout = _split_train_pool_90_10(
        datasets, {k: keys[k] for k in GENERALIZABILITY_TRAIN}, rng)
    test = []
    for canonical in GENERALIZABILITY_TRAIN:
        test += holdout[keys[canonical]]
    for canonical in POWER_BALANCE_EXTRA_TEST:
        name = keys[canonical]
        test += [(name, i) for i in sorted(s.frame_id for s in datasets[name])]
    # No held-out validation exists under this protocol; the trainer tracks
    # its checkpoint metric on the training subset instead.
    return {"train": train, "validation": [], "test": test}


def _split_case_level(datasets, rng) -> dict[str, list[tuple[str, str]]]:
    """Whole cases go to one subset; frame ratios approximate 50/25/25."""
    cases: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for name in sorted(datasets):
        for sample in datasets[name]:
            cases.setdefault((name, sample.case_id), []).append((name, sample.frame_id))
    case_keys = sorted(cases)
    order = [case_keys[i] for i in rng.permutation(len(case_keys))]
    total = sum(len(v) for v in cases.values())

    subsets = {s: [] for s in SUBSETS}
    assigned = 0
    for key in order:
        frames = sorted(cases[key])
        if assigned < 0.5 * total:
            subsets["train"] += frames
        elif assigned < 0.75 * total:
            subsets["validation"] += frames
        else:
            subsets["test"] += frames
        assigned += len(frames)
    return subsets


def make_split(protocol: str, datasets: Mapping[str, Sequence[Sample]],
               seed: int) -> SplitManifest:
    """Deterministically assign frames to subsets under the named protocol."""
    if protocol not in PROTOCOLS:
        raise ConfigError(
            f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}"
        )
    for name, samples in datasets.items():
        ids = [s.frame_id for s in samples]
        if len(ids) != len(set(ids)):
            raise ConfigError(f"dataset {name!r} has duplicate frame ids")
    rng = np.random.default_rng(seed)
    builder = {
        "learning-ability": _split_learning_ability,
        "generalizability": _split_generalizability,
        "power-balance": _split_power_balance,
        "case-level": _split_case_level,
    }[protocol]
    subsets = builder(datasets, rng)
    return SplitManifest(protocol=protocol, seed=seed, subsets=subsets)


def select_samples(manifest: SplitManifest, subset: str,
                   datasets: Mapping[str, Sequence[Sample]]) -> list[Sample]:
    """Resolve one subset of a manifest against loaded datasets."""
    index: dict[tuple[str, str], Sample] = {}
    for name, samples in datasets.items():
        for sample in samples:
            index[(name, sample.frame_id)] = sample
    out = []
    for entry in manifest.entries(subset):
        if entry not in index:
            raise ConfigError(f"manifest entry {entry} not found in loaded datasets")
        out.append(index[entry])
    return out
