"""Training loop, evaluation battery, and protocol runners."""

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import (AugmentConfig, Sample, SplitManifest, augment, balanced_sampler,
                   load_dataset_root, make_split, preprocess, select_samples)
from .errors import ConfigError, TrainingDiverged
from .loss import total_loss
from .metrics import MetricsReport, compute_image_metrics, dice
from .model import ESFPNet, build, load_model, save_model
from .variants import DEFAULT_INPUT_SIZE

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimization recipe; the defaults are the published full-scale recipe."""

    variant: str = "B0"
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    input_size: int = DEFAULT_INPUT_SIZE
    steps_per_epoch: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_dir: str = "checkpoints"
    freeze_encoder: bool = False
    threshold: float = 0.5
    min_area_fraction: float = 0.0
    device: str = "cpu"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(
                f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}"
            )
        if self.input_size % 32 != 0:
            raise ConfigError(
                f"input_size must be divisible by 32, got {self.input_size}"
            )


@dataclass(frozen=True)
class TrainLogRecord:
    """One epoch of the training log."""

    epoch: int
    loss_total: float
    loss_iou: float
    loss_bce: float
    val_mdice: float
    seconds: float
    checkpoint: str = ""


@dataclass
class TrainResult:
    best_checkpoint: Path
    best_mdice: float
    log: list[TrainLogRecord]
    step_losses: list[float] = field(default_factory=list)

    def to_tsv_lines(self) -> list[str]:
        lines = ["epoch\tloss_total\tloss_iou\tloss_bce\tval_mdice\tseconds\tcheckpoint"]
        lines.extend(
            f"{r.epoch}\t{r.loss_total:.6f}\t{r.loss_iou:.6f}\t{r.loss_bce:.6f}"
            f"\t{r.val_mdice:.6f}\t{r.seconds:.3f}\t{r.checkpoint}"
            for r in self.log
        )
        return lines


def _predict_prob(model: ESFPNet, sample: Sample, input_size: int,
                  device: str) -> np.ndarray:
    """Probability map at the sample's native resolution."""
    image, _ = preprocess(sample, input_size, model.variant.input_mean,
                          model.variant.input_std)
    with torch.inference_mode():
        logits = model(image[None].to(device))
    prob = torch.sigmoid(logits)[0, 0].cpu().numpy().astype(np.float32)
    native_h, native_w = sample.mask.shape
    if prob.shape != (native_h, native_w):
        prob = np.asarray(Image.fromarray(prob, mode="F").resize(
            (native_w, native_h), Image.BILINEAR))
    return np.clip(prob.astype(np.float64), 0.0, 1.0)


def _mean_dice(model: ESFPNet, samples, input_size: int, threshold: float,
               device: str) -> float:
    """Dice-only pass used for per-epoch checkpoint selection."""
    was_training = model.training
    model.eval()
    values = []
    for sample in samples:
        prob = _predict_prob(model, sample, input_size, device)
        values.append(dice(prob >= threshold, sample.mask.astype(bool)))
    if was_training:
        model.train()
    return float(np.mean(values)) if values else float("nan")


def evaluate(model: ESFPNet, samples, input_size: int = DEFAULT_INPUT_SIZE,
             threshold: float = 0.5, min_area_fraction: float = 0.0,
             device: str = "cpu") -> MetricsReport:
    """Full metric battery over ``samples`` at their native resolutions."""
    model.eval()
    records = []
    for sample in samples:
        prob = _predict_prob(model, sample, input_size, device)
        records.append(compute_image_metrics(
            sample.frame_id, prob, sample.mask.astype(bool),
            threshold=threshold, min_area_fraction=min_area_fraction,
        ))
    return MetricsReport(per_image=records)


def _assemble_batch(samples, indices, rng, cfg: TrainConfig, mean, std):
    images, masks, ids = [], [], []
    for idx in indices:
        sample = augment(samples[idx], rng, cfg.augment)
        image, mask = preprocess(sample, cfg.input_size, mean, std)
        images.append(image)
        masks.append(mask)
        ids.append(f"{sample.dataset}/{sample.frame_id}")
    return torch.stack(images), torch.stack(masks), ids


def train(model: ESFPNet, train_samples, val_samples, cfg: TrainConfig) -> TrainResult:
    """Optimize ``model``; keeps the checkpoint with the best validation mDice.

    When no validation samples exist (some protocols hold none out), the
    checkpoint metric is computed on the training samples instead.
    """
    cfg.validate()
    if not train_samples:
        raise ConfigError("cannot train on an empty training subset")
    watch_samples = val_samples if val_samples else train_samples

    device = cfg.device
    model.to(device)
    if cfg.freeze_encoder:
        model.freeze_encoder(True)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.AdamW(
        (p for p in model.parameters() if p.requires_grad),
        lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
    )
    sampler = balanced_sampler([s.label for s in train_samples], rng)
    steps = cfg.steps_per_epoch or max(1, len(train_samples) // cfg.batch_size)
    mean, std = model.variant.input_mean, model.variant.input_std

    ckpt_dir = Path(cfg.checkpoint_dir)
    best_path = ckpt_dir / "best.pt"
    best_mdice = float("-inf")
    log: list[TrainLogRecord] = []
    step_losses: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        model.train()
        epoch_terms = np.zeros(3)
        for step in range(steps):
            indices = [next(sampler) for _ in range(cfg.batch_size)]
            images, masks, ids = _assemble_batch(
                train_samples, indices, rng, cfg, mean, std)
            logits = model(images.to(device))
            try:
                terms = total_loss(logits, masks.to(device))
            except ValueError as exc:
                raise TrainingDiverged(
                    f"aborted at epoch {epoch} step {step + 1}: {exc}; "
                    f"batch frames: {', '.join(ids)}"
                ) from exc
            if not torch.isfinite(terms.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step + 1}: "
                    f"total={terms.total.item()}, iou={terms.iou.item()}, "
                    f"bce={terms.bce.item()}; batch frames: {', '.join(ids)}"
                )
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            epoch_terms += (terms.total.item(), terms.iou.item(), terms.bce.item())
            step_losses.append(terms.total.item())

        val_mdice = _mean_dice(model, watch_samples, cfg.input_size,
                               cfg.threshold, device)
        checkpoint = ""
        if val_mdice > best_mdice:
            best_mdice = val_mdice
            save_model(model, best_path)
            checkpoint = str(best_path)
        record = TrainLogRecord(
            epoch=epoch,
            loss_total=epoch_terms[0] / steps,
            loss_iou=epoch_terms[1] / steps,
            loss_bce=epoch_terms[2] / steps,
            val_mdice=val_mdice,
            seconds=time.perf_counter() - tic,
            checkpoint=checkpoint,
        )
        log.append(record)
        logger.info(
            "epoch %d/%d loss %.4f val mDice %.4f%s",
            epoch, cfg.epochs, record.loss_total, val_mdice,
            " (new best)" if checkpoint else "",
        )

    return TrainResult(best_checkpoint=best_path, best_mdice=best_mdice,
                       log=log, step_losses=step_losses)


@dataclass
class ExperimentReport:
    """Per-dataset metric reports for one protocol run."""

    protocol: str
    variant: str
    seed: int
    rows: list[tuple[str, MetricsReport]] = field(default_factory=list)

    COLUMNS = ("frames", "m_dice", "m_iou", "s_alpha", "e_phi", "mae",
               "fn_frames", "fp_frames")

    def to_tsv_lines(self) -> list[str]:
        lines = [
            f"protocol\t{self.protocol}",
            f"variant\t{self.variant}",
            f"seed\t{self.seed}",
            "subset\t" + "\t".join(self.COLUMNS),
        ]
        for name, report in self.rows:
            agg = report.aggregates()
            cells = [name]
            for col in self.COLUMNS:
                key = "frame_count" if col == "frames" else col
                value = agg[key]
                cells.append(f"{value:.6f}" if isinstance(value, float) else str(value))
            lines.append("\t".join(cells))
        return lines

    def format_table(self) -> str:
        width = max([len(name) for name, _ in self.rows] + [8])
        header = (f"{'subset'.ljust(width)}  frames  mDice   mIoU    "
                  "S_alpha  E_phi   MAE     FN  FP")
        out = [f"protocol {self.protocol} (variant {self.variant}, seed {self.seed})",
               header]
        for name, report in self.rows:
            agg = report.aggregates()
            out.append(
                f"{name.ljust(width)}  {agg['frame_count']:>6}  "
                f"{agg['m_dice']:.4f}  {agg['m_iou']:.4f}  {agg['s_alpha']:>7.4f}  "
                f"{agg['e_phi']:.4f}  {agg['mae']:.4f}  "
                f"{agg['fn_frames']:>2}  {agg['fp_frames']:>2}"
            )
        return "\n".join(out)


def _group_by_dataset(entries) -> dict[str, list[tuple[str, str]]]:
    groups: dict[str, list[tuple[str, str]]] = {}
    for dataset, frame_id in entries:
        groups.setdefault(dataset, []).append((dataset, frame_id))
    return groups


def run_protocol(protocol: str, data, cfg: TrainConfig, out_dir=None,
                 header_lines=None) -> ExperimentReport:
    """Split, train, and evaluate under one protocol; optionally write artifacts.

    ``data`` is a data-root path or a preloaded name -> samples mapping. With
    ``out_dir`` set, the manifest, training log, metric reports and figures
    land there; ``header_lines`` (e.g. provenance) are prepended to each
    delimited artifact.
    """
    datasets = data if isinstance(data, dict) else load_dataset_root(data)
    manifest = make_split(protocol, datasets, cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.write(out_dir / "split_manifest.tsv")
        cfg = replace(cfg, checkpoint_dir=str(out_dir / "checkpoints"))

    train_samples = select_samples(manifest, "train", datasets)
    val_samples = select_samples(manifest, "validation", datasets)
    model = build(cfg.variant, seed=cfg.seed, freeze_encoder=cfg.freeze_encoder)
    result = train(model, train_samples, val_samples, cfg)
    best = load_model(result.best_checkpoint, expect_variant=cfg.variant)

    report = ExperimentReport(protocol=protocol, variant=cfg.variant, seed=cfg.seed)
    eval_kwargs = dict(input_size=cfg.input_size, threshold=cfg.threshold,
                       min_area_fraction=cfg.min_area_fraction, device=cfg.device)
    if protocol == "learning-ability":
        for subset in ("train", "validation", "test"):
            for dataset, entries in sorted(_group_by_dataset(
                    manifest.entries(subset)).items()):
                samples = select_samples(
                    SplitManifest(protocol, cfg.seed, {subset: entries}),
                    subset, datasets)
                report.rows.append((f"{subset}/{dataset}",
                                    evaluate(best, samples, **eval_kwargs)))
    else:
        for dataset, entries in sorted(_group_by_dataset(
                manifest.entries("test")).items()):
            samples = select_samples(
                SplitManifest(protocol, cfg.seed, {"test": entries}),
                "test", datasets)
            report.rows.append((f"test/{dataset}",
                                evaluate(best, samples, **eval_kwargs)))

    if out_dir is not None:
        header = list(header_lines) if header_lines else []
        _write_lines(out_dir / "train_log.tsv", header + result.to_tsv_lines())
        _write_lines(out_dir / "report.tsv", header + report.to_tsv_lines())
        for name, row_report in report.rows:
            safe = name.replace("/", "_")
            _write_lines(out_dir / f"per_image_{safe}.tsv",
                         header + row_report.to_tsv_lines())
        from . import plots
        plots.save_training_curves(result.log, out_dir / "train_curves.png")
        plots.save_metrics_figure(report.rows, out_dir / "metrics.png")
    return report


def _write_lines(path: Path, lines) -> None:
    path.write_text("\n".join(lines) + "\n")
