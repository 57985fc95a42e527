"""Real-time frame-stream inference.

A stream run has four stages: read, preprocess, inference, postprocess+sink.
``run_stream`` executes them either sequentially or as a bounded-queue thread
pipeline; both modes apply identical math to identical frames in identical
order, so their outputs are bitwise equal and only throughput differs.
Per-frame stage latencies are measured inside each stage, and mean FPS is
frames divided by wall time from first read to last sink.
"""

import logging
import queue
import threading
import time
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .data import IMAGE_EXTENSIONS, preprocess_image
from .errors import ConfigError, IngestError
from .metrics import LESION, classify_frame
from .model import ESFPNet
from .variants import DEFAULT_INPUT_SIZE

logger = logging.getLogger(__name__)

_SENTINEL = object()


@dataclass
class StreamConfig:
    """Knobs for one stream run; defaults match the training-time conventions."""

    input_size: int = DEFAULT_INPUT_SIZE
    threshold: float = 0.5
    min_area_fraction: float = 0.0
    overlay_alpha: float = 0.4
    overlay_color: tuple[int, int, int] = (255, 64, 64)
    pipelined: bool = True
    queue_depth: int = 4
    limit: int | None = None

    def validate(self) -> None:
        if self.input_size % 32 != 0:
            raise ConfigError(
                f"input_size must be divisible by 32, got {self.input_size}"
            )
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ConfigError(
                f"overlay_alpha must lie in [0, 1], got {self.overlay_alpha}"
            )
        if self.queue_depth < 1:
            raise ConfigError(f"queue_depth must be >= 1, got {self.queue_depth}")


@dataclass
class FrameResult:
    """Output for one frame: mask at source resolution plus latency accounting."""

    index: int
    mask: np.ndarray
    lesion: bool
    latencies_ms: dict[str, float] = field(default_factory=dict)

    @property
    def total_ms(self) -> float:
        return sum(self.latencies_ms.values())


STAGES = ("read", "preprocess", "inference", "postprocess")


@dataclass
class ThroughputReport:
    """Aggregate timing for a stream run."""

    frame_count: int
    skipped: int
    wall_seconds: float
    mean_fps: float
    latency_p50_ms: float
    latency_p95_ms: float
    stage_means_ms: dict[str, float] = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        lines = [
            f"frame_count\t{self.frame_count}",
            f"skipped\t{self.skipped}",
            f"wall_seconds\t{self.wall_seconds:.6f}",
            f"mean_fps\t{self.mean_fps:.4f}",
            f"latency_p50_ms\t{self.latency_p50_ms:.4f}",
            f"latency_p95_ms\t{self.latency_p95_ms:.4f}",
        ]
        lines.extend(
            f"stage_mean_ms\t{stage}\t{value:.4f}"
            for stage, value in self.stage_means_ms.items()
        )
        return lines

    def format_table(self) -> str:
        rows = [
            f"frames     {self.frame_count} ({self.skipped} skipped)",
            f"wall time  {self.wall_seconds:.3f} s",
            f"mean FPS   {self.mean_fps:.2f}",
            f"latency    p50 {self.latency_p50_ms:.2f} ms, p95 {self.latency_p95_ms:.2f} ms",
        ]
        rows.extend(
            f"  {stage:<12} {value:8.2f} ms"
            for stage, value in self.stage_means_ms.items()
        )
        return "\n".join(rows)


def _percentile(values: list[float], q: float) -> float:
    if not values:
        return 0.0
    return float(np.percentile(np.asarray(values), q))


def build_report(results: list[FrameResult], skipped: int,
                 wall_seconds: float) -> ThroughputReport:
    totals = [r.total_ms for r in results]
    n = len(results)
    stage_means = {}
    for stage in STAGES:
        stage_means[stage] = (
            float(np.mean([r.latencies_ms.get(stage, 0.0) for r in results]))
            if results else 0.0
        )
    return ThroughputReport(
        frame_count=n,
        skipped=skipped,
        wall_seconds=wall_seconds,
        mean_fps=(n / wall_seconds) if n and wall_seconds > 0 else 0.0,
        latency_p50_ms=_percentile(totals, 50),
        latency_p95_ms=_percentile(totals, 95),
        stage_means_ms=stage_means,
    )


# --------------------------------------------------------------------------
# Sources

def _iter_directory(path: Path) -> Iterator[np.ndarray | None]:
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise IngestError([f"no frames found under {path}"])
    for file in files:
        bgr = cv2.imread(str(file), cv2.IMREAD_COLOR)
        if bgr is None:
            logger.warning("could not decode %s; frame skipped", file)
            yield None
        else:
            yield cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def _iter_video(path: Path) -> Iterator[np.ndarray | None]:
    capture = cv2.VideoCapture(str(path))
    if not capture.isOpened():
        raise IngestError([f"could not open video {path}"])
    try:
        while True:
            ok, bgr = capture.read()
            if not ok:
                return
            yield cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    finally:
        capture.release()


def open_source(source) -> Iterator[np.ndarray | None]:
    """Yield RGB frames (or None for undecodable ones) from a path or iterable.

    A directory yields its image files in sorted order; a file is treated as a
    video. Any other iterable of arrays is passed through unchanged.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.is_dir():
            return _iter_directory(path)
        if path.is_file():
            return _iter_video(path)
        raise IngestError([f"stream source {path} does not exist"])
    if isinstance(source, Iterable):
        return iter(source)
    raise ConfigError(f"unsupported stream source type {type(source).__name__}")


# --------------------------------------------------------------------------
# Stages

def _preprocess_stage(frame: np.ndarray, model: ESFPNet,
                      cfg: StreamConfig) -> torch.Tensor:
    return preprocess_image(frame, cfg.input_size,
                            model.variant.input_mean, model.variant.input_std)


def _inference_stage(model: ESFPNet, tensor: torch.Tensor) -> torch.Tensor:
    with torch.inference_mode():
        return model(tensor[None])


def _postprocess_stage(logits: torch.Tensor, frame: np.ndarray,
                       cfg: StreamConfig) -> tuple[np.ndarray, bool]:
    prob = torch.sigmoid(logits)[0, 0].numpy()
    mask = (prob >= cfg.threshold).astype(np.uint8)
    h, w = frame.shape[:2]
    if mask.shape != (h, w):
        mask = cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)
    lesion = classify_frame(mask, cfg.min_area_fraction) == LESION
    return mask, lesion


def process_frame(model: ESFPNet, frame: np.ndarray,
                  cfg: StreamConfig | None = None) -> FrameResult:
    """Run the full per-frame path on one RGB frame, timing each stage."""
    cfg = cfg or StreamConfig()
    cfg.validate()
    model.eval()
    latencies: dict[str, float] = {"read": 0.0}

    tic = time.perf_counter()
    tensor = _preprocess_stage(frame, model, cfg)
    latencies["preprocess"] = (time.perf_counter() - tic) * 1e3

    tic = time.perf_counter()
    logits = _inference_stage(model, tensor)
    latencies["inference"] = (time.perf_counter() - tic) * 1e3

    tic = time.perf_counter()
    mask, lesion = _postprocess_stage(logits, frame, cfg)
    latencies["postprocess"] = (time.perf_counter() - tic) * 1e3

    return FrameResult(index=0, mask=mask, lesion=lesion, latencies_ms=latencies)


# --------------------------------------------------------------------------
# Sinks

def render_overlay(frame: np.ndarray, mask: np.ndarray, alpha: float = 0.4,
                   color: tuple[int, int, int] = (255, 64, 64)) -> np.ndarray:
    """Alpha-blend the mask onto the frame and trace its contour."""
    overlay = frame.astype(np.float32).copy()
    region = mask.astype(bool)
    tint = np.asarray(color, dtype=np.float32)
    overlay[region] = (1.0 - alpha) * overlay[region] + alpha * tint
    out = overlay.astype(np.uint8)
    contours, _ = cv2.findContours(
        mask.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    cv2.drawContours(out, contours, -1, color, thickness=2)
    return out


class DirectorySink:
    """Writes per-frame masks and overlays as PNG files."""

    def __init__(self, out_dir, write_masks: bool = True,
                 write_overlays: bool = True, overlay_alpha: float = 0.4,
                 overlay_color: tuple[int, int, int] = (255, 64, 64)):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.write_masks = write_masks
        self.write_overlays = write_overlays
        self.overlay_alpha = overlay_alpha
        self.overlay_color = overlay_color

    def handle(self, frame: np.ndarray, result: FrameResult) -> None:
        stem = f"{result.index:06d}"
        if self.write_masks:
            cv2.imwrite(str(self.out_dir / f"{stem}_mask.png"), result.mask * 255)
        if self.write_overlays:
            overlay = render_overlay(frame, result.mask,
                                     self.overlay_alpha, self.overlay_color)
            cv2.imwrite(str(self.out_dir / f"{stem}_overlay.png"),
                        cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))


class CollectingSink:
    """Keeps every FrameResult in memory; mostly for tests and small runs."""

    def __init__(self):
        self.results: list[FrameResult] = []

    def handle(self, frame: np.ndarray, result: FrameResult) -> None:
        self.results.append(result)


# --------------------------------------------------------------------------
# Runners

def _timed_read(frames: Iterator[np.ndarray | None]):
    """Yield (index, frame, read_ms); undecodable frames come through as None."""
    index = 0
    while True:
        tic = time.perf_counter()
        try:
            frame = next(frames)
        except StopIteration:
            return
        read_ms = (time.perf_counter() - tic) * 1e3
        yield index, frame, read_ms
        index += 1


def _run_sequential(frames, model, sink, cfg) -> tuple[list[FrameResult], int]:
    results: list[FrameResult] = []
    skipped = 0
    produced = 0
    for index, frame, read_ms in _timed_read(frames):
        if frame is None:
            skipped += 1
            continue
        result = process_frame(model, frame, cfg)
        result.index = index
        result.latencies_ms["read"] = read_ms
        if sink is not None:
            sink.handle(frame, result)
        results.append(result)
        produced += 1
        if cfg.limit is not None and produced >= cfg.limit:
            break
    return results, skipped


def _run_pipelined(frames, model, sink, cfg) -> tuple[list[FrameResult], int]:
    """Read / preprocess / inference in worker threads, postprocess+sink in the caller.

    FIFO queues preserve frame order end to end; the bounded depth keeps
    memory flat when one stage is slower than the rest.
    """
    q_read: queue.Queue = queue.Queue(maxsize=cfg.queue_depth)
    q_pre: queue.Queue = queue.Queue(maxsize=cfg.queue_depth)
    q_inf: queue.Queue = queue.Queue(maxsize=cfg.queue_depth)
    skipped = [0]
    errors: list[BaseException] = []

    def reader():
        try:
            produced = 0
            for index, frame, read_ms in _timed_read(frames):
                if frame is None:
                    skipped[0] += 1
                    continue
                q_read.put((index, frame, read_ms))
                produced += 1
                if cfg.limit is not None and produced >= cfg.limit:
                    break
        except BaseException as exc:  # propagate into the caller
            errors.append(exc)
        finally:
            q_read.put(_SENTINEL)

    def preprocessor():
        try:
            while True:
                item = q_read.get()
                if item is _SENTINEL:
                    break
                index, frame, read_ms = item
                tic = time.perf_counter()
                tensor = _preprocess_stage(frame, model, cfg)
                pre_ms = (time.perf_counter() - tic) * 1e3
                q_pre.put((index, frame, tensor, read_ms, pre_ms))
        except BaseException as exc:
            errors.append(exc)
        finally:
            q_pre.put(_SENTINEL)

    def inferrer():
        try:
            while True:
                item = q_pre.get()
                if item is _SENTINEL:
                    break
                index, frame, tensor, read_ms, pre_ms = item
                tic = time.perf_counter()
                logits = _inference_stage(model, tensor)
                inf_ms = (time.perf_counter() - tic) * 1e3
                q_inf.put((index, frame, logits, read_ms, pre_ms, inf_ms))
        except BaseException as exc:
            errors.append(exc)
        finally:
            q_inf.put(_SENTINEL)

    threads = [threading.Thread(target=fn, daemon=True)
               for fn in (reader, preprocessor, inferrer)]
    for thread in threads:
        thread.start()

    results: list[FrameResult] = []
    while True:
        item = q_inf.get()
        if item is _SENTINEL:
            break
        index, frame, logits, read_ms, pre_ms, inf_ms = item
        tic = time.perf_counter()
        mask, lesion = _postprocess_stage(logits, frame, cfg)
        post_ms = (time.perf_counter() - tic) * 1e3
        result = FrameResult(
            index=index, mask=mask, lesion=lesion,
            latencies_ms={"read": read_ms, "preprocess": pre_ms,
                          "inference": inf_ms, "postprocess": post_ms},
        )
        if sink is not None:
            sink.handle(frame, result)
        results.append(result)

    for thread in threads:
        thread.join()
    if errors:
        raise errors[0]
    return results, skipped[0]


def run_stream(source, model: ESFPNet, sink=None,
               cfg: StreamConfig | None = None) -> ThroughputReport:
    """Process a frame stream and return the throughput report.

    Results flow to ``sink`` (an object with ``handle(frame, result)``) in
    frame order. Sequential and pipelined execution produce bitwise-identical
    masks; pick with ``cfg.pipelined``.
    """
    cfg = cfg or StreamConfig()
    cfg.validate()
    model.eval()
    frames = open_source(source)
    tic = time.perf_counter()
    if cfg.pipelined:
        results, skipped = _run_pipelined(frames, model, sink, cfg)
    else:
        results, skipped = _run_sequential(frames, model, sink, cfg)
    wall = time.perf_counter() - tic
    report = build_report(results, skipped, wall)
    logger.info("stream done: %d frames, %.2f FPS", report.frame_count, report.mean_fps)
    return report
