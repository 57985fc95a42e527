"""Command-line interface.

Subcommands: ``train``, ``eval``, ``bench``, ``stream``, ``split``. Every
flag can instead come from a YAML config file (``--config``); explicit flags
win over the file, the file wins over built-in defaults. Each delimited
artifact starts with provenance comment lines carrying the resolved
configuration and its hash, so any output can be traced to the exact setup
that produced it.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import plots
from .complexity import count_parameters, variant_complexity
from .data import load_dataset_root, make_split, SplitManifest, select_samples
from .errors import EsfpnetError
from .model import build, load_model
from .stream import DirectorySink, StreamConfig, run_stream
from .trainer import TrainConfig, evaluate, run_protocol
from .variants import DEFAULT_INPUT_SIZE, VARIANT_IDS, get_variant

logger = logging.getLogger(__name__)

DATA_ENV_VAR = "ESFPNET_DATA"


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as handle:
        content = yaml.safe_load(handle)
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise EsfpnetError(f"config file {path} must hold a mapping at top level")
    return content


def _resolve(args: argparse.Namespace, file_cfg: dict, defaults: dict) -> dict:
    """flag > config file > default, for every key in ``defaults``."""
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def provenance_lines(resolved: dict) -> list[str]:
    canonical = json.dumps(resolved, sort_keys=True, default=str)
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:16]
    return [f"# config_hash\t{digest}", f"# config\t{canonical}"]


def _write_artifact(path: Path, header: list[str], lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(header + lines) + "\n")


def _data_root(resolved: dict) -> str:
    root = resolved.get("data") or os.environ.get(DATA_ENV_VAR)
    if not root:
        raise EsfpnetError(
            f"no data root given; pass --data or set ${DATA_ENV_VAR}"
        )
    return root


# --------------------------------------------------------------------------
# Subcommand handlers

TRAIN_DEFAULTS = {
    "variant": "B0",
    "protocol": "learning-ability",
    "seed": 0,
    "data": None,
    "out": "runs/train",
    "epochs": 200,
    "batch_size": 16,
    "learning_rate": 1e-4,
    "weight_decay": 0.01,
    "input_size": DEFAULT_INPUT_SIZE,
    "steps_per_epoch": None,
    "freeze_encoder": False,
    "pretrained": None,
}


def cmd_train(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _load_config_file(args.config), TRAIN_DEFAULTS)
    resolved["data"] = _data_root(resolved)
    header = provenance_lines(resolved)
    cfg = TrainConfig(
        variant=resolved["variant"],
        epochs=int(resolved["epochs"]),
        batch_size=int(resolved["batch_size"]),
        learning_rate=float(resolved["learning_rate"]),
        weight_decay=float(resolved["weight_decay"]),
        seed=int(resolved["seed"]),
        input_size=int(resolved["input_size"]),
        steps_per_epoch=(int(resolved["steps_per_epoch"])
                         if resolved["steps_per_epoch"] else None),
        freeze_encoder=bool(resolved["freeze_encoder"]),
    )
    report = run_protocol(
        resolved["protocol"], resolved["data"], cfg,
        out_dir=resolved["out"], header_lines=header,
    )
    print(report.format_table())
    print(f"artifacts written to {resolved['out']}")
    return 0


EVAL_DEFAULTS = {
    "model": None,
    "data": None,
    "manifest": None,
    "subset": "test",
    "out": None,
    "input_size": DEFAULT_INPUT_SIZE,
    "threshold": 0.5,
    "min_area_fraction": 0.0,
}


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _load_config_file(args.config), EVAL_DEFAULTS)
    if not resolved["model"]:
        raise EsfpnetError("eval needs --model pointing at a saved model file")
    resolved["data"] = _data_root(resolved)
    header = provenance_lines(resolved)

    model = load_model(resolved["model"])
    datasets = load_dataset_root(resolved["data"])
    if resolved["manifest"]:
        manifest = SplitManifest.read(resolved["manifest"])
        samples = select_samples(manifest, resolved["subset"], datasets)
        scope = f"{resolved['subset']} subset of {resolved['manifest']}"
    else:
        samples = [s for name in sorted(datasets) for s in datasets[name]]
        scope = "all loaded frames"
    report = evaluate(
        model, samples,
        input_size=int(resolved["input_size"]),
        threshold=float(resolved["threshold"]),
        min_area_fraction=float(resolved["min_area_fraction"]),
    )
    print(f"evaluated {report.frame_count} frames ({scope})")
    print(report.format_table())
    if resolved["out"]:
        out = Path(resolved["out"])
        _write_artifact(out / "eval_report.tsv", header, report.to_tsv_lines())
        plots.save_metrics_figure([("eval", report)], out / "eval_metrics.png")
        print(f"artifacts written to {out}")
    return 0


BENCH_DEFAULTS = {
    "variant": "all",
    "input_size": DEFAULT_INPUT_SIZE,
    "batch": 1,
    "out": None,
}


def cmd_bench(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _load_config_file(args.config), BENCH_DEFAULTS)
    header = provenance_lines(resolved)
    ids = list(VARIANT_IDS) if resolved["variant"] == "all" else [resolved["variant"]]
    shape = (int(resolved["batch"]), 3,
             int(resolved["input_size"]), int(resolved["input_size"]))
    reports = []
    for variant_id in ids:
        variant = get_variant(variant_id)
        report = variant_complexity(variant, shape)
        # Cross-check the analytic parameter tally against the built network.
        torch_params = count_parameters(build(variant_id))
        if torch_params != report.param_count:
            raise EsfpnetError(
                f"analytic parameter count {report.param_count} disagrees with "
                f"framework count {torch_params} for {variant_id}"
            )
        reports.append(report)
        print(report.format_table(top=12))
        print()
    if resolved["out"]:
        out = Path(resolved["out"])
        for report in reports:
            _write_artifact(out / f"bench_{report.variant_id}.tsv",
                            header, report.to_lines())
        plots.save_complexity_figure(reports, out / "complexity.png")
        print(f"artifacts written to {out}")
    return 0


STREAM_DEFAULTS = {
    "model": None,
    "source": None,
    "out": "runs/stream",
    "overlay_alpha": 0.4,
    "threshold": 0.5,
    "input_size": DEFAULT_INPUT_SIZE,
    "sequential": False,
    "limit": None,
    "no_overlays": False,
}


def cmd_stream(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _load_config_file(args.config), STREAM_DEFAULTS)
    if not resolved["model"]:
        raise EsfpnetError("stream needs --model pointing at a saved model file")
    if not resolved["source"]:
        raise EsfpnetError("stream needs --source (a frames directory or video file)")
    header = provenance_lines(resolved)

    model = load_model(resolved["model"])
    cfg = StreamConfig(
        input_size=int(resolved["input_size"]),
        threshold=float(resolved["threshold"]),
        overlay_alpha=float(resolved["overlay_alpha"]),
        pipelined=not bool(resolved["sequential"]),
        limit=(int(resolved["limit"]) if resolved["limit"] else None),
    )
    out = Path(resolved["out"])
    sink = DirectorySink(
        out / "frames",
        write_overlays=not bool(resolved["no_overlays"]),
        overlay_alpha=cfg.overlay_alpha,
    )
    report = run_stream(resolved["source"], model, sink, cfg)
    print(report.format_table())
    _write_artifact(out / "stream_report.tsv", header, report.to_lines())
    plots.save_latency_figure(report, out / "latency.png")
    print(f"artifacts written to {out}")
    return 0


SPLIT_DEFAULTS = {
    "protocol": "learning-ability",
    "seed": 0,
    "data": None,
    "out": "split_manifest.tsv",
}


def cmd_split(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _load_config_file(args.config), SPLIT_DEFAULTS)
    resolved["data"] = _data_root(resolved)
    datasets = load_dataset_root(resolved["data"])
    manifest = make_split(resolved["protocol"], datasets, int(resolved["seed"]))
    path = manifest.write(resolved["out"])
    counts = manifest.counts()
    print(f"wrote {path}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


# --------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esfpnet",
        description="Train, evaluate, benchmark and stream the segmentation model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", help="output directory or file")

    p_train = sub.add_parser("train", help="run a protocol end to end")
    add_common(p_train)
    p_train.add_argument("--variant", choices=VARIANT_IDS, help="model size")
    p_train.add_argument("--protocol", help="split protocol")
    p_train.add_argument("--data", help=f"data root (or ${DATA_ENV_VAR})")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float)
    p_train.add_argument("--input-size", dest="input_size", type=int)
    p_train.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p_train.add_argument("--freeze-encoder", dest="freeze_encoder",
                         action="store_const", const=True)
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved model")
    add_common(p_eval)
    p_eval.add_argument("--model", help="saved model file")
    p_eval.add_argument("--data", help=f"data root (or ${DATA_ENV_VAR})")
    p_eval.add_argument("--manifest", help="split manifest to select frames from")
    p_eval.add_argument("--subset", choices=("train", "validation", "test"))
    p_eval.add_argument("--input-size", dest="input_size", type=int)
    p_eval.add_argument("--threshold", type=float)
    p_eval.add_argument("--min-area-fraction", dest="min_area_fraction", type=float)
    p_eval.set_defaults(handler=cmd_eval)

    p_bench = sub.add_parser("bench", help="parameter and FLOP accounting")
    add_common(p_bench)
    p_bench.add_argument("--variant", choices=VARIANT_IDS + ("all",),
                         help="model size, or 'all'")
    p_bench.add_argument("--input-size", dest="input_size", type=int)
    p_bench.add_argument("--batch", type=int)
    p_bench.set_defaults(handler=cmd_bench)

    p_stream = sub.add_parser("stream", help="segment a frame stream")
    add_common(p_stream)
    p_stream.add_argument("--model", help="saved model file")
    p_stream.add_argument("--source", help="frames directory or video file")
    p_stream.add_argument("--overlay-alpha", dest="overlay_alpha", type=float)
    p_stream.add_argument("--threshold", type=float)
    p_stream.add_argument("--input-size", dest="input_size", type=int)
    p_stream.add_argument("--sequential", action="store_const", const=True,
                          help="disable the thread pipeline")
    p_stream.add_argument("--limit", type=int, help="stop after N frames")
    p_stream.add_argument("--no-overlays", dest="no_overlays",
                          action="store_const", const=True)
    p_stream.set_defaults(handler=cmd_stream)

    p_split = sub.add_parser("split", help="write a split manifest")
    add_common(p_split)
    p_split.add_argument("--protocol", help="split protocol")
    p_split.add_argument("--data", help=f"data root (or ${DATA_ENV_VAR})")
    p_split.set_defaults(handler=cmd_split)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except EsfpnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
