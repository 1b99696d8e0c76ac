"""Command-line entry point: synth / train / eval / fit-thresholds / audit.

One JSON config file (--config) supplies defaults; command-line flags win
over it.  All stochastic components derive from one seed.  Logs are one JSON
object per line on stderr.  Exit codes: 0 success, 2 configuration problem,
3 data problem, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from . import metrics, taxonomy
from .audit import (DEFAULT_GRADE_CUTS, DEFAULT_SEVERITY_FLOOR, DEFAULT_WINDOW,
                    run_audit, write_geojson, write_severity_csv)
from .dataset import (SceneConfig, SplitSpec, generate_synthetic_sequence,
                      iter_sequence_frames, list_sequence_dirs, load_sequence,
                      save_sequence, stratified_split)
from .errors import ConfigError, DataError, NumericalError, TrainingDiverged
from .models import (FULL_SPEC, GRADCHECK_SPEC, TOY_SPEC, BaselineNet,
                     CascadeModel, load_checkpoint, predict_mask,
                     save_checkpoint)
from .tagging import (GridSpec, load_thresholds, search_thresholds,
                      format_tag_table, tag_frame, tag_prf, tags_from_mask,
                      write_thresholds)
from .taxonomy import InvalidLabelError
from .training import (TrainConfig, toy_train_config, train_baseline,
                       train_joint, train_two_step)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_PRESETS = {"toy": TOY_SPEC, "full": FULL_SPEC, "gradcheck": GRADCHECK_SPEC}


def log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}), file=sys.stderr)


@dataclass
class PipelineConfig:
    seed: int = 0
    data_root: str = "data"
    out_dir: str = "out"
    preset: str = "toy"
    train: TrainConfig | None = None  # preset-dependent when unset
    split: SplitSpec = field(default_factory=SplitSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    window: int = DEFAULT_WINDOW
    severity_floor: float = DEFAULT_SEVERITY_FLOOR
    grade_cuts: tuple[float, float] = DEFAULT_GRADE_CUTS

    def resolved_train(self) -> TrainConfig:
        if self.train is not None:
            return self.train
        if self.preset == "full":
            return TrainConfig(seed=self.seed)
        return toy_train_config(seed=self.seed)


def _config_from_file(path: str) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"unreadable config {path}: {e}") from e
    known = {"seed", "data_root", "out_dir", "preset", "train", "split",
             "grid", "window", "severity_floor", "grade_cuts"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig(
        seed=doc.get("seed", 0),
        data_root=doc.get("data_root", "data"),
        out_dir=doc.get("out_dir", "out"),
        preset=doc.get("preset", "toy"),
        window=doc.get("window", DEFAULT_WINDOW),
        severity_floor=doc.get("severity_floor", DEFAULT_SEVERITY_FLOOR),
        grade_cuts=tuple(doc.get("grade_cuts", DEFAULT_GRADE_CUTS)),
    )
    try:
        if "train" in doc:
            t = dict(doc["train"])
            if "input_size" in t:
                t["input_size"] = tuple(t["input_size"])
            if t.get("class_weights") is not None:
                t["class_weights"] = tuple(t["class_weights"])
            cfg.train = TrainConfig(seed=doc.get("seed", 0), **t)
        if "split" in doc:
            s = dict(doc["split"])
            if "fractions" in s:
                s["fractions"] = tuple(s["fractions"])
            cfg.split = SplitSpec(**s)
        if "grid" in doc:
            g = dict(doc["grid"])
            if "values" in g:
                g["values"] = tuple(g["values"])
            cfg.grid = GridSpec(**g)
    except TypeError as e:
        raise ConfigError(f"bad config field: {e}") from e
    return cfg


def _merge_flags(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Command-line flags beat the config file."""
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        if cfg.train is not None:
            cfg.train = replace(cfg.train, seed=args.seed)
    if getattr(args, "data_root", None) is not None:
        cfg.data_root = args.data_root
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "preset", None) is not None:
        cfg.preset = args.preset
    if cfg.preset not in _PRESETS:
        raise ConfigError(f"unknown preset {cfg.preset!r}; choose from {sorted(_PRESETS)}")
    train_overrides = {}
    for flag, field_name in (("epochs", "max_epochs"), ("batch_size", "batch_size"),
                             ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            train_overrides[field_name] = value
    if train_overrides:
        cfg.train = replace(cfg.resolved_train(), **train_overrides)
    if getattr(args, "window", None) is not None:
        cfg.window = args.window
    if getattr(args, "floor", None) is not None:
        cfg.severity_floor = args.floor
    if getattr(args, "unit", None) is not None and args.unit != cfg.grid.unit:
        cfg.grid = GridSpec(unit=args.unit) if args.unit == "pixels" else (
            GridSpec(unit="fraction", values=(0.001, 0.002, 0.005, 0.01, 0.02, 0.05)))
    return cfg


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size must look like 256x128, got {text!r}") from None
    if w <= 0 or h <= 0 or w % 8 or h % 8:
        raise ConfigError(
            f"--size {w}x{h}: both dimensions must be positive multiples of 8 "
            f"(nearest: {max(8, round(w / 8) * 8)}x{max(8, round(h / 8) * 8)})"
        )
    return w, h


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg: PipelineConfig):
    root = Path(cfg.data_root)
    seq_dirs = list_sequence_dirs(root)
    if not seq_dirs:
        raise DataError(f"no sequences under {root}")
    sequences = [load_sequence(d) for d in seq_dirs]
    return stratified_split(sequences, cfg.split, cfg.seed)


def _oracle(frame):
    """Stand-in 'model' that returns the ground-truth mask (test plumbing)."""
    return frame.mask


def _load_model(args, cfg: PipelineConfig):
    if getattr(args, "oracle", False):
        return _oracle
    if not getattr(args, "checkpoint", None):
        raise ConfigError("--checkpoint is required (or pass --oracle)")
    model, _ = load_checkpoint(args.checkpoint)
    return model


def _predict_frames(model, frames):
    if model is _oracle:
        return [f.mask.copy() for f in frames]
    return [predict_mask(model, f.image) for f in frames]


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: PipelineConfig, args) -> int:
    width, height = _parse_size(args.size)
    out = _out_dir(cfg)
    for k in range(args.sequences):
        scene = SceneConfig(sequence_id=f"seq{k:03d}", n_frames=args.frames,
                            width=width, height=height)
        seq = generate_synthetic_sequence(scene, seed=cfg.seed + k)
        save_sequence(seq, out)
        log("sequence_written", sequence_id=seq.sequence_id, frames=len(seq))
    taxonomy.write_labels_json(out / "labels.json")
    log("synth_done", sequences=args.sequences, frames_each=args.frames,
        size=f"{width}x{height}", out=str(out))
    return EXIT_OK


def cmd_train(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    train_frames, val_frames, _ = _load_split(cfg)
    tc = cfg.resolved_train()
    torch.manual_seed(tc.seed)
    spec = _PRESETS[cfg.preset]
    if args.model == "baseline":
        model = BaselineNet(spec)
    else:
        model = CascadeModel(spec)
    ckpt = out / f"{args.model}.ckpt"
    history_path = out / f"history_{args.model}.csv"
    (out / "train_config.json").write_text(json.dumps({
        "learning_rate": tc.learning_rate, "batch_size": tc.batch_size,
        "input_size": list(tc.input_size), "road_phase_target": tc.road_phase_target,
        "max_epochs": tc.max_epochs, "seed": tc.seed, "preset": cfg.preset,
        "model": args.model, "schedule": args.schedule,
    }, indent=2) + "\n")
    log("train_start", model=args.model, preset=cfg.preset,
        train_frames=len(train_frames), val_frames=len(val_frames))
    try:
        if args.model == "baseline":
            history = train_baseline(model, train_frames, val_frames, tc)
        elif args.schedule == "joint":
            history = train_joint(model, train_frames, val_frames, tc)
        else:
            history = train_two_step(model, train_frames, val_frames, tc,
                                     checkpoint_path=ckpt,
                                     checkpoint_every=args.checkpoint_every)
    except TrainingDiverged as e:
        save_checkpoint(model, ckpt, extra={"diverged_at_epoch": e.epoch})
        partial = getattr(e, "history", None)
        if partial is not None:
            partial.write_csv(history_path)
        log("train_diverged", epoch=e.epoch, checkpoint=str(ckpt))
        raise
    save_checkpoint(model, ckpt, extra={"epochs": history.total_epochs})
    history.write_csv(history_path)
    for note in history.notes:
        log("train_note", note=note)
    log("train_done", checkpoint=str(ckpt), epochs=history.total_epochs,
        final_val_defect_miou=history.final("val_defect_miou"),
        final_val_road_miou=history.final("val_road_miou"))
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    splits = dict(zip(("train", "val", "test"), _load_split(cfg)))
    frames = splits[args.split]
    model = _load_model(args, cfg)
    preds = _predict_frames(model, frames)
    reports = metrics.evaluate_hierarchy(preds, [f.mask for f in frames])
    json_path = out / f"eval_{args.split}.json"
    metrics.write_reports_json(reports, json_path)
    text = "\n\n".join(metrics.format_report_table(r) for r in reports.values())
    (out / f"eval_{args.split}.txt").write_text(text + "\n")
    for level, rep in reports.items():
        log("eval_level", split=args.split, level=level.value,
            mean_iou=rep.mean_iou, weighted_iou=rep.weighted_iou)
    log("eval_done", split=args.split, frames=len(frames), report=str(json_path))
    return EXIT_OK


def cmd_fit_thresholds(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    _, val_frames, _ = _load_split(cfg)
    model = _load_model(args, cfg)
    preds = _predict_frames(model, val_frames)
    gt_tags = [tags_from_mask(f.mask) for f in val_frames]
    table = search_thresholds(preds, gt_tags, cfg.grid)
    thr_path = out / "thresholds.json"
    write_thresholds(table, thr_path)
    report = tag_prf([tag_frame(p, table) for p in preds], gt_tags)
    (out / "tag_report_val.json").write_text(
        json.dumps(report.to_json_dict(), indent=2) + "\n")
    (out / "tag_report_val.txt").write_text(format_tag_table(report) + "\n")
    log("fit_thresholds_done", thresholds=str(thr_path),
        val_macro_f1=report.macro_f1)
    return EXIT_OK


def cmd_audit(cfg: PipelineConfig, args) -> int:
    out = _out_dir(cfg)
    seq_dir = Path(args.sequence)
    if not seq_dir.is_dir():
        seq_dir = Path(cfg.data_root) / args.sequence
    model = _load_model(args, cfg)
    thresholds = load_thresholds(args.thresholds)
    result = run_audit(
        iter_sequence_frames(seq_dir), model, thresholds,
        window=cfg.window, severity_floor=cfg.severity_floor,
        grade_cuts=cfg.grade_cuts,
    )
    seq_id = result.sequence_id
    geojson_path = out / f"audit_{seq_id}.geojson"
    write_geojson(result.geojson, geojson_path)
    write_severity_csv(result.raw_track, result.smoothed_track,
                       out / f"severity_{seq_id}.csv")
    tags_doc = [
        {"frame_index": i, "tags": sorted(taxonomy.class_name(c) for c in tags)}
        for i, tags in zip(result.frame_indices, result.frame_tags)
    ]
    (out / f"tags_{seq_id}.json").write_text(json.dumps(tags_doc, indent=2) + "\n")
    log("audit_done", sequence_id=seq_id, frames=len(result.frame_tags),
        skipped=result.skipped_frames, features=len(result.geojson["features"]),
        geojson=str(geojson_path))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadaudit",
        description="Road-surface defect segmentation, tagging, and geo-audit.",
    )
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--data-root", help="dataset directory")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic drive sequences")
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", default="128x64", help="WxH, multiples of 8")

    p = sub.add_parser("train", help="train a model on the dataset")
    p.add_argument("--model", choices=("cascade", "baseline"), default="cascade")
    p.add_argument("--schedule", choices=("two-step", "joint"), default="two-step")
    p.add_argument("--preset", choices=sorted(_PRESETS))
    p.add_argument("--epochs", type=int, help="max epochs per step")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval", help="hierarchy-level IoU reports")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself (pipeline check)")

    p = sub.add_parser("fit-thresholds", help="fit tag thresholds on validation")
    p.add_argument("--checkpoint")
    p.add_argument("--unit", choices=("pixels", "fraction"))
    p.add_argument("--oracle", action="store_true")

    p = sub.add_parser("audit", help="tag, score, and map one sequence")
    p.add_argument("--checkpoint")
    p.add_argument("--thresholds", required=True)
    p.add_argument("--sequence", required=True,
                   help="sequence directory (or id under --data-root)")
    p.add_argument("--window", type=int)
    p.add_argument("--floor", type=float)
    p.add_argument("--oracle", action="store_true")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "fit-thresholds": cmd_fit_thresholds,
    "audit": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_file(args.config) if args.config else PipelineConfig()
        cfg = _merge_flags(cfg, args)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        log("error", kind="config", message=str(e))
        return EXIT_CONFIG
    except (DataError, InvalidLabelError) as e:
        log("error", kind="data", message=str(e))
        return EXIT_DATA
    except NumericalError as e:
        log("error", kind="numerical", message=str(e))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
