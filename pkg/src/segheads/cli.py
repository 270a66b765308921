"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 gradient-check
violation. Every command with the same config and seed writes identical
result files; wall-clock timing goes to a sidecar log only.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from .archive import Checkpoint, load_checkpoint, save_checkpoint
from .config import (ConfigError, RunConfig, apply_overrides, parse_config,
                     parse_config_text, resolve_encoder, resolved_copy,
                     snapshot)
from .data import load_dataset, split_patients
from .experiments import (PretrainError, ablate_depth, ablate_scale,
                          evaluate_on_split, finetune, generate_datasets,
                          labeled_curve, load_pretrained, normalized,
                          pretrain_source, save_pretrained, zeroshot_report)
from .metrics import aggregate, write_report_files
from .model import build_model
from .training import EpochRecord

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_GRADCHECK = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None, help="training/init seed")
    parser.add_argument("--head", choices=["autosam", "cnn", "linear"], default=None)
    parser.add_argument("--labeled", type=int, default=None,
                        help="labeled training volumes (0 = all)")
    parser.add_argument("--freeze", choices=["true", "false"], default=None)
    parser.add_argument("--depth", type=int, default=None, help="cnn head stages")
    parser.add_argument("--scale", choices=["tiny", "small", "base"], default=None)
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--data-dir", type=str, default=None)
    parser.add_argument("--source-data-dir", type=str, default=None)
    parser.add_argument("--checkpoint", type=str, default=None)
    parser.add_argument("--epochs", type=int, default=None)


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {
        "seed": args.seed,
        "head": args.head,
        "labeled": args.labeled,
        "freeze": None if args.freeze is None else args.freeze == "true",
        "cnn_depth": args.depth,
        "scale": args.scale,
        "out_dir": args.out,
        "data_dir": args.data_dir,
        "source_data_dir": args.source_data_dir,
        "checkpoint": args.checkpoint,
        "epochs": args.epochs,
    }
    return apply_overrides(cfg, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(cfg: RunConfig, out: Path) -> None:
    (out / "config.snapshot").write_text(snapshot(resolved_copy(cfg)))


def _log(out: Path, message: str) -> None:
    with open(out / "log.txt", "a") as f:
        f.write(f"[{time.strftime('%Y-%m-%d %H:%M:%S')}] {message}\n")


def _write_history(records: list[EpochRecord], path: Path, class_names) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_dice_mean",
                         *[f"val_dice_{n}" for n in class_names]])
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_dice_mean),
                             *[repr(v) for v in r.val_dice_per_class]])


def _write_rows_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _require(cfg: RunConfig, attr: str, flag: str) -> str:
    value = getattr(cfg, attr)
    if not value:
        raise ConfigError(f"missing {flag} (set it on the command line or in the config)")
    return value


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    started = time.time()
    target_dir, source_dir = generate_datasets(cfg, out)
    _write_snapshot(cfg, out)
    _log(out, f"gen-data finished in {time.time() - started:.1f}s")
    print(f"target volumes: {target_dir}")
    print(f"source volumes: {source_dir}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    source = load_dataset(_require(cfg, "source_data_dir", "--source-data-dir"))
    started = time.time()
    pair = pretrain_source(cfg, source)
    path = out / "pretrained.tarc"
    save_pretrained(pair, cfg, path)
    _write_snapshot(cfg, out)
    _log(out, f"pretrain finished in {time.time() - started:.1f}s")
    print(f"source val dice: {pair.source_val_dice:.4f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    volumes = normalized(load_dataset(_require(cfg, "data_dir", "--data-dir")))
    pair = load_pretrained(cfg.checkpoint) if cfg.checkpoint else None
    split = split_patients(sorted({v.patient_id for v in volumes}),
                           seed=cfg.split_seeds[0])
    started = time.time()
    model, result = finetune(cfg, volumes, split, pair)

    saved_cfg = resolved_copy(cfg)
    class_names = ("RV", "Myo", "LV")[:cfg.num_classes]
    _write_history(result.history, out / "history.csv", class_names)
    ckpt = Checkpoint(tensors=model.state_dict(), config_text=snapshot(saved_cfg),
                      best_val_dice=result.best_val_dice, extra=result.best_optimizer)
    save_checkpoint(ckpt, out / "best.tarc")
    _write_snapshot(cfg, out)
    _log(out, f"train finished in {time.time() - started:.1f}s "
              f"(best val dice {result.best_val_dice:.4f} at epoch {result.best_epoch})")
    print(f"best val dice: {result.best_val_dice:.4f} (epoch {result.best_epoch})")
    print(f"checkpoint: {out / 'best.tarc'}")
    return EXIT_OK


def _model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    cfg = parse_config_text(ckpt.config_text, source=str(path))
    enc_cfg = resolve_encoder(cfg)
    model = build_model(enc_cfg, cfg.head, cfg.num_classes, seed=0,
                        cnn_depth=cfg.cnn_depth, twoway_layers=cfg.twoway_layers)
    model.load_state_dict(ckpt.tensors)
    return model, cfg, ckpt


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    model, saved_cfg, ckpt = _model_from_checkpoint(
        _require(cfg, "checkpoint", "--checkpoint"))
    data_dir = cfg.data_dir or saved_cfg.data_dir
    if not data_dir:
        raise ConfigError("missing --data-dir (not in checkpoint config either)")
    volumes = normalized(load_dataset(data_dir))
    split_seed = cfg.split_seeds[0] if "split_seeds" in cfg.explicit \
        else saved_cfg.split_seeds[0]
    split = split_patients(sorted({v.patient_id for v in volumes}), seed=split_seed)
    started = time.time()
    report = evaluate_on_split(model, volumes, split, saved_cfg,
                               method=saved_cfg.head)
    cells = aggregate([report])
    csv_path, json_path = write_report_files(
        [(report.method, saved_cfg.labeled, cells)], out)
    _log(out, f"eval finished in {time.time() - started:.1f}s")
    print(f"report: {csv_path} {json_path}")
    print(f"dice_avg: {cells['dice_avg'].text()}  assd: {cells['assd'].text()}")
    return EXIT_OK


def cmd_zeroshot(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    pair = load_pretrained(_require(cfg, "checkpoint", "--checkpoint"))
    volumes = normalized(load_dataset(_require(cfg, "data_dir", "--data-dir")))
    split = split_patients(sorted({v.patient_id for v in volumes}),
                           seed=cfg.split_seeds[0])
    started = time.time()
    report = zeroshot_report(pair, volumes, split, cfg)
    cells = aggregate([report])
    csv_path, json_path = write_report_files([(report.method, 0, cells)], out)
    _write_snapshot(cfg, out)
    _log(out, f"zeroshot finished in {time.time() - started:.1f}s")
    print(f"report: {csv_path} {json_path}")
    print(f"dice_avg: {cells['dice_avg'].text()}  assd: {cells['assd'].text()}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import run_full_suite

    ok = run_full_suite(tolerance=1e-4, verbose=True)
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_ablate_depth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    volumes = load_dataset(_require(cfg, "data_dir", "--data-dir"))
    pair = load_pretrained(_require(cfg, "checkpoint", "--checkpoint"))
    started = time.time()
    rows = ablate_depth(cfg, volumes, pair)
    _write_rows_csv(rows, out / "depth_sweep.csv")
    _write_snapshot(cfg, out)
    _log(out, f"ablate-depth finished in {time.time() - started:.1f}s")
    print(f"wrote {out / 'depth_sweep.csv'}")
    return EXIT_OK


def cmd_ablate_scale(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    volumes = load_dataset(_require(cfg, "data_dir", "--data-dir"))
    source = load_dataset(_require(cfg, "source_data_dir", "--source-data-dir"))
    started = time.time()
    rows = ablate_scale(cfg, volumes, source)
    _write_rows_csv(rows, out / "scale_sweep.csv")
    _write_snapshot(cfg, out)
    _log(out, f"ablate-scale finished in {time.time() - started:.1f}s")
    print(f"wrote {out / 'scale_sweep.csv'}")
    return EXIT_OK


def cmd_curve(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    volumes = load_dataset(_require(cfg, "data_dir", "--data-dir"))
    pair = load_pretrained(_require(cfg, "checkpoint", "--checkpoint"))
    started = time.time()
    rows = labeled_curve(cfg, volumes, pair)
    _write_rows_csv(rows, out / "curve.csv")
    _write_snapshot(cfg, out)
    _log(out, f"curve finished in {time.time() - started:.1f}s")
    print(f"wrote {out / 'curve.csv'}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "zeroshot": cmd_zeroshot,
    "gradcheck": cmd_gradcheck,
    "ablate-depth": cmd_ablate_depth,
    "ablate-scale": cmd_ablate_scale,
    "curve": cmd_curve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segheads",
        description="Frozen-encoder segmentation finetuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, PretrainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
