"""``wafervit`` command line: gen, split, train, eval, predict, ablate.

Exit codes: 0 success, 1 usage, 2 data/format/config, 3 numeric failure.
Every output artifact gets a ``<artifact>.manifest.json`` sibling.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from typing import List, Optional, Sequence

import numpy as np

from . import __version__, checkpoint, data
from .errors import ConfigError, ContractError, FormatError, NumericError, WaferVitError
from .patterns import (BASE_DEFECTS, NUM_BASE, NUM_CLASSES, PATTERN_CLASSES, describe,
                       mask_to_defects, table3_counts)
from .trainer import TrainConfig, predict_scores, stream_seed, train, evaluate_model
from .vit import DESK_SCALE_PRESETS, PRESETS, VitConfig, init_weights
from .metrics import predicted_masks, validate_report

log = logging.getLogger("wafervit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_HEADER = ("patch_size", "batch_size", "train_loss", "train_accuracy", "validation_accuracy")


class UsageError(WaferVitError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _class_selection(text: str) -> List[int]:
    groups = {pc.group for pc in PATTERN_CLASSES}
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok in groups:
            out += [pc.class_id for pc in PATTERN_CLASSES if pc.group == tok]
        elif tok.upper().startswith("C") and tok[1:].isdigit():
            out.append(int(tok[1:]))
        elif tok.isdigit():
            out.append(int(tok))
        else:
            raise argparse.ArgumentTypeError(f"unknown class selector {tok!r}")
    bad = [c for c in out if not 1 <= c <= NUM_CLASSES]
    if bad:
        raise argparse.ArgumentTypeError(f"class ids out of range: {bad}")
    return sorted(set(out))


# -- manifests -------------------------------------------------------------

def write_manifest(artifacts: Sequence[str], command: str, config: dict, seeds: dict,
                   inputs: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": [os.fspath(a) for a in artifacts],
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    for a in artifacts:
        with open(os.fspath(a) + ".manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- commands --------------------------------------------------------------

def cmd_gen(args) -> int:
    t0 = time.time()
    if args.table3_defaults:
        counts = table3_counts()
    else:
        if args.per_class is None:
            raise UsageError("gen needs --per-class N or --table3-defaults")
        if args.per_class < 0:
            raise UsageError("--per-class must be >= 0")
        classes = args.classes or [pc.class_id for pc in PATTERN_CLASSES]
        counts = {pc.class_id: (args.per_class if pc.class_id in classes else 0)
                  for pc in PATTERN_CLASSES}
    ds = data.generate_dataset(counts, args.seed)
    data.save(ds, args.out)
    write_manifest([args.out], "gen", {"per_class_counts": {f"C{k}": v for k, v in counts.items()}},
                   {"seed": args.seed}, {}, t0)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    t0 = time.time()
    ds = data.load(args.input)
    tr, te = data.split(ds, args.ratio, args.seed)
    data.save(tr, args.train_out)
    data.save(te, args.test_out)
    write_manifest([args.train_out, args.test_out], "split", {"ratio": args.ratio},
                   {"seed": args.seed}, {"in": args.input}, t0)
    print(f"train {len(tr)} / test {len(te)}")
    return EXIT_OK


def resolve_model_config(variant: str, patch: Optional[int], image_size: Optional[int],
                         loss: str, dropout: Optional[float] = None,
                         norm: Optional[str] = None) -> VitConfig:
    head = ("multilabel", NUM_BASE) if loss == "bce" else ("multiclass", NUM_CLASSES)
    try:
        return VitConfig.preset(variant, patch_size=patch, image_size=image_size,
                                head_mode=head[0], num_outputs=head[1], dropout=dropout,
                                norm_placement=norm, in_channels=1)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _desk_note(variant: str) -> None:
    if variant in DESK_SCALE_PRESETS:
        print(f"note: variant '{variant}' is a desk-scale preset, not a published ViT variant",
              file=sys.stderr)


def cmd_train(args) -> int:
    t0 = time.time()
    mcfg = resolve_model_config(args.variant, args.patch, args.image_size, args.loss,
                                args.dropout, args.norm)
    try:
        tcfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, learning_rate=args.lr,
                           seed=args.seed, loss_mode=args.loss, weight_decay=args.weight_decay,
                           eval_every=args.eval_every, augment=not args.no_augment)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    _desk_note(args.variant)
    train_ds = data.load(args.train)
    test_ds = data.load(args.test) if args.test else None
    model = init_weights(mcfg, stream_seed(args.seed, "init"))
    print(f"model {args.variant}: {mcfg.num_patches} patches, {model.num_elements()} parameters")
    os.makedirs(args.out, exist_ok=True)

    def report(row):
        val = "-" if row.val_acc is None else f"{row.val_acc:.4f}"
        print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  train_acc {row.train_acc:.4f}  "
              f"val_acc {val}", flush=True)

    artifacts = [os.path.join(args.out, n) for n in ("final.wvck", "best.wvck", "history.csv")]
    manifest_cfg = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "variant": args.variant,
                    "desk_scale_preset": args.variant in DESK_SCALE_PRESETS}
    try:
        train(model, train_ds, test_ds, tcfg, out_dir=args.out, on_epoch=report)
    finally:
        write_manifest([a for a in artifacts if os.path.exists(a)], "train", manifest_cfg,
                       {"seed": args.seed, "streams": ["init", "shuffle", "augment", "dropout"]},
                       {"train": args.train, "test": args.test}, t0)
    return EXIT_OK


def _check_model_data(model) -> None:
    cfg = model.config
    if cfg.in_channels != 1:
        raise ConfigError(
            f"model expects input [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}] "
            f"but wafer data is [B, 1, {data.GRID}, {data.GRID}] grayscale")


def cmd_eval(args) -> int:
    t0 = time.time()
    model, _, _ = checkpoint.load(args.model)
    _check_model_data(model)
    ds = data.load(args.data)
    report = evaluate_model(model, ds, args.threshold)
    validate_report(report.to_dict())
    json_path, csv_path = args.report + ".json", args.report + ".csv"
    parent = os.path.dirname(args.report)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    write_manifest([json_path, csv_path], "eval", {"threshold": args.threshold}, {},
                   {"model": args.model, "data": args.data}, t0)
    m = report.macro
    print(f"samples {report.sample_count}  exact-match {report.exact_match_accuracy:.4f}  "
          f"macro P {m['precision']:.4f} R {m['recall']:.4f} F1 {m['f1']:.4f} "
          f"Acc {m['accuracy']:.4f}  invalid {report.invalid_count}")
    return EXIT_OK


def format_prediction(probs: np.ndarray, head_mode: str, threshold: float = 0.5) -> str:
    lines = []
    if head_mode == "multilabel":
        for abbr, p in zip(BASE_DEFECTS, probs):
            lines.append(f"{abbr:>3}  {p:.6f}")
        mask = int(predicted_masks(probs[None], threshold)[0])
    else:
        k = int(np.argmax(probs))
        mask = PATTERN_CLASSES[k].mask
        lines.append(f"top class probability {probs[k]:.6f}")
    lines.append(f"mask {{{', '.join(mask_to_defects(mask))}}} ({mask:#04x})")
    lines.append(describe(mask))
    return "\n".join(lines)


def cmd_predict(args) -> int:
    model, _, _ = checkpoint.load(args.model)
    _check_model_data(model)
    ds = data.load(args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} records")
    probs = predict_scores(model, ds.subset([args.index]))[0]
    print(format_prediction(probs, model.config.head_mode, args.threshold))
    return EXIT_OK


def run_ablation_cell(train_path: str, test_path: str, variant: str, patch: int, batch: int,
                      image_size: Optional[int], epochs: int, lr: float, seed: int, loss: str) -> list:
    try:
        mcfg = resolve_model_config(variant, patch, image_size, loss)
        tcfg = TrainConfig(batch_size=batch, epochs=epochs, learning_rate=lr, seed=seed,
                           loss_mode=loss, eval_every=max(epochs, 1))
        tr, te = data.load(train_path), data.load(test_path)
        model = init_weights(mcfg, stream_seed(seed, "init"))
        res = train(model, tr, te, tcfg)
        last = res.history[-1]
        return [patch, batch, last.train_loss, last.train_acc, last.val_acc]
    except Exception as exc:  # recorded in-row; the sweep continues
        log.error("ablation cell patch=%s batch=%s failed: %s", patch, batch, exc)
        return [patch, batch, math.nan, math.nan, math.nan]


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    t0 = time.time()
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1 for ablation")
    _desk_note(args.variant)
    cells = [(p, b) for p in args.patches for b in args.batches]
    for p, _ in cells:
        resolve_model_config(args.variant, p, args.image_size, args.loss)
    common = (args.image_size, args.epochs, args.lr, args.seed, args.loss)
    jobs = [(args.train, args.test, args.variant, p, b) + common for p, b in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_ablation_cell, *zip(*jobs)))
    else:
        rows = []
        for j in jobs:
            rows.append(run_ablation_cell(*j))
            print(f"patch {j[3]:>3} batch {j[4]:>3}: loss {rows[-1][2]:.4f} "
                  f"train_acc {rows[-1][3]:.4f} val_acc {rows[-1][4]:.4f}", flush=True)
    text = ablation_csv(rows)
    with open(args.out, "w") as fh:
        fh.write(text)
    write_manifest([args.out], "ablate",
                   {"variant": args.variant, "patches": args.patches, "batches": args.batches,
                    "image_size": args.image_size, "epochs": args.epochs, "lr": args.lr,
                    "loss": args.loss, "desk_scale_preset": args.variant in DESK_SCALE_PRESETS},
                   {"seed": args.seed}, {"train": args.train, "test": args.test}, t0)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wafervit", description="Tiny ViTs for wafer-map defect classification")
    p.add_argument("--version", action="version", version=f"wafervit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    src = g.add_mutually_exclusive_group()
    src.add_argument("--per-class", type=int)
    src.add_argument("--table3-defaults", action="store_true",
                     help="WM-38k class amounts (38,015 records)")
    g.add_argument("--classes", type=_class_selection,
                   help="restrict --per-class to e.g. 'single,2-mixed' or 'C1,C2'")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="stratified train/test split")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--train", required=True)
    t.add_argument("--test")
    t.add_argument("--variant", choices=sorted(PRESETS), default="tiny")
    t.add_argument("--patch", type=int)
    t.add_argument("--image-size", type=int)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--dropout", type=float)
    t.add_argument("--norm", choices=["pre", "post"])
    t.add_argument("--loss", choices=["bce", "ce"], default="bce")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--report", required=True, help="output path prefix for .json and .csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="patch-size x batch-size sweep")
    a.add_argument("--train", required=True)
    a.add_argument("--test", required=True)
    a.add_argument("--patches", type=_int_list, default=[16, 8])
    a.add_argument("--batches", type=_int_list, default=[64, 32, 16])
    a.add_argument("--variant", choices=sorted(PRESETS), default="micro")
    a.add_argument("--image-size", type=int)
    a.add_argument("--epochs", type=int, default=30)
    a.add_argument("--lr", type=float, default=3e-4)
    a.add_argument("--loss", choices=["bce", "ce"], default="bce")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--jobs", type=int, default=1, help="parallel cells (deterministic per cell)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("predict", help="predict one wafer map")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--index", type=int, required=True)
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
