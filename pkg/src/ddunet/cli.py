"""``ddunet`` command line: gen-data, train, eval, predict, analyze."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, io
from .data import SPLITS, DatasetSpec, generate_dataset, load_split
from .metrics import predict_classes
from .model import ModelConfig, build, parameter_table, unet_channels
from .partition import make_layout
from .runtime import Runtime, make_plan
from .train import TrainConfig, evaluate, fit, predict_logits

log = logging.getLogger("ddunet")

CLASS_NAMES = ("background", "circle", "line")


class UsageError(ValueError):
    pass


def parse_grid(text: str) -> tuple[int, int]:
    try:
        n, m = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like NxM, got {text!r}") from None
    if n < 1 or m < 1:
        raise UsageError(f"grid dimensions must be positive, got {text!r}")
    return n, m


def parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    return h, w


def parse_yn(text: str) -> bool:
    t = str(text).strip().upper()
    if t in ("Y", "YES", "TRUE", "1"):
        return True
    if t in ("N", "NO", "FALSE", "0"):
        return False
    raise UsageError(f"expected Y or N, got {text!r}")


def parse_channels(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", "-").split("-"))


def data_width_grid(data_dir: Path) -> tuple[int, int]:
    """Default 1xk grid from a dataset's meta.txt."""
    meta = io.read_keyvalue(data_dir / "meta.txt")
    return 1, int(meta["k"])


def class_name(j: int) -> str:
    return CLASS_NAMES[j] if j < len(CLASS_NAMES) else f"class{j}"


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    kw = {}
    if args.counts:
        parts = [int(v) for v in args.counts.split(",")]
        if len(parts) != 3 or min(parts) < 0:
            raise UsageError("--counts needs three non-negative integers TR,VA,TE")
        kw = dict(zip(SPLITS, parts))
    spec = DatasetSpec(args.k, seed=args.seed, **kw)
    manifest = generate_dataset(spec, args.out)
    print(" ".join(f"{k}={v}" for k, v in manifest.items()))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
TRAIN_KEYS = {
    # key: (type, default)
    "data": (str, None),
    "out": (str, None),
    "depth": (int, 3),
    "comm_maps": (int, 32),
    "comm": (parse_yn, True),
    "grid": (parse_grid, None),
    "workers": (int, None),
    "seed": (int, 42),
    "channels": (parse_channels, None),
    "epochs": (int, TrainConfig.max_epochs),
    "lr": (float, TrainConfig.lr),
    "batch_size": (int, TrainConfig.batch_size),
    "dropout": (float, 0.1),
    "early_stop_patience": (int, TrainConfig.early_stop_patience),
    "lr_patience": (int, TrainConfig.lr_patience),
    "min_stop_epoch": (int, TrainConfig.min_stop_epoch),
    "loss": (str, TrainConfig.loss),
}


def resolve_train(args) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    values = {k: d for k, (_, d) in TRAIN_KEYS.items()}
    if args.config:
        for k, v in io.read_keyvalue(args.config).items():
            key = k.replace("-", "_")
            if key not in TRAIN_KEYS:
                raise UsageError(f"unknown config key {k!r}")
            values[key] = TRAIN_KEYS[key][0](v)
    for key, (conv, _) in TRAIN_KEYS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = conv(flag) if isinstance(flag, str) and conv is not str else flag
    for key in ("data", "out"):
        if values[key] is None:
            raise UsageError(f"--{key} is required")
    return values


def cmd_train(args) -> int:
    v = resolve_train(args)
    data_dir, out = Path(v["data"]), Path(v["out"])
    grid = v["grid"] or data_width_grid(data_dir)
    channels = v["channels"] or unet_channels(1, 4, v["depth"], 3)
    model_cfg = ModelConfig(v["depth"], v["comm_maps"], v["comm"], channels, v["dropout"])
    train_cfg = TrainConfig(lr=v["lr"], max_epochs=v["epochs"], batch_size=v["batch_size"],
                            early_stop_patience=v["early_stop_patience"], lr_patience=v["lr_patience"],
                            min_stop_epoch=v["min_stop_epoch"], seed=v["seed"], loss=v["loss"])
    train_split = load_split(data_dir, "train")
    val_split = load_split(data_dir, "val")
    H, W = train_split.images.shape[-2:]
    layout = make_layout(H, W, *grid)
    model = build(model_cfg, seed=v["seed"])
    model.check_layout(train_split.images.shape, layout)  # fail before any work
    plan = make_plan(layout, v["workers"])

    out.mkdir(parents=True, exist_ok=True)
    resolved = {"data": data_dir, "out": out, "model": model_cfg.name, "depth": model_cfg.depth,
                "comm_maps": model_cfg.comm_maps, "comm": "Y" if model_cfg.comm else "N",
                "channels": "-".join(map(str, channels)), "dropout": model_cfg.dropout,
                "grid": f"{grid[0]}x{grid[1]}", "workers": plan.workers}
    resolved.update({k: val for k, val in asdict(train_cfg).items()})
    io.write_meta(out / "config.txt", resolved)

    def progress(row):
        print("epoch {} train_loss {:.5f} val_loss {:.5f} val_miou {:.4f} lr {:g}".format(*row), flush=True)

    record = fit(model, plan, train_split, val_split, layout, train_cfg, out, progress=progress)
    print(f"best epoch {record.best_epoch} val_loss {record.best_val_loss:.5f}; wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------
def cmd_eval(args) -> int:
    model = io.load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    split = load_split(data_dir, args.split)
    grid = parse_grid(args.grid) if args.grid else data_width_grid(data_dir)
    layout = make_layout(*split.images.shape[-2:], *grid)
    model.check_layout(split.images.shape, layout)
    with Runtime(model, make_plan(layout, args.workers)) as rt:
        loss, cm = evaluate(rt, split, layout)
    rows = [(class_name(j), cm.iou(j)) for j in range(cm.num_classes)]
    rows.append(("miou", cm.mean_iou()))
    for name, value in rows:
        print(f"{name:<12} {value:.4f}")
    print(f"{'dice_loss':<12} {loss:.5f}")
    if args.out:
        io.write_csv(args.out, ("class", "iou"), rows)
    return 0


def cmd_predict(args) -> int:
    model = io.load_checkpoint(args.ckpt)
    image = io.read_pgm(args.image)
    x = (image.astype(np.float32) / np.float32(255))[None, None]
    N, M = parse_grid(args.grid)
    layout = make_layout(*image.shape, N, M)
    model.check_layout(x.shape, layout)
    with Runtime(model, make_plan(layout, args.workers)) as rt:
        (_, logits), = predict_logits(rt, x, layout)
    io.write_pgm(args.out, predict_classes(logits)[0].astype(np.uint8))
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------
def cmd_analyze(args) -> int:
    comm = parse_yn(args.comm)
    channels = parse_channels(args.channels) if args.channels else unet_channels(1, 4, args.depth, 3)
    cfg = ModelConfig(args.depth, args.comm_maps, comm, channels)
    hw = parse_hw(args.input) if args.input else (32, 32)
    grid = parse_grid(args.grid)
    text, table_csv = analysis.report(cfg, hw, grid)
    print(text, end="")
    print("\nparameters per block (built model):")
    for name, n in parameter_table(build(cfg)):
        print(f"  {name:<24}{n:>10}")
    if args.csv:
        Path(args.csv).write_text(table_csv)
    return 0


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddunet", description="Domain-decomposition U-Net experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--k", type=int, required=True, help="subimages per image")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--counts", help="TR,VA,TE (default 4000,1000,1000)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a DDU-Net")
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--depth", type=int)
    t.add_argument("--comm-maps", dest="comm_maps", type=int)
    t.add_argument("--comm", help="Y or N")
    t.add_argument("--grid", help="NxM (default 1xk from the dataset)")
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--channels", help="dash-separated channel list")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    t.add_argument("--lr-patience", dest="lr_patience", type=int)
    t.add_argument("--min-stop-epoch", dest="min_stop_epoch", type=int)
    t.add_argument("--loss", choices=("dice", "class_dice"), help="default: pooled dice")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--grid")
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--workers", type=int)
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="segment one PGM image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--grid", required=True)
    pr.add_argument("--workers", type=int)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_predict)

    a = sub.add_parser("analyze", help="receptive field, memory and comm tables")
    a.add_argument("--depth", type=int, required=True)
    a.add_argument("--comm-maps", dest="comm_maps", type=int, required=True)
    a.add_argument("--comm", default="Y")
    a.add_argument("--channels")
    a.add_argument("--input", help="subimage HxW (default 32x32)")
    a.add_argument("--grid", default="1x2")
    a.add_argument("--csv", help="also write the table as CSV")
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"ddunet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
