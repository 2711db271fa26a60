"""Command-line entry point: ``ccmd <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import ModelConfig, dump_attention, predict
from .distill import DistillConfig
from .experiments import GridConfig, run_weight_sweep, sweep_rows, write_sweep_csv
from .gradscan import DEFAULT_N, scaling_scan, scan_config, write_scan
from .moldata import Dataset, batches, gen_synthetic, load_jsonl, save_jsonl
from .train import Checkpoint, TrainConfig, evaluate, train

log = logging.getLogger("ccmd")

# (flag dest, default) merged from --config then flags
TRAIN_KEYS = {"lr": 1e-3, "batch_size": 64, "epochs": 10, "seed": 0, "clip": None,
              "arch": "transformer", "layers": 4, "d_model": 64, "heads": 4, "ffn_mult": 4,
              "val_fraction": 0.2}
DISTILL_KEYS = {"mode": "global+local", "layer_scope": "all", "weight_rule": "coordinating",
                "weight": 1.0, "include_virtual": True}


class CliError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file of defaults; flags override it")
    p.add_argument("--data", type=Path, required=True, help="training JSONL")
    p.add_argument("--val", type=Path, help="validation JSONL (default: tail split of --data)")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip", type=float, help="global gradient-norm clip (off by default)")
    p.add_argument("--arch", choices=["transformer", "gin"])
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-mult", type=int)


def _add_distill_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["none", "global_only", "local_only", "global+local", "naive_all"])
    p.add_argument("--layer-scope", choices=["last", "all"])
    p.add_argument("--weight-rule", choices=["manual", "coordinating"])
    p.add_argument("--weight", type=float)
    p.add_argument("--exclude-virtual", dest="include_virtual", action="store_const", const=False,
                   help="leave the virtual token out of the atom term")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccmd", description="3D->2D coordinated distillation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic JSONL dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-min", type=int, default=4)
    p.add_argument("--n-max", type=int, default=64)
    p.add_argument("--out", type=Path, default=Path("data.jsonl"))

    p = sub.add_parser("train-teacher", help="train the 3D-view teacher")
    _add_train_flags(p)

    p = sub.add_parser("distill", help="train a 2D student against a frozen teacher")
    _add_train_flags(p)
    _add_distill_flags(p)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")

    p = sub.add_parser("eval", help="MAE of a checkpoint on a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--view", choices=["2d", "3d"])

    p = sub.add_parser("grad-scan", help="virtual-token gradient growth with molecule size")
    p.add_argument("--archs", default="transformer,gin")
    p.add_argument("--n-list", type=_ints, default=list(DEFAULT_N))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--molecules", type=int, default=20)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--weighted", action="store_true", help="use the coordinated atom loss")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("weight-sweep", help="manual weights vs the coordinating weight")
    _add_train_flags(p)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--weights", type=_floats, default=[1e-3, 1e-2, 1e-1, 1.0])
    p.add_argument("--seeds", type=_ints, help="student seeds (default: --seed)")

    p = sub.add_parser("dump-attention", help="write attention maps of one molecule as CSV")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _merged(args, keys: dict) -> dict:
    base = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        if not cfg_path.exists():
            raise CliError(f"config file not found: {cfg_path}")
        try:
            base = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"invalid config file {cfg_path}: {e}") from None
        unknown = set(base) - set(TRAIN_KEYS) - set(DISTILL_KEYS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for k, default in keys.items():
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else base.get(k, default)
    return out


def _load(path: Path) -> Dataset:
    if not path.exists():
        raise CliError(f"file not found: {path}")
    return load_jsonl(path)


def _datasets(args, opts) -> tuple[Dataset, Dataset]:
    train_ds = _load(args.data)
    if args.val is not None:
        return train_ds, _load(args.val)
    n_val = int(round(len(train_ds) * opts["val_fraction"]))
    if not 0 < n_val < len(train_ds):
        raise CliError("dataset too small for a validation split; pass --val")
    return train_ds.split(len(train_ds) - n_val)


def _train_config(opts, distill: DistillConfig | None = None) -> TrainConfig:
    model = ModelConfig(arch=opts["arch"], layers=opts["layers"], d_model=opts["d_model"],
                        heads=opts["heads"], ffn_mult=opts["ffn_mult"])
    return TrainConfig(lr=opts["lr"], batch_size=opts["batch_size"], epochs=opts["epochs"],
                       seed=opts["seed"], clip=opts["clip"], model=model,
                       distill=distill or DistillConfig(mode="none"))


def _write_run(run_dir: Path, cfg: TrainConfig, best: Checkpoint, last: Checkpoint, rec, extra=None):
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = {"train": cfg.to_dict(), "config_hash": cfg.digest(), **(extra or {})}
    (run_dir / "config.json").write_text(json.dumps(snap, indent=2))
    rec.to_csv(run_dir / "record.csv")
    best.save(run_dir / "best.ckpt")
    last.save(run_dir / "last.ckpt")


def cmd_gen_data(args):
    ds = gen_synthetic(args.count, (args.n_min, args.n_max), seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(ds, args.out)
    print(f"wrote {len(ds)} molecules to {args.out}")


def cmd_train_teacher(args):
    opts = _merged(args, TRAIN_KEYS)
    train_ds, val_ds = _datasets(args, opts)
    cfg = _train_config(opts)
    cfg = replace(cfg, model=replace(cfg.model, view="3d"))
    if not train_ds.has_coords:
        raise CliError("teacher training needs a dataset with coordinates")
    best, last, rec = train(cfg, train_ds, val_ds, progress=args.verbose)
    mk = lambda p: Checkpoint(cfg.model, p, train_ds.label_mean, train_ds.label_std, cfg.seed)
    _write_run(args.run_dir, cfg, mk(best), mk(last), rec)
    print(f"best val MAE {rec.best_val_mae:.6f} at epoch {rec.best_epoch}")


def _distill_config(args, arch) -> DistillConfig:
    d = _merged(args, DISTILL_KEYS)
    return DistillConfig(mode=d["mode"], layer_scope=d["layer_scope"], weight_rule=d["weight_rule"],
                         weight=d["weight"], include_virtual=d["include_virtual"], arch=arch)


def cmd_distill(args):
    opts = _merged(args, TRAIN_KEYS)
    train_ds, val_ds = _datasets(args, opts)
    if not args.teacher.exists():
        raise CliError(f"teacher checkpoint not found: {args.teacher}")
    teacher = Checkpoint.load(args.teacher)
    cfg = _train_config(opts, _distill_config(args, opts["arch"]))
    cfg = replace(cfg, model=replace(cfg.model, view="2d"))
    best, last, rec = train(cfg, train_ds, val_ds, teacher=(teacher.params, teacher.model),
                            progress=args.verbose)
    mk = lambda p: Checkpoint(cfg.model, p, train_ds.label_mean, train_ds.label_std, cfg.seed)
    _write_run(args.run_dir, cfg, mk(best), mk(last), rec, {"teacher": str(args.teacher)})
    print(f"best val MAE {rec.best_val_mae:.6f} at epoch {rec.best_epoch}")


def cmd_eval(args):
    if not args.ckpt.exists():
        raise CliError(f"checkpoint not found: {args.ckpt}")
    ckpt = Checkpoint.load(args.ckpt)
    print(f"{evaluate(ckpt, _load(args.data), args.view):.6f}")


def cmd_grad_scan(args):
    args.out.mkdir(parents=True, exist_ok=True)
    results = []
    for arch in [a.strip() for a in args.archs.split(",") if a.strip()]:
        res = scaling_scan(arch, args.n_list, args.seeds, args.molecules,
                           scan_config(arch, args.d_model), weighted=args.weighted)
        results.append(res)
        print(f"{arch}: slope {res.fit['slope']:.3f} R2 {res.fit['r2']:.3f} (layers {res.fit['layers']})")
    write_scan(results, args.out / "scan.csv", args.out / "fits.json")


def cmd_weight_sweep(args):
    opts = _merged(args, TRAIN_KEYS)
    train_ds, val_ds = _datasets(args, opts)
    if not args.teacher.exists():
        raise CliError(f"teacher checkpoint not found: {args.teacher}")
    teacher = Checkpoint.load(args.teacher)
    base = _train_config(opts)
    grid = GridConfig(n_train=len(train_ds), n_val=len(val_ds), seeds=tuple(args.seeds or [opts["seed"]]),
                      epochs=base.epochs, lr=base.lr, batch_size=base.batch_size, model=base.model)
    res = run_weight_sweep(grid, args.weights, data=(train_ds, val_ds), teacher=teacher)
    rows = sweep_rows(res, args.weights)
    args.run_dir.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, args.run_dir / "sweep.csv")
    res.to_csv(args.run_dir / "sweep_per_seed.csv")
    for r in rows:
        print(f"{r['rule']:>12} {r['weight']!s:>8} {r['median_val_mae']:.6f}")


def cmd_dump_attention(args):
    ckpt = Checkpoint.load(args.ckpt)
    ds = _load(args.data)
    if not 0 <= args.index < len(ds):
        raise CliError(f"index {args.index} outside dataset of {len(ds)}")
    if ckpt.model.arch != "transformer":
        raise CliError("attention maps need a transformer checkpoint")
    batch = next(batches([ds[args.index]], 1))
    _, trace = predict(ckpt.params, batch, ckpt.model)
    files = dump_attention(trace, args.out)
    print(f"wrote {len(files)} files to {args.out}")


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "eval": cmd_eval, "grad-scan": cmd_grad_scan, "weight-sweep": cmd_weight_sweep,
            "dump-attention": cmd_dump_attention}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.cmd](args)
    except (CliError, ValueError, FileNotFoundError) as e:
        print(f"ccmd {args.cmd}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
