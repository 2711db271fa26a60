"""Desk-scale ablation grid and manual-weight sweep on synthetic molecules."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import ModelConfig
from .distill import DistillConfig
from .moldata import Dataset, gen_synthetic
from .train import Checkpoint, TeacherCache, TrainConfig, distill_student, evaluate, train_teacher

log = logging.getLogger(__name__)

VARIANTS: dict[str, DistillConfig] = {
    "baseline": DistillConfig(mode="none"),
    "lm_last": DistillConfig(mode="global_only", layer_scope="last"),
    "lm_all": DistillConfig(mode="global_only", layer_scope="all"),
    "local_only": DistillConfig(mode="local_only", weight_rule="manual", weight=1.0),
    "lm_coord": DistillConfig(mode="global+local", weight_rule="coordinating"),
    "naive_last": DistillConfig(mode="naive_all", layer_scope="last", weight_rule="manual", weight=1.0),
}
GRID = ("baseline", "lm_last", "lm_all", "local_only", "lm_coord")
SWEEP_WEIGHTS = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class GridConfig:
    n_train: int = 5000
    n_val: int = 1000
    n_range: tuple[int, int] = (4, 16)
    data_seed: int = 2024
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    model: ModelConfig = field(default_factory=lambda: ModelConfig(layers=3, d_model=32, heads=4, ffn_mult=2))

    def train_config(self, seed: int, distill: DistillConfig | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=seed,
                           model=self.model, distill=distill or DistillConfig(mode="none"))

    def to_dict(self):
        return asdict(self)


def grid_data(cfg: GridConfig) -> tuple[Dataset, Dataset]:
    ds = gen_synthetic(cfg.n_train + cfg.n_val, cfg.n_range, seed=cfg.data_seed)
    return ds.split(cfg.n_train)


@dataclass
class GridResult:
    mae: dict[str, dict[int, float]] = field(default_factory=dict)   # variant -> seed -> best val MAE
    run_seconds: dict[str, dict[int, float]] = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, name: str, seed: int, value: float, seconds: float = 0.0):
        self.mae.setdefault(name, {})[seed] = value
        self.run_seconds.setdefault(name, {})[seed] = seconds

    def seconds_for(self, names) -> float:
        return sum(sum(self.run_seconds.get(n, {}).values()) for n in names)

    def median(self, name: str) -> float:
        return float(np.median(list(self.mae[name].values())))

    def medians(self) -> dict[str, float]:
        return {k: self.median(k) for k in self.mae}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "val_mae"])
            for name, per_seed in self.mae.items():
                for seed, v in sorted(per_seed.items()):
                    w.writerow([name, seed, repr(v)])


def run_grid(cfg: GridConfig, variants=GRID, weights=(), data=None,
             teacher: Checkpoint | None = None) -> GridResult:
    """Teacher plus each student variant for every seed.

    ``weights`` adds manual-weight ``global+local`` runs named ``w=<value>``.
    A given ``teacher`` is shared by all seeds instead of training one per seed.
    """
    train_ds, val_ds = data or grid_data(cfg)
    res = GridResult()
    fixed = teacher
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        t1 = time.perf_counter()
        if fixed is None:
            teacher, trec = train_teacher(cfg.train_config(seed), train_ds, val_ds)
            res.add("teacher", seed, trec.best_val_mae, time.perf_counter() - t1)
        else:
            teacher = fixed
            res.add("teacher", seed, evaluate(teacher, val_ds))
        log.info("seed %d teacher %.4f", seed, res.mae["teacher"][seed])
        t1 = time.perf_counter()
        cache = TeacherCache(teacher.params, teacher.model, train_ds)
        res.run_seconds["teacher"][seed] += time.perf_counter() - t1
        runs = [(name, VARIANTS[name]) for name in variants]
        runs += [(f"w={w:g}", DistillConfig(mode="global+local", weight_rule="manual", weight=w))
                 for w in weights]
        for name, dcfg in runs:
            dcfg = replace(dcfg, arch=cfg.model.arch)
            t1 = time.perf_counter()
            _, rec = distill_student(cfg.train_config(seed, dcfg), teacher, train_ds, val_ds, cache)
            res.add(name, seed, rec.best_val_mae, time.perf_counter() - t1)
            log.info("seed %d %s %.4f", seed, name, rec.best_val_mae)
    res.seconds = time.perf_counter() - t0
    return res


def run_weight_sweep(cfg: GridConfig, weights=SWEEP_WEIGHTS, data=None,
                     teacher: Checkpoint | None = None) -> GridResult:
    return run_grid(cfg, variants=("lm_coord",), weights=weights, data=data, teacher=teacher)


def sweep_rows(res: GridResult, weights=SWEEP_WEIGHTS) -> list[dict]:
    """One row per weight rule: manual weights then the coordinating rule."""
    rows = [{"rule": "manual", "weight": w, "median_val_mae": res.median(f"w={w:g}")} for w in weights]
    rows.append({"rule": "coordinating", "weight": "", "median_val_mae": res.median("lm_coord")})
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rule", "weight", "median_val_mae"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
