"""Adam, teacher/student training loops, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import LayerTrace, ModelConfig, forward, init_params, predict
from .distill import DistillConfig, distill_objective
from .moldata import Dataset, batches

log = logging.getLogger(__name__)

CKPT_VERSION = 1
RECORD_COLUMNS = ("epoch", "train_mae", "val_mae", "l_2d", "l_m", "l_a_mean", "weight_mean", "seconds")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    clip: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(mode="none"))

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["distill"] = DistillConfig(**d.get("distill", {"mode": "none"}))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ------------------------------------------------------------ teacher traces

class TeacherCache:
    """Frozen-teacher layer tokens per molecule, computed once.

    Batches are re-padded from the cache, which is exact because padded slots
    never influence real tokens.
    """

    def __init__(self, params, cfg: ModelConfig, dataset: Dataset, batch_size: int = 64):
        self.layers = cfg.layers
        self.d = cfg.d_model
        self.by_id: dict[int, np.ndarray] = {}
        for start in range(0, len(dataset), batch_size):
            mols = dataset.molecules[start:start + batch_size]
            _, trace = predict(params, next(batches(mols, len(mols))), cfg)
            stacked = np.stack([x.value for x in trace.tokens], axis=1)  # [B, L, T, d]
            for k, m in enumerate(mols):
                self.by_id[id(m)] = stacked[k, :, :m.n_atoms + 1].copy()

    def trace(self, mols, t: int) -> LayerTrace:
        out = np.zeros((self.layers, len(mols), t, self.d))
        for k, m in enumerate(mols):
            x = self.by_id[id(m)]
            out[:, k, :x.shape[1]] = x
        return LayerTrace([ad.const(o) for o in out])


# ---------------------------------------------------------------- training

@dataclass
class TrainingRecord:
    rows: list[dict] = field(default_factory=list)
    best_val_mae: float = float("inf")
    best_epoch: int = -1
    seed: int = 0
    config_hash: str = ""

    def numbers(self) -> list[tuple]:
        """Every emitted number except wall time."""
        return [tuple(r[c] for c in RECORD_COLUMNS if c != "seconds") for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(RECORD_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) for c in RECORD_COLUMNS) + "\n")


def _epoch_batches(ds: Dataset, batch_size: int, seed: int, epoch: int, pool: int = 16):
    """Shuffled batches, sorted by size within pools of ``pool`` batches to cut padding."""
    mols = ds.molecules
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(mols))
    groups = []
    span = batch_size * pool
    for p in range(0, len(order), span):
        idx = sorted(order[p:p + span], key=lambda i: (mols[i].n_atoms, i))
        groups.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    for g in rng.permutation(len(groups)):
        chunk = [mols[i] for i in groups[g]]
        yield chunk, next(batches(chunk, len(chunk)))


def mae(params, cfg: ModelConfig, ds: Dataset, batch_size: int = 128) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if cfg.view == "3d" and not ds.has_coords:
        raise ValueError("3D model needs a dataset with coordinates")
    err = 0.0
    for b in batches(ds, batch_size):
        pred, _ = predict(params, b, cfg)
        err += float(np.abs(pred - b.labels).sum())
    return err / len(ds)


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          teacher: tuple[dict, ModelConfig] | None = None,
          params: dict | None = None, progress: bool = False,
          teacher_cache: TeacherCache | None = None) -> tuple[dict, dict, TrainingRecord]:
    """Optimize ``cfg.model`` on ``train_ds``; returns (best params, last params, record).

    With a teacher, the student objective follows ``cfg.distill``; the teacher
    parameters are only read.  ``teacher_cache`` lets several students share
    one pass of teacher traces over ``train_ds``.
    """
    mcfg, dcfg = cfg.model, cfg.distill
    if mcfg.view == "3d" and not train_ds.has_coords:
        raise ValueError("3D training needs a dataset with coordinates")
    if dcfg.mode != "none" and teacher is None:
        raise ValueError(f"distill mode {dcfg.mode!r} needs a teacher")
    params = {k: v.copy() for k, v in (params or init_params(mcfg, cfg.seed)).items()}
    cache = None
    if dcfg.mode != "none":
        tparams, tcfg = teacher
        if tcfg.layers != mcfg.layers:
            raise ValueError(f"trace length mismatch: student {mcfg.layers} vs teacher {tcfg.layers} layers")
        width = mcfg.proj_dim or mcfg.d_model
        if width != tcfg.d_model:
            raise ValueError(f"student width {width} != teacher width {tcfg.d_model}; set proj_dim")
        cache = teacher_cache or TeacherCache(tparams, tcfg, train_ds)

    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rec = TrainingRecord(seed=cfg.seed, config_hash=cfg.digest())
    best = params
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = np.zeros(5)
        n_seen = 0
        for chunk, b in _epoch_batches(train_ds, cfg.batch_size, cfg.seed, epoch):
            tape = ad.Tape()
            P = tape.params(params)
            pred, trace = forward(P, b, mcfg)
            tt = cache.trace(chunk, b.tokens) if cache else None
            loss, br = distill_objective(pred, b.labels, trace, tt, b.mask, b.atom_counts, dcfg, P)
            if not np.isfinite(br.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            grads = {k: tape.grad(t) for k, t in P.items()}
            if cfg.clip is not None:
                clip_grads(grads, cfg.clip)
            opt.step(params, grads)
            bsz = b.size
            sums += bsz * np.array([float(np.abs(pred.value - b.labels).mean()), br.l_2d, br.l_m,
                                    br.l_a_mean, br.weight_mean])
            n_seen += bsz
        means = sums / n_seen
        val = mae(params, mcfg, val_ds)
        row = dict(zip(RECORD_COLUMNS, [epoch, *map(float, means[:1]), val, *map(float, means[1:]),
                                        time.perf_counter() - t0]))
        rec.rows.append(row)
        if val < rec.best_val_mae:
            rec.best_val_mae, rec.best_epoch = val, epoch
            best = {k: v.copy() for k, v in params.items()}
        if progress:
            log.info("epoch %d train_mae %.4f val_mae %.4f", epoch, row["train_mae"], val)
    return best, params, rec


# ------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    label_mean: float = 0.0
    label_std: float = 1.0
    seed: int = 0

    def save(self, path) -> None:
        doc = {
            "ccmd_ckpt_version": CKPT_VERSION,
            "model": self.model.to_dict(),
            "label_mean": self.label_mean,
            "label_std": self.label_std,
            "seed": self.seed,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.params.items())},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path, expect: ModelConfig | None = None) -> "Checkpoint":
        doc = json.loads(Path(path).read_text())
        if doc.get("ccmd_ckpt_version") != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {doc.get('ccmd_ckpt_version')!r}")
        model = ModelConfig.from_dict(doc["model"])
        if expect is not None and expect != model:
            raise ValueError(f"{path}: architecture mismatch ({model} vs {expect})")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        ref = init_params(model, 0)
        if set(ref) != set(params) or any(ref[k].shape != params[k].shape for k in ref):
            raise ValueError(f"{path}: parameters do not match the stored architecture")
        return cls(model, params, doc["label_mean"], doc["label_std"], doc["seed"])


def train_teacher(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset):
    """Supervised 3D-view model; returns (best checkpoint, record)."""
    if not train_ds.has_coords:
        raise ValueError("teacher training needs coordinates")
    cfg = replace(cfg, model=replace(cfg.model, view="3d"), distill=DistillConfig(mode="none"))
    best, _, rec = train(cfg, train_ds, val_ds)
    return Checkpoint(cfg.model, best, train_ds.label_mean, train_ds.label_std, cfg.seed), rec


def distill_student(cfg: TrainConfig, teacher: Checkpoint, train_ds: Dataset, val_ds: Dataset,
                    teacher_cache: TeacherCache | None = None):
    """2D-view student trained against a frozen teacher; returns (best checkpoint, record)."""
    cfg = replace(cfg, model=replace(cfg.model, view="2d"))
    best, _, rec = train(cfg, train_ds, val_ds, teacher=(teacher.params, teacher.model),
                         teacher_cache=teacher_cache)
    return Checkpoint(cfg.model, best, train_ds.label_mean, train_ds.label_std, cfg.seed), rec


def evaluate(ckpt: Checkpoint, ds: Dataset, view: str | None = None) -> float:
    view = view or ckpt.model.view
    if view != ckpt.model.view:
        raise ValueError(f"checkpoint expects the {ckpt.model.view} view, got {view}")
    return mae(ckpt.params, ckpt.model, ds)
