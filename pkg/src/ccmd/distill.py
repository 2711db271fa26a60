"""Supervised and distillation losses and their composition.

All L1 distillation terms average over the embedding dimension.  Teacher
tensors enter as constants, so no gradient reaches the teacher.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .backbone import ARCHS, LayerTrace

MODES = ("none", "global_only", "local_only", "global+local", "naive_all")
SCOPES = ("last", "all")
RULES = ("manual", "coordinating")


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "global+local"
    layer_scope: str = "all"
    weight_rule: str = "coordinating"
    weight: float = 1.0          # manual weight on the atom (or naive) term
    arch: str = "transformer"    # student architecture, picks the coordinating rule
    local_reduction: str = "mean"
    include_virtual: bool = True
    global_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown distill mode {self.mode!r}")
        if self.layer_scope not in SCOPES:
            raise ValueError(f"unknown layer scope {self.layer_scope!r}")
        if self.weight_rule not in RULES:
            raise ValueError(f"unknown weight rule {self.weight_rule!r}")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.local_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown local reduction {self.local_reduction!r}")
        if self.weight < 0 or self.global_weight < 0:
            raise ValueError("distillation weights must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    l_2d: float
    l_m: float
    l_a_mean: float
    weight_mean: float
    total: float

    def to_dict(self):
        return asdict(self)


def supervised_l1(pred: ad.Tensor, labels) -> ad.Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape:
        raise ad.ShapeError(f"supervised_l1: incompatible shapes {pred.shape} and {labels.shape}")
    return ad.mean_axis(ad.abs_(pred - ad.const(labels)))


def _layers(n: int, scope: str) -> range:
    return range(n - 1, n) if scope == "last" else range(n)


def _check_traces(student: LayerTrace, teacher: LayerTrace):
    if student.layers != teacher.layers:
        raise ValueError(f"trace length mismatch: student {student.layers} vs teacher {teacher.layers}")
    for s, t in zip(student.tokens, teacher.tokens):
        if s.shape != t.shape:
            raise ad.ShapeError(f"trace shape mismatch: {s.shape} vs {t.shape}")


def _token_l1(s: ad.Tensor, t) -> ad.Tensor:
    """Mean over the embedding axis of ``|s - t|``; ``[B, T]``."""
    tv = t.value if isinstance(t, ad.Tensor) else t
    return ad.mean_axis(ad.abs_(s - ad.const(tv)), axis=-1)


def project(trace: LayerTrace, P: dict) -> LayerTrace:
    """Apply the student's width projection, if it has one."""
    if "proj.w" not in P:
        return trace
    toks = [ad.matmul(x, P["proj.w"]) for x in trace.tokens]
    return LayerTrace(toks, trace.attention, trace.mask, trace.atom_counts)


def loss_global(student: LayerTrace, teacher: LayerTrace, layer_scope: str = "all") -> ad.Tensor:
    """Batch mean of the virtual-token L1, summed over the selected layers."""
    _check_traces(student, teacher)
    total = None
    for l in _layers(student.layers, layer_scope):
        s0 = ad.slice_(student.tokens[l], (slice(None), slice(0, 1)))
        t0 = teacher.tokens[l].value[:, 0:1]
        term = ad.mean_axis(_token_l1(s0, t0))
        total = term if total is None else total + term
    return total


def loss_local(student: LayerTrace, teacher: LayerTrace, mask, layer_scope: str = "all",
               reduction: str = "mean", include_virtual: bool = True) -> ad.Tensor:
    """Per-molecule atom-token distillation ``[B]``.

    ``reduction="sum"`` sums token L1 over the molecule's tokens; ``"mean"``
    divides that by the token count (N+1 with the virtual slot, else N).
    """
    _check_traces(student, teacher)
    m = np.asarray(mask, dtype=np.float64).copy()
    if not include_virtual:
        m[:, 0] = 0.0
    total = None
    for l in _layers(student.layers, layer_scope):
        per_tok = _token_l1(student.tokens[l], teacher.tokens[l])
        term = ad.sum_axis(ad.mul(per_tok, ad.const(m)), axis=1)
        total = term if total is None else total + term
    if reduction == "mean":
        total = ad.mul(total, ad.const(1.0 / m.sum(axis=1)))
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def loss_local_mean(student, teacher, mask, layer_scope="all", include_virtual=True) -> ad.Tensor:
    return loss_local(student, teacher, mask, layer_scope, "mean", include_virtual)


def loss_all_tokens(student: LayerTrace, teacher: LayerTrace, mask, layer_scope: str = "last") -> ad.Tensor:
    """Undivided distillation: one L1 mean over every real token element in the batch."""
    _check_traces(student, teacher)
    m = np.asarray(mask, dtype=np.float64)
    total = None
    for l in _layers(student.layers, layer_scope):
        per_tok = _token_l1(student.tokens[l], teacher.tokens[l])
        term = ad.scale(ad.sum_axis(ad.mul(per_tok, ad.const(m))), 1.0 / m.sum())
        total = term if total is None else total + term
    return total


def coordinating_weight(n_atoms: int, arch: str = "transformer") -> float:
    """Multiplier on the per-token-mean atom loss.

    Transformer students get 1/N (1/N^2 on the summed loss); GIN students 1.
    """
    if n_atoms < 1:
        raise ValueError(f"atom count must be >= 1, got {n_atoms}")
    if arch == "transformer":
        return 1.0 / n_atoms
    if arch == "gin":
        return 1.0
    raise ValueError(f"unknown arch {arch!r}")


def atom_weights(cfg: DistillConfig, n_atoms=None) -> np.ndarray:
    if cfg.weight_rule == "manual":
        return np.full(len(n_atoms) if n_atoms is not None else 1, cfg.weight)
    if n_atoms is None:
        raise ValueError("coordinating weight needs per-molecule atom counts")
    return np.array([coordinating_weight(int(n), cfg.arch) for n in n_atoms])


def total_loss(l_2d: ad.Tensor, l_m: ad.Tensor | None, l_a: ad.Tensor | None, n_atoms,
               cfg: DistillConfig, l_all: ad.Tensor | None = None) -> tuple[ad.Tensor, LossBreakdown]:
    """Compose the objective for ``cfg.mode``.

    ``l_a`` holds per-molecule atom losses; its weighted batch mean is added.
    """
    total = l_2d
    lm_v = la_v = w_mean = 0.0
    if cfg.mode in ("global_only", "global+local"):
        total = total + ad.scale(l_m, cfg.global_weight)
        lm_v = float(l_m.value)
    if cfg.mode in ("local_only", "global+local"):
        if cfg.weight_rule == "coordinating" and n_atoms is None:
            raise ValueError("coordinating weight needs per-molecule atom counts")
        w = atom_weights(cfg, n_atoms)
        b = l_a.shape[0]
        total = total + ad.sum_axis(ad.mul(l_a, ad.const(w / b)))
        la_v, w_mean = float(l_a.value.mean()), float(w.mean())
    if cfg.mode == "naive_all":
        total = total + ad.scale(l_all, cfg.weight)
        la_v, w_mean = float(l_all.value), cfg.weight
    return total, LossBreakdown(float(l_2d.value), lm_v, la_v, w_mean, float(total.value))


def distill_objective(pred: ad.Tensor, labels, student: LayerTrace, teacher: LayerTrace | None,
                      mask, n_atoms, cfg: DistillConfig, P: dict | None = None):
    """Full student objective from a forward pass; teacher may be None for mode "none"."""
    l_2d = supervised_l1(pred, labels)
    if cfg.mode == "none":
        return total_loss(l_2d, None, None, n_atoms, cfg)
    if teacher is None:
        raise ValueError(f"mode {cfg.mode!r} needs a teacher trace")
    if P is not None:
        student = project(student, P)
    l_m = l_a = l_all = None
    if cfg.mode in ("global_only", "global+local"):
        l_m = loss_global(student, teacher, cfg.layer_scope)
    if cfg.mode in ("local_only", "global+local"):
        l_a = loss_local(student, teacher, mask, cfg.layer_scope, cfg.local_reduction, cfg.include_virtual)
    if cfg.mode == "naive_all":
        l_all = loss_all_tokens(student, teacher, mask, cfg.layer_scope)
    return total_loss(l_2d, l_m, l_a, n_atoms, cfg, l_all)
