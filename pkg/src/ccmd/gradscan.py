"""How the virtual-token gradient scales with molecule size.

For a fixed random student and a noise-perturbed copy acting as teacher, the
summed atom distillation loss is back-propagated and the norm of the gradient
at each layer's virtual token is recorded.  A log-log fit of norm against atom
count gives the empirical growth exponent per architecture.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .backbone import ModelConfig, forward, init_params, predict
from .distill import coordinating_weight, loss_local
from .moldata import Molecule, collate, gen_synthetic

DEFAULT_N = (8, 16, 32, 64, 128)


def fit_loglog(points) -> tuple[float, float, float]:
    """OLS of ``ln value`` on ``ln N``; returns (slope, intercept, R^2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n, y = pts[:, 0], pts[:, 1]
    if (y <= 0).any() or (n <= 0).any():
        raise ValueError("log-log fit needs positive N and values")
    if len(np.unique(n)) < 2:
        raise ValueError("log-log fit needs at least two distinct N")
    x, ly = np.log(n), np.log(y)
    xm, ym = x.mean(), ly.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = ((x - xm) * (ly - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_res = ((ly - (intercept + slope * x)) ** 2).sum()
    ss_tot = ((ly - ym) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def perturbed(params: dict[str, np.ndarray], sigma: float, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, sigma, size=v.shape) for k, v in sorted(params.items())}


def virtual_grad_norms(params, teacher_params, cfg: ModelConfig, mols: list[Molecule],
                       weighted: bool = False) -> np.ndarray:
    """Per-molecule, per-layer ``||d L / d X_0^l||``, shape ``[B, L]``.

    ``L`` is the summed atom distillation loss over all layers; with
    ``weighted`` each molecule's term is scaled to the coordinated form
    ``f(N) * mean-token loss``.  Molecules in one call must share N.
    """
    batch = collate(mols)
    _, teacher = predict(teacher_params, batch, cfg)
    tape = ad.Tape()
    P = tape.params(params)
    _, trace = forward(P, batch, cfg)
    per_mol = loss_local(trace, teacher, batch.mask, "all", reduction="sum")
    if weighted:
        w = np.array([coordinating_weight(int(n), cfg.arch) / (n + 1) for n in batch.atom_counts])
        per_mol = ad.mul(per_mol, ad.const(w))
    tape.backward(ad.sum_axis(per_mol))
    return np.stack([np.linalg.norm(tape.grad(x)[:, 0], axis=-1) for x in trace.tokens], axis=1)


def virtual_grad_norm(params, teacher_params, cfg: ModelConfig, mol: Molecule, layer: int) -> float:
    """Gradient norm at the virtual token of ``layer`` (1-based) for one molecule."""
    if not 1 <= layer <= cfg.layers:
        raise ValueError(f"layer {layer} outside [1, {cfg.layers}]")
    return float(virtual_grad_norms(params, teacher_params, cfg, [mol])[0, layer - 1])


def scan_config(arch: str, d_model: int = 64) -> ModelConfig:
    layers = 4 if arch == "transformer" else 3
    return ModelConfig(arch=arch, view="2d", layers=layers, d_model=d_model, heads=4)


@dataclass
class ScanResult:
    arch: str
    rows: list[tuple] = field(default_factory=list)   # (arch, N, seed, layer, norm)
    fit: dict = field(default_factory=dict)
    per_layer: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def cell_means(self, layers=None) -> dict[tuple[int, int], float]:
        """Geometric mean norm per (N, layer)."""
        acc: dict[tuple[int, int], list[float]] = {}
        for _, n, _, l, v in self.rows:
            if layers is None or l in layers:
                acc.setdefault((n, l), []).append(math.log(v))
        return {k: math.exp(sum(v) / len(v)) for k, v in acc.items()}

    def summary(self) -> dict:
        return {"arch": self.arch, "fit": self.fit, "per_layer": self.per_layer,
                "dropped": self.dropped, "config": self.config}


def middle_layers(n_layers: int) -> list[int]:
    mid = list(range(2, n_layers))
    return mid or list(range(1, n_layers + 1))


def scaling_scan(arch: str, n_list=DEFAULT_N, seeds: int = 5, molecules_per_cell: int = 20,
                 cfg: ModelConfig | None = None, sigma: float = 0.1, weighted: bool = False,
                 data_seed: int = 1000) -> ScanResult:
    cfg = cfg or scan_config(arch)
    if cfg.arch != arch:
        cfg = replace(cfg, arch=arch)
    if len(set(n_list)) < 2:
        raise ValueError("scan needs at least two distinct N")
    res = ScanResult(arch, config={"model": cfg.to_dict(), "n_list": list(n_list), "seeds": seeds,
                                   "molecules_per_cell": molecules_per_cell, "sigma": sigma,
                                   "weighted": weighted})
    for seed in range(seeds):
        student = init_params(cfg, seed)
        teacher = perturbed(student, sigma, 10_000 + seed)
        for n in n_list:
            mols = gen_synthetic(molecules_per_cell, (n, n), seed=data_seed + 97 * seed + n).molecules
            norms = virtual_grad_norms(student, teacher, cfg, mols, weighted)
            for per_layer in norms:
                for l, v in enumerate(per_layer, start=1):
                    if not np.isfinite(v) or v <= 0:
                        res.dropped.append((arch, n, seed, l, float(v)))
                        continue
                    res.rows.append((arch, n, seed, l, float(v)))
    mid = middle_layers(cfg.layers)
    means = res.cell_means(mid)
    slope, icpt, r2 = fit_loglog([(n, v) for (n, _), v in sorted(means.items())])
    res.fit = {"slope": slope, "intercept": icpt, "r2": r2, "layers": mid}
    for l in range(1, cfg.layers + 1):
        pts = [(n, v) for (n, ll), v in sorted(res.cell_means([l]).items()) if ll == l]
        if len({p[0] for p in pts}) >= 2:
            s, _, r = fit_loglog(pts)
            res.per_layer[l] = {"slope": s, "r2": r}
    return res


def write_scan(results: list[ScanResult], csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "N", "seed", "layer", "norm"])
        for r in results:
            for row in r.rows:
                w.writerow([row[0], row[1], row[2], row[3], repr(row[4])])
    with open(json_path, "w") as fh:
        json.dump({r.arch + ("_weighted" if r.config.get("weighted") else ""): r.summary()
                   for r in results}, fh, indent=2)
