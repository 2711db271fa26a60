"""Input tokens: atom embeddings plus an adjacent-edge position encoding.

Token ``i >= 1`` is ``atom_embed(id_i) + MLP(sum_j e_ij)`` over bonded
neighbours ``j``, with ``e_ij`` a bond-type embedding (2D view) or the RBF
expansion of the bond length (3D view).  Slot 0 holds a learned virtual token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .moldata import ATOM_VOCAB, BOND_VOCAB, GraphBatch

VIEWS = ("2d", "3d")


@dataclass(frozen=True)
class RbfConfig:
    n_centers: int = 32
    d_max: float = math.sqrt(3.0)

    def __post_init__(self):
        if self.n_centers < 2:
            raise ValueError("RBF needs at least 2 centers")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.d_max, self.n_centers)

    @property
    def gamma(self) -> float:
        # adjacent centers overlap at exp(-1)
        return (self.n_centers - 1) ** 2 / self.d_max ** 2


def rbf_expand(d, cfg: RbfConfig = RbfConfig()) -> np.ndarray:
    """Gaussian responses ``exp(-gamma (d - mu_k)^2)``; shape ``d.shape + (K,)``."""
    d = np.asarray(d, dtype=np.float64)
    if (d < 0).any():
        raise ValueError("distances must be non-negative")
    diff = d[..., None] - cfg.centers
    return np.exp(-cfg.gamma * diff * diff)


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    atom_vocab: int = ATOM_VOCAB
    bond_vocab: int = BOND_VOCAB
    bond_dim: int = 16
    rbf: RbfConfig = field(default_factory=RbfConfig)

    def edge_dim(self, view: str) -> int:
        return self.bond_dim if view == "2d" else self.rbf.n_centers


def uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(cfg: EncoderConfig, view: str, rng: np.random.Generator,
                 prefix: str = "enc.") -> dict[str, np.ndarray]:
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    d, de = cfg.d_model, cfg.edge_dim(view)
    p = {
        "atom_embed": rng.normal(0.0, 0.02, size=(cfg.atom_vocab, d)),
        "ape.w1": uniform_fan_in(rng, de, d),
        "ape.b1": np.zeros(d),
        "ape.w2": uniform_fan_in(rng, d, d),
        "ape.b2": np.zeros(d),
        "virtual": np.zeros(d),
    }
    if view == "2d":
        p["bond_embed"] = rng.normal(0.0, 0.02, size=(cfg.bond_vocab, cfg.bond_dim))
    return {prefix + k: v for k, v in p.items()}


def neighbor_edge_sum(batch: GraphBatch, view: str, cfg: EncoderConfig,
                      bond_embed: ad.Tensor | None = None) -> ad.Tensor:
    """Sum of edge features over bonded neighbours, ``[B, T, edge_dim]``."""
    if view == "3d":
        if not batch.has_coords:
            raise ValueError("3D view requires coordinates")
        feats = rbf_expand(batch.dist, cfg.rbf) * batch.bonded[..., None]
        return ad.const(feats.sum(axis=2))
    onehot = (batch.bond_type[..., None] == np.arange(cfg.bond_vocab)).astype(np.float64)
    counts = ad.const(onehot.sum(axis=2))
    return ad.matmul(counts, bond_embed)


def ape_tokens(P: dict[str, ad.Tensor], batch: GraphBatch, view: str,
               cfg: EncoderConfig, prefix: str = "enc.") -> ad.Tensor:
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    edges = neighbor_edge_sum(batch, view, cfg, P.get(prefix + "bond_embed"))
    h = ad.gelu(ad.matmul(edges, P[prefix + "ape.w1"]) + P[prefix + "ape.b1"])
    ape = ad.matmul(h, P[prefix + "ape.w2"]) + P[prefix + "ape.b2"]
    tokens = ad.embedding_lookup(P[prefix + "atom_embed"], batch.atom_ids) + ape

    b, t = batch.atom_ids.shape
    virtual = ad.const(np.zeros((b, 1, cfg.d_model))) + P[prefix + "virtual"]
    tokens = ad.concat([virtual, ad.slice_(tokens, (slice(None), slice(1, None)))], axis=1)
    mask = np.broadcast_to(batch.mask[..., None], (b, t, cfg.d_model))
    return ad.mul(tokens, ad.const(mask))
