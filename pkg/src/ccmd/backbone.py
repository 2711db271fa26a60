"""Graph transformer and GIN backbones with per-layer traces."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, RbfConfig, ape_tokens, init_encoder, rbf_expand, uniform_fan_in
from .moldata import GraphBatch

ARCHS = ("transformer", "gin")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder + backbone + readout.

    ``view`` selects the input modality: "3d" models also get an all-pairs RBF
    attention bias, "2d" transformers a per-bond-type bias on bonded pairs.
    """
    arch: str = "transformer"
    view: str = "2d"
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    ffn_mult: int = 4
    gin_eps: float = 0.0
    bond_dim: int = 16
    rbf_centers: int = 32
    proj_dim: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.view not in ("2d", "3d"):
            raise ValueError(f"unknown view {self.view!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.arch == "transformer" and self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(d_model=self.d_model, bond_dim=self.bond_dim,
                             rbf=RbfConfig(self.rbf_centers))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerTrace:
    tokens: list[ad.Tensor]                    # X^l, l = 1..L, each [B, T, d]
    attention: list[np.ndarray] | None = None  # W^l, each [B, heads, T, T]
    mask: np.ndarray | None = None             # [B, T]
    atom_counts: np.ndarray | None = None

    @property
    def layers(self) -> int:
        return len(self.tokens)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p = init_encoder(cfg.encoder, cfg.view, rng)
    d = cfg.d_model
    for l in range(cfg.layers):
        pre = f"layer{l}."
        if cfg.arch == "transformer":
            f = cfg.ffn_mult * d
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for w in ("q", "k", "v", "o"):
                p[pre + "w" + w] = uniform_fan_in(rng, d, d)
                p[pre + "b" + w] = np.zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            p[pre + "ffn.w1"], p[pre + "ffn.b1"] = uniform_fan_in(rng, d, f), np.zeros(f)
            p[pre + "ffn.w2"], p[pre + "ffn.b2"] = uniform_fan_in(rng, f, d), np.zeros(d)
        else:
            p[pre + "mlp.w1"], p[pre + "mlp.b1"] = uniform_fan_in(rng, d, d), np.zeros(d)
            p[pre + "mlp.w2"], p[pre + "mlp.b2"] = uniform_fan_in(rng, d, d), np.zeros(d)
    if cfg.arch == "transformer":
        if cfg.view == "3d":
            p["bias.rbf"] = uniform_fan_in(rng, cfg.rbf_centers, cfg.heads)
        else:
            p["bias.bond"] = rng.normal(0.0, 0.02, size=(cfg.encoder.bond_vocab, cfg.heads))
    p["head.w1"], p["head.b1"] = uniform_fan_in(rng, d, d), np.zeros(d)
    p["head.w2"], p["head.b2"] = uniform_fan_in(rng, d, 1), np.zeros(1)
    if cfg.proj_dim is not None:
        p["proj.w"] = np.eye(d, cfg.proj_dim)
    return p


def _check_finite(x: ad.Tensor, layer: int):
    if not np.isfinite(x.value).all():
        raise FloatingPointError(f"non-finite activations in layer {layer}")


def _mask_tokens(x: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    return ad.mul(x, ad.const(np.broadcast_to(mask[..., None], x.shape)))


def readout(P, x_last: ad.Tensor) -> ad.Tensor:
    v = ad.slice_(x_last, (slice(None), 0))
    h = ad.gelu(ad.matmul(v, P["head.w1"]) + P["head.b1"])
    r = ad.matmul(h, P["head.w2"]) + P["head.b2"]
    return ad.reshape(r, (r.shape[0],))


def attention_bias(P, batch: GraphBatch, cfg: ModelConfig) -> ad.Tensor | None:
    """Per-head additive logits ``[B, H, T, T]``."""
    if "bias.rbf" in P:
        pairs = batch.mask[:, :, None] * batch.mask[:, None, :]
        pairs[:, 0, :] = 0.0
        pairs[:, :, 0] = 0.0
        feats = rbf_expand(batch.dist, cfg.encoder.rbf) * pairs[..., None]
        bias = ad.matmul(ad.const(feats), P["bias.rbf"])
    elif "bias.bond" in P:
        nb = cfg.encoder.bond_vocab
        onehot = (batch.bond_type[..., None] == np.arange(nb)).astype(np.float64)
        bias = ad.matmul(ad.const(onehot), P["bias.bond"])
    else:
        return None
    return ad.transpose(bias, (0, 3, 1, 2))


def transformer_forward(P, tokens: ad.Tensor, mask: np.ndarray, cfg: ModelConfig,
                        bias: ad.Tensor | None = None) -> tuple[ad.Tensor, LayerTrace]:
    b, t, d = tokens.shape
    h, dh = cfg.heads, d // cfg.heads
    if bias is not None and bias.shape != (b, h, t, t):
        raise ad.ShapeError(f"attention bias shape {bias.shape} != {(b, h, t, t)}")
    key_mask = mask.astype(bool)[:, None, None, :]
    x = tokens
    trace = LayerTrace([], [], mask)

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

    for l in range(cfg.layers):
        pre = f"layer{l}."
        z = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"], cfg.ln_eps)
        q = heads(ad.matmul(z, P[pre + "wq"]) + P[pre + "bq"])
        k = heads(ad.matmul(z, P[pre + "wk"]) + P[pre + "bk"])
        v = heads(ad.matmul(z, P[pre + "wv"]) + P[pre + "bv"])
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if bias is not None:
            logits = logits + bias
        att = ad.softmax_row(logits, key_mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = x + (ad.matmul(ctx, P[pre + "wo"]) + P[pre + "bo"])
        z = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"], cfg.ln_eps)
        f = ad.gelu(ad.matmul(z, P[pre + "ffn.w1"]) + P[pre + "ffn.b1"])
        x = x + (ad.matmul(f, P[pre + "ffn.w2"]) + P[pre + "ffn.b2"])
        x = _mask_tokens(x, mask)
        _check_finite(x, l + 1)
        trace.tokens.append(x)
        trace.attention.append(att.value)
    return readout(P, x), trace


def gin_forward(P, tokens: ad.Tensor, adjacency: np.ndarray, mask: np.ndarray,
                cfg: ModelConfig) -> tuple[ad.Tensor, LayerTrace]:
    """``X_i <- MLP((1 + eps) X_i + sum_{j in nbrs(i)} X_j)``, virtual token linked to all atoms."""
    adj = ad.const(adjacency)
    x = tokens
    trace = LayerTrace([], None, mask)
    for l in range(cfg.layers):
        pre = f"layer{l}."
        agg = ad.scale(x, 1.0 + cfg.gin_eps) + ad.matmul(adj, x)
        hid = ad.relu(ad.matmul(agg, P[pre + "mlp.w1"]) + P[pre + "mlp.b1"])
        x = ad.matmul(hid, P[pre + "mlp.w2"]) + P[pre + "mlp.b2"]
        x = _mask_tokens(x, mask)
        _check_finite(x, l + 1)
        trace.tokens.append(x)
    return readout(P, x), trace


def forward(P: dict[str, ad.Tensor], batch: GraphBatch, cfg: ModelConfig) -> tuple[ad.Tensor, LayerTrace]:
    """Encode ``batch`` in the model's view and run the backbone; returns ``(R [B], trace)``."""
    tokens = ape_tokens(P, batch, cfg.view, cfg.encoder)
    if cfg.arch == "transformer":
        r, trace = transformer_forward(P, tokens, batch.mask, cfg, attention_bias(P, batch, cfg))
    else:
        r, trace = gin_forward(P, tokens, batch.adjacency(virtual=True), batch.mask, cfg)
    trace.atom_counts = batch.atom_counts
    return r, trace


def as_consts(params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: ad.const(v) for k, v in params.items()}


def predict(params: dict[str, np.ndarray], batch: GraphBatch, cfg: ModelConfig) -> tuple[np.ndarray, LayerTrace]:
    r, trace = forward(as_consts(params), batch, cfg)
    return r.value, trace


def dump_attention(trace: LayerTrace, path, sample: int = 0) -> list[Path]:
    """Write one CSV per (layer, head) of molecule ``sample``; row 0 is the virtual token."""
    if trace.attention is None:
        raise ValueError("trace has no attention maps (GIN backbone)")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for l, att in enumerate(trace.attention, start=1):
        for h in range(att.shape[1]):
            f = out / f"attn_layer{l}_head{h}.csv"
            with open(f, "w", newline="") as fh:
                w = csv.writer(fh)
                for row in att[sample, h]:
                    w.writerow([repr(float(v)) for v in row])
            files.append(f)
    return files


def load_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
