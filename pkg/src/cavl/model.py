"""Single-stream vision-language encoder.

One sequence per sample: ``[CLS] text [SEP] roi_1 ... roi_K``. Text positions
carry segment 0, ROI positions segment 1. Pooled embeddings summarise the
final states over the text subwords (``E'``) and over the ROIs (``F'``) as
unit vectors whose pairwise cosines are bounded below by a positive floor
(see ``pool``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ConfigError, LengthMismatch, TooManyRois
from .tensor import (
    Tensor, add, concat, embedding_lookup, gelu, l2_normalize, layer_norm, linear,
    matmul, relu, softmax,
)

ROI_CAP = 100
INIT_STD = 0.02
MASK_LOGIT = -1e9
TEXT_SEGMENT, VISUAL_SEGMENT = 0, 1
ANCHOR_WEIGHT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1000
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    max_text_len: int = 32
    max_rois: int = 100
    roi_feature_dim: int = 32
    segment_count: int = 2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_rois > ROI_CAP:
            raise ConfigError(f"max_rois={self.max_rois} exceeds the cap of {ROI_CAP}")
        if self.segment_count != 2:
            raise ConfigError("segment_count must be 2 (text, visual)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class ModelParams:
    """Ordered, named parameter tensors with a frozen flag per name."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, frozen=()):
        self.tensors: dict[str, Tensor] = dict(tensors or {})
        self.frozen: set[str] = set(frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self.tensors[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def freeze(self, names) -> None:
        self.frozen = set(names)
        self.sync_requires_grad()

    def sync_requires_grad(self) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = name not in self.frozen

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data, t.requires_grad) for n, t in self.items()},
                           self.frozen)

    def subset(self, names) -> "ModelParams":
        names = list(names)
        return ModelParams({n: self.tensors[n] for n in names},
                           self.frozen & set(names))


# ---------------------------------------------------------------- init

def _normal(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_layer(rng: np.random.Generator, cfg: ModelConfig, prefix: str) -> dict[str, Tensor]:
    D, F = cfg.hidden, cfg.ffn_dim
    out: dict[str, Tensor] = {}
    for m in "qkvo":
        out[f"{prefix}attn.{m}.w"] = _normal(rng, D, D)
        out[f"{prefix}attn.{m}.b"] = _zeros(D)
    out[f"{prefix}ln1.g"] = _ones(D)
    out[f"{prefix}ln1.b"] = _zeros(D)
    out[f"{prefix}ffn.1.w"] = _normal(rng, D, F)
    out[f"{prefix}ffn.1.b"] = _zeros(F)
    out[f"{prefix}ffn.2.w"] = _normal(rng, F, D)
    out[f"{prefix}ffn.2.b"] = _zeros(D)
    out[f"{prefix}ln2.g"] = _ones(D)
    out[f"{prefix}ln2.b"] = _zeros(D)
    return out


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D = cfg.hidden
    p = {
        "emb.tok": _normal(rng, cfg.vocab_size, D),
        "emb.seg": _normal(rng, cfg.segment_count, D),
        "emb.pos_t": _normal(rng, cfg.max_text_len, D),
        "vis.proj.w": _normal(rng, cfg.roi_feature_dim, D),
        "vis.proj.b": _zeros(D),
        "vis.pos_v": _normal(rng, cfg.max_rois, D),
    }
    for i in range(cfg.layers):
        p.update(init_layer(rng, cfg, f"layer.{i}."))
    return p


def init_pretrain_heads(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D = cfg.hidden
    return {
        "head.mlm.w": _normal(rng, D, cfg.vocab_size),
        "head.mlm.b": _zeros(cfg.vocab_size),
        "head.nsp.w": _normal(rng, D, 2),
        "head.nsp.b": _zeros(2),
        "head.cap.w": _normal(rng, D, 2),
        "head.cap.b": _zeros(2),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = init_backbone(cfg, rng)
    tensors.update(init_pretrain_heads(cfg, rng))
    return ModelParams(tensors)


BACKBONE_PREFIXES = ("emb.", "vis.", "layer.")


def backbone_names(params: ModelParams) -> list[str]:
    return [n for n in params if n.startswith(BACKBONE_PREFIXES)]


# ---------------------------------------------------------------- embeddings

@dataclass
class LinguisticEmbeddings:
    token: Tensor
    segment: Tensor
    position: Tensor

    @classmethod
    def from_params(cls, p: ModelParams) -> "LinguisticEmbeddings":
        return cls(p["emb.tok"], p["emb.seg"], p["emb.pos_t"])


@dataclass
class VisualEmbeddings:
    proj_w: Tensor
    proj_b: Tensor
    segment: Tensor
    position: Tensor

    @classmethod
    def from_params(cls, p: ModelParams) -> "VisualEmbeddings":
        # segment table is shared with the text side
        return cls(p["vis.proj.w"], p["vis.proj.b"], p["emb.seg"], p["vis.pos_v"])


def embed_linguistic(tokens, segments, positions, tables: LinguisticEmbeddings) -> Tensor:
    tokens, segments, positions = (np.asarray(a, dtype=np.int64)
                                   for a in (tokens, segments, positions))
    if not tokens.shape == segments.shape == positions.shape:
        raise LengthMismatch(f"tokens {tokens.shape}, segments {segments.shape}, "
                             f"positions {positions.shape}")
    out = embedding_lookup(tables.token, tokens)
    out = add(out, embedding_lookup(tables.segment, segments))
    return add(out, embedding_lookup(tables.position, positions))


def embed_visual(rois, segments, positions, tables: VisualEmbeddings) -> Tensor:
    rois = rois if isinstance(rois, Tensor) else Tensor(rois)
    segments = np.asarray(segments, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    k = rois.shape[-2]
    k_max = tables.position.shape[0]
    if k > k_max:
        raise TooManyRois(f"{k} ROIs exceed the configured maximum of {k_max}")
    if segments.shape != rois.shape[:-1] or positions.shape != rois.shape[:-1]:
        raise LengthMismatch(f"rois {rois.shape[:-1]} vs segments {segments.shape} / "
                             f"positions {positions.shape}")
    out = linear(rois, tables.proj_w, tables.proj_b)
    out = add(out, embedding_lookup(tables.segment, segments))
    return add(out, embedding_lookup(tables.position, positions))


# ---------------------------------------------------------------- encoder

def attention(x: Tensor, p: ModelParams, prefix: str, heads: int,
              bias: np.ndarray | None = None) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def proj(m):
        return linear(x, p[f"{prefix}attn.{m}.w"], p[f"{prefix}attn.{m}.b"])

    q = proj("q").reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    k = proj("k").reshape(B, T, heads, dh).transpose(0, 2, 3, 1)
    v = proj("v").reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(q, k) * (1.0 / np.sqrt(dh))
    if bias is not None:
        scores = add(scores, bias)
    ctx = matmul(softmax(scores), v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(ctx, p[f"{prefix}attn.o.w"], p[f"{prefix}attn.o.b"])


def bottleneck(h: Tensor, p: ModelParams, prefix: str) -> Tensor:
    """``up(gelu(down(h)))`` for an adapter stored under ``prefix``."""
    z = gelu(linear(h, p[f"{prefix}down.w"], p[f"{prefix}down.b"]))
    return linear(z, p[f"{prefix}up.w"], p[f"{prefix}up.b"])


def transformer_layer_forward(x: Tensor, p: ModelParams, prefix: str, heads: int,
                              bias: np.ndarray | None = None,
                              adapter_prefix: str | None = None) -> Tensor:
    """Post-norm layer: LN(x + MHA(x)), then LN(h + FFN(h)).

    With ``adapter_prefix`` each sub-layer output ``s`` becomes
    ``s + up(gelu(down(s)))`` before its residual add and LayerNorm.
    Accepts ``[T, D]`` or ``[B, T, D]``.
    """
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape(1, *x.shape)
    a = attention(x, p, prefix, heads, bias)
    if adapter_prefix is not None:
        a = add(a, bottleneck(a, p, f"{adapter_prefix}attn."))
    h = layer_norm(add(x, a), p[f"{prefix}ln1.g"], p[f"{prefix}ln1.b"])
    f = linear(gelu(linear(h, p[f"{prefix}ffn.1.w"], p[f"{prefix}ffn.1.b"])),
               p[f"{prefix}ffn.2.w"], p[f"{prefix}ffn.2.b"])
    if adapter_prefix is not None:
        f = add(f, bottleneck(f, p, f"{adapter_prefix}ffn."))
    out = layer_norm(add(h, f), p[f"{prefix}ln2.g"], p[f"{prefix}ln2.b"])
    return out.reshape(*out.shape[1:]) if unbatched else out


@dataclass
class ModelInputs:
    """Padded, embedding-ready ids for a batch of single-stream sequences.

    ``text_ids`` already contains ``[CLS]`` and ``[SEP]``. ``text_pool`` marks the
    subword positions averaged into ``E'`` (specials and pads excluded).
    """
    text_ids: np.ndarray    # [B, Nt] int
    text_mask: np.ndarray   # [B, Nt] bool
    text_pool: np.ndarray   # [B, Nt] bool
    rois: np.ndarray        # [B, K, d_v] float
    roi_mask: np.ndarray    # [B, K] bool

    @property
    def batch_size(self) -> int:
        return self.text_ids.shape[0]

    @property
    def text_len(self) -> int:
        return self.text_ids.shape[1]

    def take(self, idx) -> "ModelInputs":
        idx = np.asarray(idx)
        return ModelInputs(self.text_ids[idx], self.text_mask[idx], self.text_pool[idx],
                           self.rois[idx], self.roi_mask[idx])


@dataclass
class BatchOutputs:
    states: Tensor      # [B, T, D]
    E_prime: Tensor     # [B, D]
    F_prime: Tensor     # [B, D]
    text_len: int

    @property
    def cls_state(self) -> Tensor:
        return self.states[:, 0, :]


def attention_bias(inputs: ModelInputs) -> np.ndarray:
    valid = np.concatenate([inputs.text_mask, inputs.roi_mask], axis=1)
    return np.where(valid, 0.0, MASK_LOGIT)[:, None, None, :]


def embed_inputs(p: ModelParams, cfg: ModelConfig, inputs: ModelInputs) -> Tensor:
    B, nt = inputs.text_ids.shape
    k = inputs.rois.shape[1]
    if nt > cfg.max_text_len:
        raise LengthMismatch(f"text length {nt} exceeds max_text_len={cfg.max_text_len}")
    text = embed_linguistic(inputs.text_ids, np.full((B, nt), TEXT_SEGMENT),
                            np.broadcast_to(np.arange(nt), (B, nt)),
                            LinguisticEmbeddings.from_params(p))
    vis = embed_visual(Tensor._wrap(np.asarray(inputs.rois, dtype=np.float64)),
                       np.full((B, k), VISUAL_SEGMENT),
                       np.broadcast_to(np.arange(k), (B, k)),
                       VisualEmbeddings.from_params(p))
    return concat([text, vis], axis=1)


def pooling_weights(inputs: ModelInputs) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``[B, 1, T]`` weights for the text and visual means."""
    B, nt = inputs.text_ids.shape
    k = inputs.rois.shape[1]
    zt, zv = np.zeros((B, k)), np.zeros((B, nt))
    wt = np.concatenate([inputs.text_pool.astype(float), zt], axis=1)
    wv = np.concatenate([zv, inputs.roi_mask.astype(float)], axis=1)
    wt /= wt.sum(axis=1, keepdims=True)
    wv /= wv.sum(axis=1, keepdims=True)
    return wt[:, None, :], wv[:, None, :]


def pool(states: Tensor, weights: np.ndarray, anchor: float = ANCHOR_WEIGHT) -> Tensor:
    """Weighted mean of ``states``, mapped to a unit vector with a positive floor.

    The mean is rectified and normalised into a non-negative code, a uniform
    vector of norm ``anchor`` is added, and the sum is normalised again. Any two
    pooled vectors then have cosine >= anchor**2 / (1 + anchor)**2.
    """
    B, _, D = states.shape
    m = matmul(weights, states).reshape(B, D)
    code = l2_normalize(relu(m), eps=1e-24)
    return l2_normalize(add(code, anchor / np.sqrt(D)))


def run_layers(x: Tensor, p: ModelParams, cfg: ModelConfig, bias: np.ndarray,
               adapter_prefix: str | None = None) -> Tensor:
    for i in range(cfg.layers):
        ap = None if adapter_prefix is None else f"{adapter_prefix}{i}."
        x = transformer_layer_forward(x, p, f"layer.{i}.", cfg.heads, bias, ap)
    return x


def model_forward(p: ModelParams, cfg: ModelConfig, inputs: ModelInputs,
                  adapter_prefix: str | None = None) -> BatchOutputs:
    x = embed_inputs(p, cfg, inputs)
    states = run_layers(x, p, cfg, attention_bias(inputs), adapter_prefix)
    wt, wv = pooling_weights(inputs)
    return BatchOutputs(states, pool(states, wt), pool(states, wv), inputs.text_len)
