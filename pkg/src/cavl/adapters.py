"""Adapter I / Adapter II fine-tuning blocks, freeze partitions and parameter counts.

Naming scheme for fine-tuned models:

* backbone: ``emb.*``, ``vis.*``, ``layer.{i}.*`` (as in pre-training)
* Adapter I: ``adapter1.short.*`` (one transformer layer over the input
  embeddings) and ``adapter1.out.1.{w,b}`` (2D -> D)
* Adapter II: ``adapter2.{i}.{attn,ffn}.{down,up}.{w,b}``
* task head: ``head.task.{w,b}`` (D -> task output)

Pre-training heads (``head.mlm``, ``head.nsp``, ``head.cap``) are dropped when a
fine-tuning model is built.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidBottleneck, UnknownParameter
from .model import (
    INIT_STD, BatchOutputs, ModelConfig, ModelInputs, ModelParams, attention_bias,
    backbone_names, embed_inputs, init_layer, model_forward, pool, pooling_weights,
    transformer_layer_forward,
)
from .tensor import Tensor, concat, gelu, l2_normalize, linear

MODES = ("full", "adapter1", "adapter2")
TASK_KINDS = ("retrieval", "classification")
ADAPTER2_PREFIX = "adapter2."

_BACKBONE = r"^(emb|vis|layer)\."
_PRETRAIN_HEADS = r"^head\.(mlm|nsp|cap)\."

# first matching rule decides; a name matching no rule is an error
PARTITION_RULES: dict[str, list[tuple[str, bool]]] = {
    "full": [
        (_BACKBONE, True),
        (r"^head\.", True),
        (r"^adapter[12]\.", True),
    ],
    "adapter1": [
        (_BACKBONE, False),
        (_PRETRAIN_HEADS, False),
        (r"^adapter1\.", True),
        (r"^head\.task\.", True),
    ],
    "adapter2": [
        (r"^layer\.\d+\.ln[12]\.[gb]$", True),
        (_BACKBONE, False),
        (_PRETRAIN_HEADS, False),
        (r"^adapter2\.", True),
        (r"^head\.task\.", True),
    ],
}


@dataclass(frozen=True)
class TaskSpec:
    """Fine-tuning target.

    ``retrieval`` maps pooled text and image vectors through a ``D -> D`` head
    and scores pairs by cosine (logits scaled by ``scale``); ``classification``
    maps the [CLS] state to ``n_classes`` logits.
    """
    kind: str = "retrieval"
    n_classes: int = 0
    scale: float = 10.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")

    def out_dim(self, hidden: int) -> int:
        return hidden if self.kind == "retrieval" else self.n_classes

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - {"kind", "n_classes", "scale"}
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- partition

@dataclass(frozen=True)
class ParameterPartition:
    mode: str
    trainable: frozenset[str]
    frozen: frozenset[str]
    trainable_count: int
    frozen_count: int
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    @property
    def total(self) -> int:
        return self.trainable_count + self.frozen_count

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.trainable_count / self.total if self.total else 0.0

    def report(self) -> dict:
        """JSON-ready partition report."""
        per_tensor = [
            {"name": n, "shape": list(s), "numel": int(np.prod(s, dtype=np.int64)),
             "trainable": n in self.trainable}
            for n, s in sorted(self.shapes.items())
        ]
        return {"mode": self.mode, "trainable": self.trainable_count,
                "frozen": self.frozen_count, "reduction_fraction": self.reduction_fraction,
                "per_tensor": per_tensor}


def _rule_for(name: str, mode: str) -> bool:
    for pattern, trainable in PARTITION_RULES[mode]:
        if re.match(pattern, name):
            return trainable
    raise UnknownParameter(f"tensor {name!r} matches no {mode} partition rule")


def partition_parameters(params: ModelParams, mode: str) -> ParameterPartition:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    trainable, frozen = set(), set()
    n_train = n_frozen = 0
    shapes = {}
    for name, t in params.items():
        shapes[name] = tuple(t.shape)
        if _rule_for(name, mode):
            trainable.add(name)
            n_train += t.size
        else:
            frozen.add(name)
            n_frozen += t.size
    return ParameterPartition(mode, frozenset(trainable), frozenset(frozen),
                              n_train, n_frozen, shapes)


def count_parameters(partition: ParameterPartition) -> dict:
    return {"trainable": partition.trainable_count, "frozen": partition.frozen_count,
            "reduction_fraction": partition.reduction_fraction}


def apply_partition(params: ModelParams, partition: ParameterPartition) -> None:
    params.freeze(partition.frozen)


# ---------------------------------------------------------------- blocks

@dataclass
class AdapterIBlocks:
    shortcut: dict[str, Tensor]
    output: dict[str, Tensor]
    head: dict[str, Tensor]

    def tensors(self) -> dict[str, Tensor]:
        return {**self.shortcut, **self.output, **self.head}


@dataclass
class AdapterIIInserts:
    bottleneck: int
    tensors: dict[str, Tensor]

    def per_layer(self, layer: int) -> list[str]:
        """Adapter prefixes in layer ``layer`` (one after attention, one after the FFN)."""
        return sorted({n.rsplit(".", 2)[0] for n in self.tensors
                       if n.startswith(f"{ADAPTER2_PREFIX}{layer}.")})


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_task_head(rng: np.random.Generator, cfg: ModelConfig, task: TaskSpec) -> dict[str, Tensor]:
    """Retrieval heads start as the identity so fine-tuning begins from the backbone geometry."""
    D = cfg.hidden
    if task.kind == "retrieval":
        w = np.eye(D)
    else:
        w = rng.normal(0.0, INIT_STD, size=(D, task.n_classes))
    return {"head.task.w": _param(w), "head.task.b": _param(np.zeros(task.out_dim(D)))}


def init_adapter1_blocks(rng: np.random.Generator, cfg: ModelConfig,
                         task: TaskSpec) -> AdapterIBlocks:
    D = cfg.hidden
    shortcut = init_layer(rng, cfg, "adapter1.short.")
    # the backbone half of the merge starts as the identity, the shortcut half at zero
    w = np.concatenate([np.eye(D), np.zeros((D, D))], axis=0)
    output = {"adapter1.out.1.w": _param(w), "adapter1.out.1.b": _param(np.zeros(D))}
    return AdapterIBlocks(shortcut, output, init_task_head(rng, cfg, task))


def init_adapter2_inserts(rng: np.random.Generator, cfg: ModelConfig, m: int) -> AdapterIIInserts:
    D = cfg.hidden
    if not 1 <= m < D:
        raise InvalidBottleneck(f"bottleneck m={m} must satisfy 1 <= m < {D}")
    out = {}
    for i in range(cfg.layers):
        for site in ("attn", "ffn"):
            pre = f"{ADAPTER2_PREFIX}{i}.{site}."
            out[pre + "down.w"] = _param(rng.normal(0.0, INIT_STD, size=(D, m)))
            out[pre + "down.b"] = _param(np.zeros(m))
            out[pre + "up.w"] = _param(np.zeros((m, D)))
            out[pre + "up.b"] = _param(np.zeros(D))
    return AdapterIIInserts(m, out)


def _backbone_copy(model: ModelParams) -> dict[str, Tensor]:
    return {n: Tensor(model[n].data, True) for n in backbone_names(model)}


def _assemble(tensors: dict[str, Tensor], mode: str) -> tuple[ModelParams, ParameterPartition]:
    params = ModelParams(tensors)
    partition = partition_parameters(params, mode)
    apply_partition(params, partition)
    return params, partition


def build_full(model: ModelParams, cfg: ModelConfig, task: TaskSpec,
               seed: int = 0) -> tuple[ModelParams, ParameterPartition]:
    rng = np.random.default_rng([seed, 11])
    return _assemble({**_backbone_copy(model), **init_task_head(rng, cfg, task)}, "full")


def build_adapter1(model: ModelParams, cfg: ModelConfig, task: TaskSpec,
                   seed: int = 0) -> tuple[ModelParams, ParameterPartition]:
    """Frozen backbone plus a trainable one-layer shortcut, merge block and task head."""
    rng = np.random.default_rng([seed, 12])
    blocks = init_adapter1_blocks(rng, cfg, task)
    return _assemble({**_backbone_copy(model), **blocks.tensors()}, "adapter1")


def build_adapter2(model: ModelParams, cfg: ModelConfig, m: int, task: TaskSpec,
                   seed: int = 0) -> tuple[ModelParams, ParameterPartition]:
    """Frozen attention/FFN weights with two bottleneck adapters per layer.

    Adapters, every LayerNorm and the task head train. Up-projections start at
    zero, so the initial forward pass equals the backbone's.
    """
    rng = np.random.default_rng([seed, 13])
    inserts = init_adapter2_inserts(rng, cfg, m)
    head = init_task_head(rng, cfg, task)
    return _assemble({**_backbone_copy(model), **inserts.tensors, **head}, "adapter2")


def build_finetune_model(model: ModelParams, cfg: ModelConfig, mode: str, task: TaskSpec,
                         bottleneck: int = 8, seed: int = 0):
    if mode == "full":
        return build_full(model, cfg, task, seed)
    if mode == "adapter1":
        return build_adapter1(model, cfg, task, seed)
    if mode == "adapter2":
        return build_adapter2(model, cfg, bottleneck, task, seed)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


# ---------------------------------------------------------------- forward

@dataclass
class FinetuneOutputs:
    backbone: BatchOutputs
    E: Tensor | None = None         # [B, D] task text embedding (retrieval)
    F: Tensor | None = None         # [B, D] task image embedding (retrieval)
    logits: Tensor | None = None    # [B, C] (classification)


def _shortcut_outputs(p: ModelParams, cfg: ModelConfig, inputs: ModelInputs) -> BatchOutputs:
    x = embed_inputs(p, cfg, inputs)
    states = transformer_layer_forward(x, p, "adapter1.short.", cfg.heads,
                                       attention_bias(inputs))
    wt, wv = pooling_weights(inputs)
    return BatchOutputs(states, pool(states, wt), pool(states, wv), inputs.text_len)


def _merge(p: ModelParams, backbone_vec: Tensor, shortcut_vec: Tensor) -> Tensor:
    z = linear(concat([backbone_vec, shortcut_vec], axis=-1),
               p["adapter1.out.1.w"], p["adapter1.out.1.b"])
    return gelu(z)


def _head(p: ModelParams, x: Tensor) -> Tensor:
    return linear(x, p["head.task.w"], p["head.task.b"])


def finetune_forward(p: ModelParams, cfg: ModelConfig, mode: str, task: TaskSpec,
                     inputs: ModelInputs) -> FinetuneOutputs:
    """Task outputs for ``mode``.

    Retrieval embeddings are unit vectors. Adapter I merges the backbone and
    shortcut pooled vectors (or [CLS] states for classification) before the head.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    prefix = ADAPTER2_PREFIX if mode == "adapter2" else None
    out = model_forward(p, cfg, inputs, adapter_prefix=prefix)
    if mode == "adapter1":
        short = _shortcut_outputs(p, cfg, inputs)
        if task.kind == "retrieval":
            E = _merge(p, out.E_prime, short.E_prime)
            F = _merge(p, out.F_prime, short.F_prime)
        else:
            cls = _merge(p, out.cls_state, short.cls_state)
    elif task.kind == "retrieval":
        E, F = out.E_prime, out.F_prime
    else:
        cls = out.cls_state
    if task.kind == "retrieval":
        return FinetuneOutputs(out, E=l2_normalize(_head(p, E)), F=l2_normalize(_head(p, F)))
    return FinetuneOutputs(out, logits=_head(p, cls))


def adapter_param_count(hidden: int, m: int) -> int:
    """Elements in one bottleneck adapter: down (D*m + m) plus up (m*D + D)."""
    return 2 * hidden * m + m + hidden


def layer_param_count(cfg: ModelConfig) -> int:
    D, F = cfg.hidden, cfg.ffn_dim
    return 4 * (D * D + D) + (D * F + F) + (F * D + D) + 4 * D


__all__ = [
    "MODES", "TaskSpec", "ParameterPartition", "AdapterIBlocks", "AdapterIIInserts",
    "partition_parameters", "count_parameters", "build_adapter1", "build_adapter2",
    "build_full", "build_finetune_model", "finetune_forward", "FinetuneOutputs",
    "adapter_param_count", "layer_param_count",
]
