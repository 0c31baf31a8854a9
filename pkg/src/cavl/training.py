"""Adam with linear warm-up/decay, pre-training and fine-tuning loops, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import BinaryIO

import numpy as np

from . import objectives as obj
from .adapters import (
    MODES, ParameterPartition, TaskSpec, build_finetune_model, finetune_forward,
)
from .data import Corpus, clean_inputs, cross_inputs, make_batch
from .errors import (
    BatchTooSmall, CheckpointVersionMismatch, ConfigError, MalformedFile, MissingGradient,
    NonPositiveRatio, TrainingAborted,
)
from .model import ModelConfig, ModelParams, init_params, model_forward
from .tensor import Tape, Tensor, cross_entropy, mul, tsum
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.15


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = -1

    def __post_init__(self):
        if self.warmup_steps < 0:
            object.__setattr__(self, "warmup_steps", round(WARMUP_FRACTION * self.total_steps))
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 < warmup_steps ({self.warmup_steps}) "
                              f"< total_steps ({self.total_steps})")


def lr_schedule(step: int, schedule: Schedule) -> float:
    """Linear ramp 0 -> base_lr over the warm-up, then linear decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w, n = schedule.warmup_steps, schedule.total_steps
    if step <= w:
        return schedule.base_lr * step / w
    return schedule.base_lr * (n - step) / (n - w)


# ---------------------------------------------------------------- Adam

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: OptimState, lr_t: float) -> None:
    """One bias-corrected Adam update of every trainable tensor, in place.

    Frozen tensors are skipped and never get moment buffers.
    """
    names = params.trainable_names()
    for n in names:
        if params[n].grad is None:
            raise MissingGradient(f"no gradient for trainable tensor {n!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in names:
        p = params[n]
        g = p.grad
        if n not in state.m:
            state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"CAVLCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    optim: OptimState | None
    config: dict
    seed: int

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])


def _write_name(fh: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)) + raw)


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise MalformedFile(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_name(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read(fh, 4))
    return _read(fh, n).decode("utf-8")


def save_checkpoint(path, params: ModelParams, optim: OptimState | None, config: dict,
                    seed: int) -> None:
    """Write a checkpoint.

    Layout: magic ``CAVLCKPT``, version u32, config length u64 + UTF-8 JSON
    (sorted keys), seed u64, tensor count u32, then per tensor: name (u32
    length + UTF-8), frozen flag u8, tensor record. Then an optimizer flag u8;
    when set: step u64, lr/beta1/beta2/eps as f64, entry count u32, and per
    entry a name followed by the first- and second-moment tensor records.
    """
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<QI", seed, len(params)))
        for name, t in params.items():
            _write_name(fh, name)
            fh.write(struct.pack("<B", int(name in params.frozen)))
            write_tensor(fh, t.data)
        if optim is None:
            fh.write(b"\x00")
            return
        fh.write(b"\x01" + struct.pack("<Q4dI", optim.t, optim.lr, optim.beta1, optim.beta2,
                                       optim.eps, len(optim.m)))
        for name in optim.m:
            _write_name(fh, name)
            write_tensor(fh, optim.m[name])
            write_tensor(fh, optim.v[name])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read(fh, 8) != CHECKPOINT_MAGIC:
            raise MalformedFile("not a checkpoint file (bad magic)")
        version, blob_len = struct.unpack("<IQ", _read(fh, 12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        try:
            config = json.loads(_read(fh, blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedFile(f"bad config blob: {exc}") from exc
        seed, count = struct.unpack("<QI", _read(fh, 12))
        tensors, frozen = {}, set()
        for _ in range(count):
            name = _read_name(fh)
            (flag,) = struct.unpack("<B", _read(fh, 1))
            tensors[name] = Tensor(read_tensor(fh))
            if flag:
                frozen.add(name)
        params = ModelParams(tensors, frozen)
        params.sync_requires_grad()
        optim = None
        if _read(fh, 1) == b"\x01":
            t, lr, b1, b2, eps, n = struct.unpack("<Q4dI", _read(fh, 44))
            optim = OptimState(lr, b1, b2, eps, t)
            for _ in range(n):
                name = _read_name(fh)
                optim.m[name] = read_tensor(fh)
                optim.v[name] = read_tensor(fh)
        if fh.read(1):
            raise MalformedFile("trailing bytes after checkpoint")
    return Checkpoint(params, optim, config, seed)


# ---------------------------------------------------------------- pre-training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_rate: float = 0.15
    max_retries: int = 3
    weights: obj.LossWeights = obj.LossWeights()

    def __post_init__(self):
        if self.batch_size < 2:
            raise BatchTooSmall("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], obj.LossWeights):
            w = d["weights"]
            extra = set(w) - set(obj.TERMS)
            if extra:
                raise ConfigError(f"unknown loss weight keys: {sorted(extra)}")
            d["weights"] = obj.LossWeights(**w)
        return cls(**d)


def pretrain_forward(params: ModelParams, cfg: ModelConfig, batch,
                     weights: obj.LossWeights) -> tuple[Tensor, obj.LossReport]:
    """Forward pass plus weighted objective for one pre-training batch.

    The contrastive term and APS use only the rows whose caption is the
    ground truth for the image, i.e. the true pairs.
    """
    out = model_forward(params, cfg, batch.inputs)
    terms: dict[str, Tensor | None] = {}
    terms["mlm"], _ = obj.mlm_loss(out.states, params["head.mlm.w"], params["head.mlm.b"],
                                   batch.mlm_positions, batch.mlm_targets)
    cls_state = out.cls_state
    terms["nsp"], _ = obj.nsp_loss(cls_state, params["head.nsp.w"], params["head.nsp.b"],
                                   batch.nsp_labels)
    terms["caption"], _ = obj.caption_match_loss(cls_state, params["head.cap.w"],
                                                 params["head.cap.b"], batch.caption_labels)
    rows = batch.matched_rows
    if rows.size < 2:
        raise BatchTooSmall(f"only {rows.size} ground-truth pairs in batch")
    E, F = out.E_prime[rows], out.F_prime[rows]
    if weights.pwcl > 0:
        terms["pwcl"] = obj.pwcl_loss(E, F)
    else:
        terms["pwcl"] = None
    total, report = obj.pretrain_loss(terms, weights, obj.aps(E, F))
    if report.pwcl is None:
        num, den = obj.pair_sums(E.data, F.data)
        if num > 0 and den > 0:
            report.pwcl = float(np.log(den) - np.log(num))
    return total, report


def _disabled_heads(weights: obj.LossWeights) -> set[str]:
    out = set()
    for term, head in (("mlm", "mlm"), ("nsp", "nsp"), ("caption", "cap")):
        if getattr(weights, term) == 0:
            out |= {f"head.{head}.w", f"head.{head}.b"}
    return out


@dataclass
class PretrainResult:
    params: ModelParams
    optim: OptimState
    records: list[dict]
    config: dict
    seed: int


def run_config_blob(model_cfg: ModelConfig, train_cfg: TrainConfig, extra: dict | None = None) -> dict:
    blob = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    if extra:
        blob.update(extra)
    return blob


def pretrain(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus, seed: int,
             eval_fn=None, params: ModelParams | None = None) -> PretrainResult:
    """Pre-train on ``corpus``; returns parameters, optimizer state and metric records.

    ``eval_fn(params, epoch)`` may return a dict appended as an eval record at
    the end of every epoch. A batch whose contrastive ratio is undefined is
    redrawn up to ``max_retries`` times before the run aborts.
    """
    B = train_cfg.batch_size
    n = len(corpus)
    if n < B:
        raise BatchTooSmall(f"corpus of {n} samples cannot fill a batch of {B}")
    steps_per_epoch = n // B
    schedule = Schedule(train_cfg.base_lr, train_cfg.epochs * steps_per_epoch)
    if params is None:
        params = init_params(model_cfg, seed)
    params.freeze(_disabled_heads(train_cfg.weights))
    optim = OptimState(train_cfg.base_lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    records: list[dict] = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        for bi in range(steps_per_epoch):
            step += 1
            idx = perm[bi * B:(bi + 1) * B]
            failures = []
            for attempt in range(train_cfg.max_retries + 1):
                rng = np.random.default_rng([seed, 2, step, attempt])
                if attempt:
                    idx = rng.choice(n, size=B, replace=False)
                batch = make_batch(corpus, idx, rng, model_cfg.vocab_size, train_cfg.mask_rate)
                params.zero_grad()
                try:
                    with Tape() as tape:
                        total, report = pretrain_forward(params, model_cfg, batch,
                                                         train_cfg.weights)
                except (NonPositiveRatio, BatchTooSmall) as exc:
                    failures.append(str(exc))
                    log.info("step %d attempt %d redrawn: %s", step, attempt, exc)
                    continue
                break
            else:
                raise TrainingAborted(f"step {step} (epoch {epoch}): no valid batch after "
                                      f"{train_cfg.max_retries} retries: " + "; ".join(failures))
            tape.backward(total)
            lr_t = lr_schedule(step, schedule)
            adam_step(params, optim, lr_t)
            rec = {"kind": "step", "step": step, "epoch": epoch, "lr": lr_t,
                   **report.to_dict()}
            records.append(rec)
        if eval_fn is not None:
            ev = eval_fn(params, epoch)
            if ev:
                records.append({"kind": "eval", "step": step, "epoch": epoch, **ev})
    params.freeze(())
    blob = run_config_blob(model_cfg, train_cfg)
    return PretrainResult(params, optim, records, blob, seed)


# ---------------------------------------------------------------- fine-tuning

@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 16
    epochs: int = 10
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bottleneck: int = 8

    def __post_init__(self):
        if self.batch_size < 2:
            raise BatchTooSmall("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown finetune config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FinetuneResult:
    params: ModelParams
    optim: OptimState
    partition: ParameterPartition
    records: list[dict]
    config: dict
    seed: int


def task_loss(params: ModelParams, cfg: ModelConfig, mode: str, task: TaskSpec,
              corpus: Corpus, idx: np.ndarray) -> tuple[Tensor, float]:
    """Loss and accuracy of one fine-tuning batch.

    Retrieval: every caption in the batch is paired with every image, and a
    softmax over the scaled in-sequence cosines must pick the true image.
    Classification: cross-entropy of the latent class from the [CLS] state.
    """
    B = idx.size
    if task.kind == "retrieval":
        tt, jj = np.meshgrid(idx, idx, indexing="ij")
        out = finetune_forward(params, cfg, mode, task,
                               cross_inputs(corpus, tt.ravel(), jj.ravel()))
        scores = tsum(mul(out.E, out.F), axis=1).reshape(B, B)
        logits = mul(scores, task.scale)
        targets = np.arange(B)
    else:
        out = finetune_forward(params, cfg, mode, task, clean_inputs(corpus, idx))
        logits = out.logits
        targets = corpus.classes[idx]
    loss = cross_entropy(logits, targets)
    acc = float((logits.data.argmax(axis=1) == targets).mean())
    return loss, acc


def finetune_config_blob(model_cfg: ModelConfig, ft_cfg: FinetuneConfig, mode: str,
                         task: TaskSpec) -> dict:
    return {"model": model_cfg.to_dict(),
            "finetune": {"mode": mode, "task": task.to_dict(), **ft_cfg.to_dict()}}


def finetune(checkpoint: Checkpoint, mode: str, task: TaskSpec, corpus: Corpus, seed: int,
             ft_cfg: FinetuneConfig = FinetuneConfig(), eval_fn=None) -> FinetuneResult:
    """Fine-tune a pre-trained checkpoint with the given freeze ``mode``.

    Only tensors in the partition's trainable set are updated or get optimizer
    state. ``eval_fn(params, epoch)`` may add an eval record per epoch.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = checkpoint.model_config
    params, partition = build_finetune_model(checkpoint.params, cfg, mode, task,
                                             ft_cfg.bottleneck, seed)
    B = ft_cfg.batch_size
    n = len(corpus)
    if n < B:
        raise BatchTooSmall(f"corpus of {n} samples cannot fill a batch of {B}")
    steps_per_epoch = n // B
    schedule = Schedule(ft_cfg.base_lr, ft_cfg.epochs * steps_per_epoch)
    optim = OptimState(ft_cfg.base_lr, ft_cfg.beta1, ft_cfg.beta2, ft_cfg.adam_eps)
    records: list[dict] = []
    step = 0
    for epoch in range(1, ft_cfg.epochs + 1):
        perm = np.random.default_rng([seed, 3, epoch]).permutation(n)
        for bi in range(steps_per_epoch):
            step += 1
            idx = perm[bi * B:(bi + 1) * B]
            params.zero_grad()
            with Tape() as tape:
                loss, acc = task_loss(params, cfg, mode, task, corpus, idx)
            tape.backward(loss)
            lr_t = lr_schedule(step, schedule)
            adam_step(params, optim, lr_t)
            records.append({"kind": "step", "step": step, "epoch": epoch, "lr": lr_t,
                            "task_loss": loss.item(), "task_acc": acc})
        if eval_fn is not None:
            ev = eval_fn(params, epoch)
            if ev:
                records.append({"kind": "eval", "step": step, "epoch": epoch, **ev})
    blob = finetune_config_blob(cfg, ft_cfg, mode, task)
    return FinetuneResult(params, optim, partition, records, blob, seed)
