"""Pre-training losses and the averaged pair-wise similarity metric."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .errors import BatchTooSmall, ConfigError, NoMaskedPositions, NonPositiveRatio, ShapeMismatch
from .tensor import Tensor, cross_entropy, linear, log, matmul, mul, tsum

TERMS = ("mlm", "nsp", "caption", "pwcl")


@dataclass(frozen=True)
class LossWeights:
    mlm: float = 1.0
    nsp: float = 1.0
    caption: float = 1.0
    pwcl: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    mlm: float
    nsp: float
    caption: float
    pwcl: float | None
    total: float
    aps: float

    def to_dict(self) -> dict:
        return asdict(self)


def _accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float((logits.argmax(axis=-1) == targets).mean())


def mlm_loss(states: Tensor, w: Tensor, b: Tensor, masked_positions,
             target_ids) -> tuple[Tensor, float]:
    """Mean cross-entropy over masked positions only.

    ``masked_positions`` is an ``[M, 2]`` array of ``(batch row, sequence index)``.
    Returns the loss and the masked-token accuracy.
    """
    pos = np.asarray(masked_positions, dtype=np.int64).reshape(-1, 2)
    targets = np.asarray(target_ids, dtype=np.int64).reshape(-1)
    if pos.shape[0] == 0:
        raise NoMaskedPositions("no masked positions in batch")
    if targets.shape[0] != pos.shape[0]:
        raise ShapeMismatch(f"{pos.shape[0]} positions but {targets.shape[0]} targets")
    B, T, D = states.shape
    flat = states.reshape(B * T, D)[pos[:, 0] * T + pos[:, 1]]
    logits = linear(flat, w, b)
    return cross_entropy(logits, targets), _accuracy(logits.data, targets)


def _binary_head_loss(cls_state: Tensor, w: Tensor, b: Tensor, labels) -> tuple[Tensor, float]:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    logits = linear(cls_state, w, b)
    return cross_entropy(logits, labels), _accuracy(logits.data, labels)


def nsp_loss(cls_state: Tensor, w: Tensor, b: Tensor, labels) -> tuple[Tensor, float]:
    """Two-way cross-entropy on the [CLS] state; label 1 means consecutive halves."""
    return _binary_head_loss(cls_state, w, b, labels)


def caption_match_loss(cls_state: Tensor, w: Tensor, b: Tensor, labels) -> tuple[Tensor, float]:
    """Two-way cross-entropy on the [CLS] state; label 1 means ground-truth caption."""
    return _binary_head_loss(cls_state, w, b, labels)


def pair_sums(E: np.ndarray, F: np.ndarray) -> tuple[float, float]:
    """(sum of matched similarities, sum of mismatched similarities)."""
    S = np.asarray(E) @ np.asarray(F).T
    diag = float(np.trace(S))
    return diag, float(S.sum() - diag)


def pwcl_loss(E_prime: Tensor, F_prime: Tensor) -> Tensor:
    """Pair-wise contrastive loss.

    ``-log( sum_i E_i.F_i / sum_{i != j} E_i.F_j )``, a single log of a ratio of
    raw similarity sums. No exponentials and no temperature, so the value is
    negative whenever matched similarities outweigh mismatched ones.

    Raises BatchTooSmall for fewer than two rows and NonPositiveRatio when
    either sum is not strictly positive.
    """
    if E_prime.shape != F_prime.shape or E_prime.ndim != 2:
        raise ShapeMismatch(f"E' {E_prime.shape} vs F' {F_prime.shape}")
    B = E_prime.shape[0]
    if B < 2:
        raise BatchTooSmall(f"need at least 2 pairs, got {B}")
    num_v, den_v = pair_sums(E_prime.data, F_prime.data)
    if not (num_v > 0 and den_v > 0):
        raise NonPositiveRatio(num_v, den_v)
    S = matmul(E_prime, F_prime.transpose(1, 0))
    eye = np.eye(B)
    num = tsum(mul(S, eye))
    den = tsum(mul(S, 1.0 - eye))
    return log(den) - log(num)


def aps(E_prime, F_prime) -> float:
    """Averaged pair-wise similarity: mean of the matched dot products."""
    E = E_prime.data if isinstance(E_prime, Tensor) else np.asarray(E_prime)
    F = F_prime.data if isinstance(F_prime, Tensor) else np.asarray(F_prime)
    if E.shape != F.shape:
        raise ShapeMismatch(f"E' {E.shape} vs F' {F.shape}")
    return float(np.einsum("ij,ij->i", E, F).mean())


def mean_offdiag(E_prime, F_prime) -> float:
    E = E_prime.data if isinstance(E_prime, Tensor) else np.asarray(E_prime)
    F = F_prime.data if isinstance(F_prime, Tensor) else np.asarray(F_prime)
    B = E.shape[0]
    _, off = pair_sums(E, F)
    return off / (B * B - B)


def pretrain_loss(terms: Mapping[str, Tensor | None], weights: LossWeights,
                  aps_value: float) -> tuple[Tensor, LossReport]:
    """Weighted sum of the four objectives.

    A term may be ``None`` only when its weight is zero; it is then reported
    as ``None`` and left out of the total.
    """
    total = None
    values: dict[str, float | None] = {}
    for name in TERMS:
        t = terms.get(name)
        wgt = getattr(weights, name)
        if t is None:
            if wgt != 0:
                raise ValueError(f"missing loss term {name!r} with weight {wgt}")
            values[name] = None
            continue
        values[name] = t.item()
        if wgt == 0:
            continue
        scaled = mul(t, wgt)
        total = scaled if total is None else total + scaled
    if total is None:
        total = Tensor(0.0)
    report = LossReport(mlm=values["mlm"], nsp=values["nsp"], caption=values["caption"],
                        pwcl=values["pwcl"], total=total.item(), aps=float(aps_value))
    return total, report
