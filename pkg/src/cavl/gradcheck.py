"""Finite-difference audit of every differentiable op and of the end-to-end losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adapters import TaskSpec, build_adapter1, build_adapter2
from .data import CorpusConfig, generate_synthetic_corpus, make_batch
from .model import ModelConfig, attention, bottleneck, init_params, pool, transformer_layer_forward
from .objectives import LossWeights, pwcl_loss
from .tensor import Tensor, grad_check

OP_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rand(rng, *shape, low=None):
    a = rng.normal(size=shape)
    if low is not None:
        # keep magnitudes away from kinks and the log singularity
        a = np.sign(a) * (low + np.abs(a))
    return Tensor(a, requires_grad=True)


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Contract an arbitrary-shaped output with fixed random weights to a scalar."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.tsum(T.mul(out, w))


def _op_cases() -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(0)
    cases: dict[str, Callable[[], float]] = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("add")
    def _():
        a, b = _rand(rng, 3, 4), _rand(rng, 4)
        return grad_check(lambda xs: _weighted(T.add(*xs)), [a, b])

    @case("sub")
    def _():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 1)
        return grad_check(lambda xs: _weighted(T.sub(*xs)), [a, b])

    @case("mul")
    def _():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 3, 4)
        return grad_check(lambda xs: _weighted(T.mul(*xs)), [a, b])

    @case("log")
    def _():
        a = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
        return grad_check(lambda x: _weighted(T.log(x)), a)

    @case("relu")
    def _():
        a = _rand(rng, 3, 5, low=0.1)
        return grad_check(lambda x: _weighted(T.relu(x)), a)

    @case("gelu")
    def _():
        return grad_check(lambda x: _weighted(T.gelu(x)), _rand(rng, 4, 5))

    @case("matmul")
    def _():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        return grad_check(lambda xs: _weighted(T.matmul(*xs)), [a, b])

    @case("reshape")
    def _():
        return grad_check(lambda x: _weighted(T.reshape(x, (6, 2))), _rand(rng, 3, 4))

    @case("transpose")
    def _():
        return grad_check(lambda x: _weighted(T.transpose(x, (2, 0, 1))), _rand(rng, 2, 3, 4))

    @case("getitem")
    def _():
        idx = np.array([2, 0, 2, 1])
        return grad_check(lambda x: _weighted(T.getitem(x, idx)), _rand(rng, 3, 4))

    @case("concat")
    def _():
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 5)
        return grad_check(lambda xs: _weighted(T.concat(xs, axis=1)), [a, b])

    @case("embedding_lookup")
    def _():
        ids = np.array([[0, 3, 3], [1, 0, 2]])
        return grad_check(lambda x: _weighted(T.embedding_lookup(x, ids)), _rand(rng, 4, 5))

    @case("sum")
    def _():
        return grad_check(lambda x: _weighted(T.tsum(x, axis=1)), _rand(rng, 3, 4))

    @case("mean")
    def _():
        return grad_check(lambda x: _weighted(T.mean(x, axis=0, keepdims=True)), _rand(rng, 3, 4))

    @case("softmax")
    def _():
        return grad_check(lambda x: _weighted(T.softmax(x)), _rand(rng, 3, 6))

    @case("layer_norm")
    def _():
        x, g, b = _rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)
        return grad_check(lambda xs: _weighted(T.layer_norm(*xs)), [x, g, b])

    @case("l2_normalize")
    def _():
        return grad_check(lambda x: _weighted(T.l2_normalize(x)), _rand(rng, 3, 5))

    @case("cross_entropy")
    def _():
        targets = np.array([0, 2, 1])
        return grad_check(lambda x: T.cross_entropy(x, targets), _rand(rng, 3, 4))

    @case("linear")
    def _():
        x, w, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
        return grad_check(lambda xs: _weighted(T.linear(*xs)), [x, w, b])

    return cases


def _tiny_setup(seed: int = 0):
    cfg = ModelConfig(vocab_size=64, hidden=8, layers=1, heads=2, ffn_dim=16,
                      max_text_len=16, max_rois=4, roi_feature_dim=4)
    ccfg = CorpusConfig(vocab_size=64, roi_feature_dim=4, half_len=3, template_size=6,
                        n_styles=2, n_attributes=2, min_rois=2, max_rois=3)
    corpus = generate_synthetic_corpus(seed, 2, 8, ccfg)
    params = init_params(cfg, seed)
    # larger weights than the default init so every path carries a visible gradient
    rng = np.random.default_rng(seed)
    for name, t in params.items():
        if name.endswith(".w") or name.startswith(("emb.", "vis.pos")):
            t.data = rng.normal(0.0, 0.3, size=t.shape)
    return cfg, corpus, params


def _layer_cases() -> dict[str, Callable[[], float]]:
    cases: dict[str, Callable[[], float]] = {}
    cfg, corpus, params = _tiny_setup()
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 5, cfg.hidden)), requires_grad=True)

    def attn_case():
        return grad_check(lambda t: _weighted(attention(t, params, "layer.0.", cfg.heads)), x)

    def layer_case():
        names = ["layer.0.attn.q.w", "layer.0.ffn.1.w", "layer.0.ln2.g"]
        ts = [x] + [params[n] for n in names]
        return grad_check(lambda ts_: _weighted(transformer_layer_forward(
            ts_[0], params, "layer.0.", cfg.heads)), ts)

    def bottleneck_case():
        p = {"a.down.w": _rand(rng, cfg.hidden, 3), "a.down.b": _rand(rng, 3),
             "a.up.w": _rand(rng, 3, cfg.hidden), "a.up.b": _rand(rng, cfg.hidden)}
        return grad_check(lambda ts_: _weighted(bottleneck(ts_[0], p, "a.")),
                          [x, *p.values()])

    def pool_case():
        w = np.full((2, 1, 5), 0.2)
        return grad_check(lambda t: _weighted(pool(t, w)), x)

    def pwcl_case():
        E = Tensor(np.abs(rng.normal(size=(4, 6))), requires_grad=True)
        F = Tensor(np.abs(rng.normal(size=(4, 6))), requires_grad=True)
        return grad_check(lambda ts_: pwcl_loss(T.l2_normalize(ts_[0]), T.l2_normalize(ts_[1])),
                          [E, F])

    cases["attention"] = attn_case
    cases["transformer_layer"] = layer_case
    cases["bottleneck_adapter"] = bottleneck_case
    cases["pool"] = pool_case
    cases["pwcl_loss"] = pwcl_case
    return cases


def _loss_cases() -> dict[str, Callable[[], float]]:
    from .training import pretrain_forward, task_loss

    cfg, corpus, params = _tiny_setup()

    def pretrain_case():
        batch = make_batch(corpus, np.arange(8), np.random.default_rng(5), cfg.vocab_size,
                           caption_prob=0.25)
        names = params.names()
        return grad_check(
            lambda ts_: pretrain_forward(params, cfg, batch, LossWeights())[0],
            [params[n] for n in names], max_coords=6)

    def finetune_case(builder):
        def run():
            task = TaskSpec(scale=5.0)
            if builder == "adapter2":
                p, part = build_adapter2(params, cfg, 3, task)
                # move adapters off their zero start so every path is exercised
                for n in p.trainable_names():
                    if n.endswith("up.w"):
                        p[n].data = np.random.default_rng(2).normal(0, 0.3, p[n].shape)
            else:
                p, part = build_adapter1(params, cfg, task)
                for n in p.trainable_names():
                    if n == "adapter1.out.1.w":
                        p[n].data = np.random.default_rng(3).normal(0, 0.3, p[n].shape)
            idx = np.arange(4)
            ts = [p[n] for n in sorted(part.trainable)]
            return grad_check(lambda _: task_loss(p, cfg, builder, task, corpus, idx)[0],
                              ts, max_coords=6)
        return run

    return {"pretrain_total_loss": pretrain_case,
            "finetune_adapter1_loss": finetune_case("adapter1"),
            "finetune_adapter2_loss": finetune_case("adapter2")}


def available_checks() -> list[str]:
    return [*_op_cases(), *_layer_cases(), *_loss_cases()]


def run_gradchecks(names=None) -> list[CheckResult]:
    """Run the named checks (all when ``names`` is None) in a fixed order."""
    groups = [(_op_cases(), OP_TOLERANCE), (_layer_cases(), OP_TOLERANCE),
              (_loss_cases(), LOSS_TOLERANCE)]
    known = {n for cases, _ in groups for n in cases}
    if names is not None:
        unknown = set(names) - known
        if unknown:
            raise KeyError(f"unknown gradient checks: {sorted(unknown)}")
    results = []
    for cases, tol in groups:
        for name, fn in cases.items():
            if names is None or name in names:
                results.append(CheckResult(name, float(fn()), tol))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  max_rel_err  tolerance  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:11.3e}  {r.tolerance:9.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
