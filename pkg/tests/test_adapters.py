import json
import re

import numpy as np
import pytest

from cavl.adapters import (
    MODES, TaskSpec, adapter_param_count, build_adapter1, build_adapter2, build_full,
    count_parameters, finetune_forward, init_adapter2_inserts, layer_param_count,
    partition_parameters,
)
from cavl.data import clean_inputs
from cavl.errors import ConfigError, InvalidBottleneck, UnknownParameter
from cavl.model import ModelConfig, ModelParams, init_params, model_forward
from cavl.tensor import Tape, Tensor
from cavl.training import task_loss

DEFAULT = ModelConfig()


def _embedding_count(cfg):
    D = cfg.hidden
    return (cfg.vocab_size * D + cfg.segment_count * D + cfg.max_text_len * D
            + cfg.roi_feature_dim * D + D + cfg.max_rois * D)


def _backbone_count(cfg):
    return _embedding_count(cfg) + cfg.layers * layer_param_count(cfg)


@pytest.fixture(scope="module")
def default_model():
    return init_params(DEFAULT, seed=0)


# ------------------------------------------------------------------ closed-form oracles

def test_single_adapter_count():
    assert adapter_param_count(64, 8) == 64 * 8 + 8 + 8 * 64 + 64 == 1096


def test_layer_count_by_hand():
    # four D x D projections with bias, FFN D->F->D, two LayerNorms
    assert layer_param_count(DEFAULT) == 4 * (64 * 64 + 64) + (64 * 256 + 256) \
        + (256 * 64 + 64) + 4 * 64


@pytest.mark.parametrize("m", [1, 8, 32, 63])
def test_adapter2_counts_match_oracle(default_model, m):
    _, part = build_adapter2(default_model, DEFAULT, m, TaskSpec())
    L, D = DEFAULT.layers, DEFAULT.hidden
    trainable = 2 * L * adapter_param_count(D, m) + L * 4 * D + (D * D + D)
    frozen = _backbone_count(DEFAULT) - L * 4 * D
    assert part.trainable_count == trainable
    assert part.frozen_count == frozen
    if m == 8:
        assert part.reduction_fraction >= 0.5
        assert part.trainable_count / part.total <= 0.5


def test_adapter1_counts_match_oracle(default_model):
    _, part = build_adapter1(default_model, DEFAULT, TaskSpec())
    D = DEFAULT.hidden
    trainable = layer_param_count(DEFAULT) + (2 * D * D + D) + (D * D + D)
    assert part.trainable_count == trainable
    assert part.frozen_count == _backbone_count(DEFAULT)
    assert part.trainable_count / part.total < 0.25


def test_full_mode(default_model):
    _, part = build_full(default_model, DEFAULT, TaskSpec())
    rep = count_parameters(part)
    assert part.frozen == frozenset() and rep["frozen"] == 0
    assert rep["reduction_fraction"] == 0.0


def test_reference_scale_ratio():
    # fine-tuned parameters in millions: Adapter II 46.70 versus a 113.90 baseline
    assert 1 - 46.70 / 113.90 == pytest.approx(0.590, abs=1e-3)


# ------------------------------------------------------------------ partition laws

@pytest.mark.parametrize("mode", MODES)
def test_partition_is_disjoint_and_complete(default_model, mode):
    builders = {"full": lambda: build_full(default_model, DEFAULT, TaskSpec()),
                "adapter1": lambda: build_adapter1(default_model, DEFAULT, TaskSpec()),
                "adapter2": lambda: build_adapter2(default_model, DEFAULT, 8, TaskSpec())}
    params, part = builders[mode]()
    assert not part.trainable & part.frozen
    assert part.trainable | part.frozen == set(params.names())
    brute = sum(int(np.prod(t.shape)) for t in params.tensors.values())
    assert part.trainable_count + part.frozen_count == brute == params.numel()
    assert part.trainable_count == sum(params[n].size for n in part.trainable)
    assert params.frozen == set(part.frozen)
    for n, t in params.items():
        assert t.requires_grad == (n in part.trainable)


def test_adapter2_freezes_attention_and_ffn(default_model):
    params, part = build_adapter2(default_model, DEFAULT, 8, TaskSpec())
    for n in params.names():
        if re.match(r"layer\.\d+\.(attn|ffn)\.", n) or n.startswith(("emb.", "vis.")):
            assert n in part.frozen, n
        if re.match(r"layer\.\d+\.ln[12]\.", n) or n.startswith(("adapter2.", "head.task.")):
            assert n in part.trainable, n


def test_partition_is_deterministic(default_model):
    a = partition_parameters(default_model, "adapter2")
    b = partition_parameters(default_model, "adapter2")
    assert a.trainable == b.trainable and a.frozen == b.frozen


def test_unknown_parameter_name_raises():
    params = ModelParams({"emb.tok": Tensor(np.zeros((2, 2))), "mystery": Tensor(np.zeros(3))})
    with pytest.raises(UnknownParameter):
        partition_parameters(params, "adapter1")
    with pytest.raises(ConfigError):
        partition_parameters(params, "adapter9")


def test_partition_report_json(default_model, tmp_path):
    _, part = build_adapter2(default_model, DEFAULT, 8, TaskSpec())
    path = tmp_path / "partition.json"
    path.write_text(json.dumps(part.report()))
    rep = json.loads(path.read_text())
    assert set(rep) == {"mode", "trainable", "frozen", "reduction_fraction", "per_tensor"}
    brute_t = sum(int(np.prod(e["shape"])) for e in rep["per_tensor"] if e["trainable"])
    brute_f = sum(int(np.prod(e["shape"])) for e in rep["per_tensor"] if not e["trainable"])
    assert (rep["trainable"], rep["frozen"]) == (brute_t, brute_f)


# ------------------------------------------------------------------ adapter structure

@pytest.mark.parametrize("m", [0, -1, 64, 65])
def test_invalid_bottleneck(default_model, m):
    with pytest.raises(InvalidBottleneck):
        build_adapter2(default_model, DEFAULT, m, TaskSpec())


def test_two_adapters_per_layer():
    ins = init_adapter2_inserts(np.random.default_rng(0), DEFAULT, 8)
    for i in range(DEFAULT.layers):
        assert ins.per_layer(i) == [f"adapter2.{i}.attn", f"adapter2.{i}.ffn"]
    ups = [t for n, t in ins.tensors.items() if n.endswith("up.w")]
    assert all((t.data == 0).all() for t in ups)


def test_adapter1_shortcut_is_shallower_than_backbone(default_model):
    params, _ = build_adapter1(default_model, DEFAULT, TaskSpec())
    short_layers = {n.split(".")[2] for n in params.names() if n.startswith("adapter1.short.")}
    assert len([n for n in params.names() if n.startswith("adapter1.short.") and
                n.endswith("attn.q.w")]) == 1 < DEFAULT.layers
    assert short_layers  # shortcut tensors exist


def test_pretraining_heads_are_dropped(default_model):
    params, _ = build_adapter2(default_model, DEFAULT, 8, TaskSpec())
    assert not any(n.startswith(("head.mlm", "head.nsp", "head.cap")) for n in params.names())


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(kind="captioning")
    with pytest.raises(ConfigError):
        TaskSpec(kind="classification", n_classes=1)
    assert TaskSpec.from_dict(TaskSpec(kind="classification", n_classes=3).to_dict()).n_classes == 3


# ------------------------------------------------------------------ behaviour

def test_adapter2_starts_as_the_backbone(tiny_pretrained):
    ckpt, corpus = tiny_pretrained
    cfg = ckpt.model_config
    params, _ = build_adapter2(ckpt.params, cfg, 4, TaskSpec())
    inputs = clean_inputs(corpus, range(10))
    base = model_forward(ckpt.params, cfg, inputs)
    ft = finetune_forward(params, cfg, "adapter2", TaskSpec(), inputs)
    assert np.abs(ft.backbone.states.data - base.states.data).max() <= 1e-6
    # identity-initialised retrieval head keeps the pooled vectors
    assert np.abs(ft.E.data - base.E_prime.data).max() <= 1e-6
    assert np.abs(ft.F.data - base.F_prime.data).max() <= 1e-6


def test_adapter1_starts_from_backbone_direction(tiny_pretrained):
    ckpt, corpus = tiny_pretrained
    cfg = ckpt.model_config
    params, _ = build_adapter1(ckpt.params, cfg, TaskSpec())
    inputs = clean_inputs(corpus, range(6))
    base = model_forward(ckpt.params, cfg, inputs)
    ft = finetune_forward(params, cfg, "adapter1", TaskSpec(), inputs)
    cos = np.einsum("ij,ij->i", ft.E.data, base.E_prime.data)
    assert (cos > 0.9).all()


@pytest.mark.parametrize("mode", ["adapter1", "adapter2"])
def test_gradient_locality(tiny_pretrained, mode):
    ckpt, corpus = tiny_pretrained
    cfg = ckpt.model_config
    if mode == "adapter1":
        params, part = build_adapter1(ckpt.params, cfg, TaskSpec())
    else:
        params, part = build_adapter2(ckpt.params, cfg, 4, TaskSpec())
    with Tape() as tape:
        loss, _ = task_loss(params, cfg, mode, TaskSpec(), corpus, np.arange(6))
    tape.backward(loss)
    for n in part.frozen:
        assert params[n].grad is None, n
    assert any(params[n].grad is not None and np.abs(params[n].grad).max() > 0
               for n in part.trainable)


def test_classification_head_shape(tiny_pretrained):
    ckpt, corpus = tiny_pretrained
    cfg = ckpt.model_config
    task = TaskSpec(kind="classification", n_classes=4)
    for mode, build in (("adapter1", lambda: build_adapter1(ckpt.params, cfg, task)),
                        ("adapter2", lambda: build_adapter2(ckpt.params, cfg, 4, task))):
        params, _ = build()
        out = finetune_forward(params, cfg, mode, task, clean_inputs(corpus, range(5)))
        assert out.logits.shape == (5, 4)


@pytest.mark.parametrize("name", ["finetune_adapter1_loss", "finetune_adapter2_loss"])
def test_finetune_losses_gradcheck(name):
    from cavl.gradcheck import run_gradchecks
    (res,) = run_gradchecks([name])
    assert res.max_rel_error < 1e-3
