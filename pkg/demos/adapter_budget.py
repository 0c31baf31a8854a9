"""Trainable versus frozen parameters for each fine-tuning mode at the default size."""
from cavl import ModelConfig, TaskSpec, build_adapter1, build_adapter2, init_params
from cavl.adapters import build_full

cfg = ModelConfig()
backbone = init_params(cfg, seed=0)
builds = {
    "full": build_full(backbone, cfg, TaskSpec()),
    "adapter1": build_adapter1(backbone, cfg, TaskSpec()),
}
for m in (4, 8, 16, 32):
    builds[f"adapter2 m={m}"] = build_adapter2(backbone, cfg, m, TaskSpec())

print(f"{'mode':<16} {'trainable':>10} {'frozen':>10} {'reduction':>10}")
for name, (_, part) in builds.items():
    print(f"{name:<16} {part.trainable_count:>10} {part.frozen_count:>10} "
          f"{part.reduction_fraction:>10.3f}")
