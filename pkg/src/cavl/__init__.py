"""Single-stream vision-language transformer with pair-wise contrastive pre-training
and adapter fine-tuning, built on a small numpy autodiff engine."""
from .adapters import (
    TaskSpec, build_adapter1, build_adapter2, count_parameters, partition_parameters,
)
from .data import CorpusConfig, generate_synthetic_corpus
from .model import ModelConfig, init_params, model_forward
from .objectives import LossWeights, aps, pwcl_loss
from .training import (
    FinetuneConfig, TrainConfig, finetune, load_checkpoint, pretrain, save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig", "FinetuneConfig", "LossWeights", "ModelConfig", "TaskSpec", "TrainConfig",
    "aps", "build_adapter1", "build_adapter2", "count_parameters", "finetune",
    "generate_synthetic_corpus", "init_params", "load_checkpoint", "model_forward",
    "partition_parameters", "pretrain", "pwcl_loss", "save_checkpoint",
]
