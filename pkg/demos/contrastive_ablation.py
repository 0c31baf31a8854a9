"""Pre-train a small model with and without the contrastive term and compare alignment.

Runs in a few seconds on one core. The full-size comparison is the
acceptance suite; this is the quick look.
"""
from cavl import LossWeights, ModelConfig, TrainConfig, generate_synthetic_corpus, pretrain
from cavl.evaluation import alignment_stats, heatmap_summary, similarity_matrix

model = ModelConfig(hidden=32, layers=2, heads=2, ffn_dim=64)
train = generate_synthetic_corpus(0, 4, 128)
test = generate_synthetic_corpus(0, 4, 32, split="test")

for w in (1.0, 0.0):
    cfg = TrainConfig(batch_size=16, epochs=10, weights=LossWeights(pwcl=w))
    res = pretrain(model, cfg, train, seed=0)
    stats = alignment_stats(res.params, model, test)
    hm = heatmap_summary(similarity_matrix(res.params, model, test, 16))
    print(f"pwcl weight {w}: aps {stats['aps']:.3f}  off-diagonal {stats['off_diag']:.3f}  "
          f"argmax on diagonal {hm['rows_argmax_on_diag']}/16")
