"""Energy versus kernel family under the absolute-value objective.

The kernel objective can be driven to zero by inflating the predicted
spread: once samples are far apart relative to the bandwidth both kernel
terms vanish.  The script prints the loss, mean sigma and the fraction of
items whose pre-absolute objective was negative, for both families.

Run: python3 demos/kernel_vs_energy.py [steps]   (default 1000, ~30 s)
"""
import sys

from prosmin.data import load_dataset
from prosmin.evaluation import EmbeddingSet, embed, knn_accuracy
from prosmin.model import ModelConfig, NetworkPair
from prosmin.scoring import Family, ScoreConfig
from prosmin.train import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
model = ModelConfig(embed_dim=16)
ds = load_dataset(TrainConfig().dataset)


def knn(pair):
    tr = EmbeddingSet(embed(pair, ds.x_train), ds.y_train)
    return knn_accuracy(tr, EmbeddingSet(embed(pair, ds.x_test), ds.y_test))


print(f"untrained network kNN {knn(NetworkPair.create(model)):.3f}\n")
for family in (Family.ENERGY, Family.KERNEL):
    cfg = TrainConfig(steps=steps, model=model, score=ScoreConfig(family=family))
    state, recs = train(cfg)
    print(f"{family.value}:")
    for i in sorted({0, steps // 4, steps // 2, steps - 1}):
        r = recs[i]
        print(f"  step {r['step']:5d}  loss {r['loss']:.4g}  sigma {r['sigma_mean']:.3f}  "
              f"negative items {r['negative_items']}/{cfg.batch_size}")
    print(f"  total negative items {state.negative_flags}, final kNN {knn(state.pair):.3f}\n")
