"""Pretrain on three Gaussian clusters, then probe the frozen features,
score a held-out fourth cluster as out-of-distribution and add noise.

Run: python3 demos/pretrain_and_evaluate.py [steps]   (default 2000, ~30 s)

Short runs can rank the held-out cluster below the training clusters;
the spread estimate needs most of the schedule to separate them.
"""
import sys

import numpy as np

from prosmin.data import DatasetSpec, load_dataset, make_clusters
from prosmin.evaluation import (
    EmbeddingSet,
    LinearProbe,
    auroc,
    corruption_eval,
    effective_rank,
    embed,
    knn_accuracy,
    ood_scores,
)
from prosmin.model import ModelConfig
from prosmin.train import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
spec = DatasetSpec(n_clusters=4, clusters=(0, 1, 2))
cfg = TrainConfig(steps=steps, model=ModelConfig(embed_dim=16), dataset=spec)
ds = load_dataset(spec)

state, records = train(cfg, quiet=False)
pair = state.pair

tr = EmbeddingSet(embed(pair, ds.x_train), ds.y_train)
te = EmbeddingSet(embed(pair, ds.x_test), ds.y_test)
probe = LinearProbe.fit(tr)
res = probe.evaluate(te)
print(f"\nkNN accuracy   {knn_accuracy(tr, te):.3f}")
print(f"probe accuracy {res.accuracy:.3f}  NLL {res.nll:.3f}  ECE {res.ece:.3f}")
print(f"effective rank {effective_rank(te.embeddings):.2f} of {cfg.model.embed_dim}")

# The fourth cluster was never seen; its predicted spread should be larger.
x_out, _ = make_clusters(DatasetSpec(n_clusters=4, clusters=(3,)))
s_in, s_out = ood_scores(pair, ds.x_test), ood_scores(pair, x_out[:200])
print(f"\nmedian sigma  in-distribution {np.median(s_in):.3f}  held-out {np.median(s_out):.3f}")
print(f"AUROC (sigma score)    {auroc(s_out, s_in):.3f}")
s_in_d = ood_scores(pair, ds.x_test, tr, "distance")
s_out_d = ood_scores(pair, x_out[:200], tr, "distance")
print(f"AUROC (distance score) {auroc(s_out_d, s_in_d):.3f}")

rep = corruption_eval(pair, probe, ds.x_test, ds.y_test, data_std=float(ds.x_train.std()))
print("\nnoise severity vs probe accuracy")
for s, a in zip(rep["severities"], rep["accuracy"]):
    print(f"  {s:4.2f}  {a:.3f}")
