"""Small worked values of the score estimators and the adjusted objective.

Run: python3 demos/scores_by_hand.py
"""
import numpy as np

from prosmin.scoring import (
    Family,
    SampleSet,
    ScoreConfig,
    adjusted_score_batch,
    energy_score_estimate,
    expected_score_mc,
    kernel_score_estimate,
    score_terms,
)
from prosmin.verify import gaussian_sampler

# Two draws straddling the observation: the cross and pairwise terms cancel.
s = SampleSet([0.0, 2.0], [1.0])
print("energy {0,2} vs 1:", energy_score_estimate(s))
print("  terms (S1, S2):", score_terms(s, ScoreConfig(r=2)))

# Collapsed draws far from the observation pay the full distance twice.
print("energy {0,0} vs 3:", energy_score_estimate(SampleSet([0.0, 0.0], [3.0])))

# At beta = 2 the estimator is no longer strictly proper and can go negative.
print("energy beta=2:", energy_score_estimate(s, beta=2.0))

# The kernel score is bounded in (-2, 1); identical points give -1.
print("kernel at one point:", kernel_score_estimate(SampleSet(np.zeros((2, 2)), np.zeros(2)), 1.0))

# The adjusted objective with lambda = 0.5 is half the plain absolute score.
batch = [s, SampleSet([0.0, 0.0], [3.0])]
print("adjusted, lambda=0.5:", adjusted_score_batch(batch, ScoreConfig(lam=0.5, r=2)))
print("adjusted, lambda=0.25:", adjusted_score_batch(batch, ScoreConfig(lam=0.25, r=2)))

# Propriety in action: the truth scores lower than a shifted or rescaled guess.
q = gaussian_sampler(np.zeros(4))
cfg = ScoreConfig(Family.ENERGY, beta=1.0, r=4)
truth, se = expected_score_mc(q, q, cfg, n=20_000, seed=1)
print(f"\nexpected score, P {'equal to Q':20s}: {truth:.4f} ± {se:.4f}")
for label, mean, scale in [("mean shifted by 0.5", np.full(4, 0.5), 1.0), ("scale doubled", np.zeros(4), 2.0)]:
    v, se = expected_score_mc(gaussian_sampler(mean, scale), q, cfg, n=20_000, seed=2)
    print(f"expected score, P {label:20s}: {v:.4f} ± {se:.4f}")
