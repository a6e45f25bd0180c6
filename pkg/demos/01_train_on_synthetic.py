"""Train the concept-bottleneck encoder on synthetic driving data.

Run from the repo root:  python3 demos/01_train_on_synthetic.py
"""

import numpy as np

from gridlock import ModelConfig, SyntheticSpec, TrainConfig, evaluate, fit, generate_synthetic
from gridlock.concepts import concept_scores

# 24 concepts, 3 of which drive the targets
data = generate_synthetic(SyntheticSpec(n_sequences=160, frames=20, seed=0))
cs = data.concept_set
print(cs.k, "concepts, e.g.", cs.texts[:3])
print("hidden rule:", data.rule)

# every frame is scored against every concept; scores are cosines
seq = data.sequences[0]
scores = concept_scores(seq.frame_embeddings, cs).scores
print("scores", scores.shape, "range", scores.min().round(3), scores.max().round(3))

train, val, test = data.sequences[:64], data.sequences[64:96], data.sequences[96:]
cfg = ModelConfig(input_dim=cs.k + 3, tasks="both")  # concepts + (speed, angle, distance)
result = fit(train, val, cs, cfg, TrainConfig(epochs=45, seed=0))

for row in result.log[::9]:
    print(f"epoch {row.epoch:2d}  train rmse {row.train_loss:.3f}  val {row.val_mae}")
print("best epoch", result.best_epoch)

report = evaluate(test, cs, result.params, cfg)
targets = np.array([s.targets for s in test])
print("test MAE", {k: round(v, 3) for k, v in report.mae.items()})
print("target std  angle %.3f  distance %.3f" % tuple(targets.std(axis=0)))

# distance error by 10 m bucket
for b in report.bins["distance"]:
    if b["count"]:
        print(f"  {b['lo']:4.0f}-{b['hi']:<4.0f} n={b['count']:3d}  mae={b['mae']:.2f}")
