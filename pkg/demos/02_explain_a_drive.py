"""Concept explanations and attention spikes for one sequence.

python3 demos/02_explain_a_drive.py
"""

import numpy as np

from gridlock import ModelConfig, SyntheticSpec, TrainConfig, fit, generate_synthetic
from gridlock.explain import (
    aggregate_top_concepts,
    content_word_overlap,
    detect_spikes,
    explain_sequence,
    scene_explain_rate,
)

data = generate_synthetic(SyntheticSpec(n_sequences=96, frames=40, seed=3, noise_std=0.0))
cs = data.concept_set
cfg = ModelConfig(input_dim=cs.k + 3)
params = fit(data.sequences[:64], data.sequences[64:80], cs, cfg, TrainConfig(epochs=10, seed=3)).params

seq = data.sequences[90]
rep = explain_sequence(seq, cs, params, cfg)
print("scene:", seq.scene_description)
print("prediction:", rep.predictions, "truth:", seq.targets)

# top-3 concepts per 20-frame window, by how often they sit in a frame's top-10
for w in rep.windows:
    tops = ", ".join(f"{t['concept']} ({t['fraction']:.2f})" for t in w["top"])
    print(f"frames {w['start']}-{w['stop'] - 1}: {tops}")

words = content_word_overlap([t["concept"] for t in rep.windows[-1]["top"]], seq.scene_description)
print("shares a content word with the description:", words["hit"], words["matched"])

# CLS attention over time, and where it jumps
att = np.array(rep.attention)
print("attention mass on frames %.3f" % att.sum())
print("events:", [(e.frame, e.direction, round(e.z, 1)) for e in rep.events])
print("reveal frames:", [r.frame for r in rep.reveals if r.reveal])

# hand-made series: one step up at frame 12
series = np.r_[np.full(12, 0.02), np.full(18, 0.05)]
print("step series events:", detect_spikes(series))

print(scene_explain_rate(data.sequences, cs, "top3"))
print(scene_explain_rate(data.sequences, cs, "top1"))

# the same aggregation, straight from a score matrix
rng = np.random.default_rng(0)
win = aggregate_top_concepts(rng.random((20, 12)))[0]
print("random scores, window top-3:", win.top)
