"""Anchor assignment and the feature entropy on a toy batch.

Shows the three views of one Gumbel-perturbed assignment (soft, hard,
straight-through), the batch entropy for a spread and a collapsed batch, and
the gradient that pushes a collapsed batch apart.

Run: python demos/regularizer_walkthrough.py
"""
import numpy as np

from coarse2fine import anchors as anc
from coarse2fine import autodiff as ad

rng = np.random.default_rng(0)
anchor_set = anc.sample_anchors(8, 2, seed=0)
spread = rng.normal(size=(32, 2))
collapsed = np.tile([[1.0, 0.2]], (32, 1)) + 0.01 * rng.normal(size=(32, 2))
noise = anc.gumbel_noise((32, 8), seed=0, step=0)

h, dist = anc.feature_entropy(spread, anchor_set, noise)
print("first row, soft :", np.round(dist.soft.data[0], 3))
print("first row, hard :", dist.hard[0])
print("first row, ST   :", dist.straight_through.data[0])
print(f"entropy of spread batch    {h.item():.3f}  (max ln 8 = {np.log(8):.3f})")

h_c, _ = anc.feature_entropy(collapsed, anchor_set, noise)
print(f"entropy of collapsed batch {h_c.item():.3f}")
print(f"noise-free monitor, spread {anc.monitor_entropy(spread, anchor_set):.3f}, "
      f"collapsed {anc.monitor_entropy(collapsed, anchor_set):.3f}")

# ascent on the entropy spreads the collapsed batch over more anchors
r = collapsed.copy()
for step in range(200):
    with ad.Tape() as tape:
        leaf = tape.leaf(r, "r")
        h, _ = anc.feature_entropy(leaf, anchor_set, anc.gumbel_noise((32, 8), 0, step))
    r = r + 0.5 * ad.backward(tape, h)["r"]
print(f"after 200 ascent steps the monitor entropy is {anc.monitor_entropy(r, anchor_set):.3f}")
