"""Sample-level and center-level triplet losses on a hand-made batch."""
import numpy as np

from dgtl.losses import compute_centers, fine_triplet, hetero_center_triplet, id_loss

rng = np.random.default_rng(0)

# Three identities, two visible and two thermal rows each.
ids = np.repeat([0, 1, 2], 4)
mods = np.tile([0, 0, 1, 1], 3)
feats = rng.normal(size=(12, 4)) + 2.0 * ids[:, None]

# Batch-hard: every anchor takes its farthest positive and nearest negative.
loss, grad = fine_triplet(feats, ids, margin=0.3)
print("batch-hard triplet:", round(loss, 4), "grad shape", grad.shape)

# The hetero-center loss compares per-(identity, modality) means instead.
centers = compute_centers(feats, ids, mods)
print("centers:", centers.centers.shape, "from counts", centers.counts.tolist())
print("hetero-center triplet:", round(hetero_center_triplet(feats, ids, mods, margin=0.3)[0], 4))

# When every feature coincides, each term sits exactly at its margin.
flat = np.ones_like(feats)
print("collapsed batch:", fine_triplet(flat, ids, 0.3)[0], "=", 12 * 0.3)

logits = np.zeros((12, 3))
print("uniform logits:", id_loss(logits, ids)[0], "= ln 3 =", np.log(3))
