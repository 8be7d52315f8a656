import numpy as np


def pk_batch(rng, P, K, D, spread=1.0):
    """Random features laid out identity by identity, K visible then K thermal rows each."""
    ids = np.repeat(np.arange(P), 2 * K)
    mods = np.tile(np.repeat([0, 1], K), P)
    feats = rng.normal(size=(2 * P * K, D)) * spread
    return feats, ids, mods
