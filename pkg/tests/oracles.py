"""Brute-force reference implementations, kept free of any dgtl code paths.

Everything here uses plain Python loops and ``math`` so that agreement with
the vectorized library code is meaningful.
"""
import math

EPS_DIST = 1e-12


def dist(a, b, same_row=False):
    if same_row:
        return 0.0
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) + EPS_DIST)


def naive_pairwise(rows):
    n = len(rows)
    return [[dist(rows[i], rows[j], i == j) for j in range(n)] for i in range(n)]


def exhaustive_fine_triplet(rows, ids, margin):
    """Sum over anchors of the largest hinge over every (positive, negative) pair."""
    rows = [list(map(float, r)) for r in rows]
    total = 0.0
    for a in range(len(rows)):
        best = 0.0
        for p in range(len(rows)):
            if ids[p] != ids[a]:
                continue
            for n in range(len(rows)):
                if ids[n] == ids[a]:
                    continue
                h = margin + dist(rows[a], rows[p], a == p) - dist(rows[a], rows[n])
                best = max(best, h)
        total += best
    return total


def group_means(rows, ids, mods):
    sums, counts = {}, {}
    for r, i, m in zip(rows, ids, mods):
        key = (int(i), int(m))
        if key not in sums:
            sums[key] = [0.0] * len(r)
            counts[key] = 0
        sums[key] = [s + float(v) for s, v in zip(sums[key], r)]
        counts[key] += 1
    return {k: [s / counts[k] for s in v] for k, v in sums.items()}


def exhaustive_center_triplet(rows, ids, mods, margin):
    """Hetero-center loss by enumerating every candidate negative center."""
    centers = group_means(rows, ids, mods)
    pids = sorted({k[0] for k in centers})
    total = 0.0
    for i in pids:
        for m in (0, 1):
            anchor, positive = centers[(i, m)], centers[(i, 1 - m)]
            dp = dist(anchor, positive)
            best = 0.0
            for j in pids:
                if j == i:
                    continue
                for mm in (0, 1):
                    best = max(best, margin + dp - dist(anchor, centers[(j, mm)]))
            total += best
    return total


def logsumexp_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[y]
    return total / len(labels)


def sort_and_count(query, q_ids, gallery, g_ids):
    """CMC curve and per-query AP by explicit sorting and counting."""
    n_g = len(gallery)
    cmc_counts = [0] * n_g
    aps = []
    for q, qid in zip(query, q_ids):
        d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(q, g))) for g in gallery]
        ranked = sorted(range(n_g), key=lambda j: (d[j], j))
        hits, precisions, first = 0, [], None
        for pos, j in enumerate(ranked, start=1):
            if g_ids[j] == qid:
                hits += 1
                precisions.append(hits / pos)
                if first is None:
                    first = pos
        for k in range(first, n_g + 1):
            cmc_counts[k - 1] += 1
        aps.append(sum(precisions) / len(precisions))
    cmc = [c / len(query) for c in cmc_counts]
    return cmc, sum(aps) / len(aps), aps


def central_diff(f, x, step=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences (x is restored)."""
    import numpy as np

    grad = np.zeros_like(x, dtype=float)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad
