"""Sample-based and center-based triplet losses, identification loss, and their composition.

Every loss returns ``(value, grad)`` where ``grad`` is the gradient with
respect to the feature (or logit) matrix the loss consumed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, RangeError

EPS_DIST = 1e-12


class Arrangement(str, enum.Enum):
    F2F = "f2f"
    C2C = "c2c"
    C2F = "c2f"
    F2C = "f2c"
    FINE_ONLY_F = "FineOnly_f"
    FINE_ONLY_C = "FineOnly_c"
    FINE_ONLY_FC = "FineOnly_fc"

    @property
    def dual(self) -> bool:
        return not self.value.startswith("FineOnly")

    def branch_kinds(self):
        """Triplet kinds ('f' sample-based, 'c' center-based) on the fine and coarse branches."""
        return {
            "f2f": ("f", "f"), "c2c": ("c", "c"), "c2f": ("c", "f"), "f2c": ("f", "c"),
            "FineOnly_f": ("f", ""), "FineOnly_c": ("c", ""), "FineOnly_fc": ("fc", ""),
        }[self.value]


FINE_FEATURES = ("f_p", "f_bn")
COARSE_FEATURES = ("f_pf", "f_bnf")


@dataclass(frozen=True)
class LossConfig:
    margin_fine: float = 0.3
    margin_coarse: float = 0.3
    arrangement: Arrangement = Arrangement.F2C
    fine_feature: str = "f_p"
    coarse_feature: str = "f_bnf"

    def __post_init__(self):
        for name in ("margin_fine", "margin_coarse"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        try:
            object.__setattr__(self, "arrangement", Arrangement(self.arrangement))
        except ValueError:
            raise ConfigError(f"unknown arrangement {self.arrangement!r}") from None
        if self.fine_feature not in FINE_FEATURES:
            raise ConfigError(f"fine_feature must be one of {FINE_FEATURES}, got {self.fine_feature!r}")
        if self.coarse_feature not in COARSE_FEATURES:
            raise ConfigError(f"coarse_feature must be one of {COARSE_FEATURES}, got {self.coarse_feature!r}")


def pairwise_euclidean(features) -> np.ndarray:
    """Smoothed Euclidean distances ``sqrt(|x_i - x_j|^2 + EPS_DIST)`` with an exact zero diagonal."""
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature values")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1) + EPS_DIST)
    np.fill_diagonal(dist, 0.0)
    return dist


def _distance_grad(x, i, j, d):
    """Gradient of the smoothed distance d(x_i, x_j) w.r.t. x_i (negate for x_j)."""
    if i == j:
        return np.zeros(x.shape[1])
    return (x[i] - x[j]) / d


@dataclass
class MiningRecord:
    """Which rows/centers were selected; used to detect mining ties."""
    positives: tuple = ()
    negatives: tuple = ()
    active: tuple = ()

    def key(self):
        return (self.positives, self.negatives, self.active)


def fine_triplet(features, identities, margin: float, return_mining: bool = False):
    """Batch-hard triplet loss, summed over all anchors.

    The hardest positive ranges over every row of the anchor's identity
    (both modalities, the anchor included); the hardest negative over every
    row of other identities. Ties go to the lowest row index.
    """
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(identities)
    pids, counts = np.unique(ids, return_counts=True)
    if len(pids) < 2:
        raise DataError("fine_triplet needs at least two identities")
    if np.any(counts < 2):
        raise DataError(f"identity {pids[counts < 2][0]} has a single row")
    dist = pairwise_euclidean(x)
    same = ids[:, None] == ids[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(len(x))
    dp, dn = dist[rows, pos], dist[rows, neg]
    hinge = margin + dp - dn
    active = hinge > 0
    loss = float(np.sum(hinge[active]))
    grad = np.zeros_like(x)
    for a in np.flatnonzero(active):
        p, n = pos[a], neg[a]
        gp = _distance_grad(x, a, p, dp[a])
        gn = _distance_grad(x, a, n, dn[a])
        grad[a] += gp - gn
        grad[p] -= gp
        grad[n] += gn
    if return_mining:
        return loss, grad, MiningRecord(tuple(pos), tuple(neg), tuple(active))
    return loss, grad


@dataclass
class CenterSet:
    """Per-(identity, modality) feature means; row ``2*k + m`` is identity ``identities[k]``, modality ``m``."""
    centers: np.ndarray
    identities: np.ndarray
    counts: np.ndarray
    members: list = field(repr=False, default_factory=list)

    def center(self, identity, modality):
        k = int(np.flatnonzero(self.identities == identity)[0])
        return self.centers[2 * k + int(modality)]


def compute_centers(features, identities, modalities) -> CenterSet:
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(identities)
    mods = np.asarray(modalities)
    pids = np.unique(ids)
    centers = np.empty((2 * len(pids), x.shape[1]))
    counts = np.empty(2 * len(pids), dtype=np.int64)
    members = []
    for k, pid in enumerate(pids):
        for m in (0, 1):
            rows = np.flatnonzero((ids == pid) & (mods == m))
            if len(rows) == 0:
                raise DataError(f"identity {pid} has no rows for modality {m}")
            centers[2 * k + m] = x[rows].mean(axis=0)
            counts[2 * k + m] = len(rows)
            members.append(rows)
    return CenterSet(centers, pids, counts, members)


def hetero_center_triplet(features, identities, modalities, margin: float, return_mining: bool = False):
    """Hetero-center triplet loss, summed over identities and both anchor modalities.

    The positive is the same identity's other-modality center; the negative
    is the nearest center of any other identity in either modality.
    """
    x = np.asarray(features, dtype=np.float64)
    cs = compute_centers(x, identities, modalities)
    n_id = len(cs.identities)
    if n_id < 2:
        raise DataError("hetero_center_triplet needs at least two identities")
    c = cs.centers
    dist = pairwise_euclidean(c)
    owner = np.repeat(np.arange(n_id), 2)
    same = owner[:, None] == owner[None, :]
    anchors = np.arange(2 * n_id)
    pos = anchors ^ 1
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    dp, dn = dist[anchors, pos], dist[anchors, neg]
    hinge = margin + dp - dn
    active = hinge > 0
    loss = float(np.sum(hinge[active]))
    gc = np.zeros_like(c)
    for a in np.flatnonzero(active):
        p, n = pos[a], neg[a]
        gp = _distance_grad(c, a, p, dp[a])
        gn = _distance_grad(c, a, n, dn[a])
        gc[a] += gp - gn
        gc[p] -= gp
        gc[n] += gn
    grad = np.zeros_like(x)
    for k, rows in enumerate(cs.members):
        grad[rows] += gc[k] / len(rows)
    if return_mining:
        return loss, grad, MiningRecord(tuple(pos), tuple(neg), tuple(active))
    return loss, grad


def id_loss(logits, labels):
    """Mean softmax cross-entropy; ``labels`` are class indices in ``[0, num_classes)``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = z.shape
    if y.shape != (n,):
        raise RangeError(f"expected {n} labels, got shape {y.shape}")
    if np.any((y < 0) | (y >= c)):
        raise RangeError(f"class index out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    logp = shifted - lse[:, None]
    loss = float(-np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


@dataclass
class LossReport:
    """Component losses and gradients w.r.t. the routed forward outputs.

    ``l_f_tri`` sums every sample-based triplet term in the arrangement and
    ``l_c_tri`` every center-based term, so ``l_all`` is always the sum of
    the four fields.
    """
    l_f_tri: float
    l_c_tri: float
    l_id_fine: float
    l_id_coarse: float
    l_all: float
    grads: dict
    mining: tuple = ()

    def as_dict(self):
        return {k: getattr(self, k) for k in ("l_f_tri", "l_c_tri", "l_id_fine", "l_id_coarse", "l_all")}


_ROUTES = {"f_p": "f_p_fine", "f_bn": "f_bn", "f_pf": "f_fused", "f_bnf": "f_bnf"}


def dgtl_total(outputs, identities, modalities, labels, cfg: LossConfig) -> LossReport:
    """Compose the configured triplet and identification losses.

    ``outputs`` is a ForwardOutputs (or any object exposing the feature
    attributes); ``labels`` are contiguous class indices for the classifiers.
    """
    fine_kind, coarse_kind = cfg.arrangement.branch_kinds()
    grads = {}
    mining = []
    totals = {"f": 0.0, "c": 0.0}

    def add(name, g):
        grads[name] = grads[name] + g if name in grads else g

    def triplets(kinds, route):
        feats = getattr(outputs, _ROUTES[route])
        for kind in kinds:
            # margins follow the loss kind, not the branch
            if kind == "f":
                val, g, rec = fine_triplet(feats, identities, cfg.margin_fine, return_mining=True)
            else:
                val, g, rec = hetero_center_triplet(feats, identities, modalities, cfg.margin_coarse,
                                                    return_mining=True)
            totals[kind] += val
            mining.append(rec.key())
            add(_ROUTES[route], g)

    triplets(fine_kind, cfg.fine_feature)
    l_id_fine, g = id_loss(outputs.logits_fine, labels)
    add("logits_fine", g)
    l_id_coarse = 0.0
    if cfg.arrangement.dual:
        triplets(coarse_kind, cfg.coarse_feature)
        l_id_coarse, g = id_loss(outputs.logits_coarse, labels)
        add("logits_coarse", g)
    l_all = totals["f"] + totals["c"] + l_id_fine + l_id_coarse
    return LossReport(totals["f"], totals["c"], l_id_fine, l_id_coarse, l_all, grads, tuple(mining))
