"""Cross-modality retrieval scoring (CMC and mAP) and feature CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ProtocolError
from .sampler import Modality

REPORT_RANKS = (1, 5, 10, 20)


@dataclass
class FeatureBatch:
    features: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.modalities = np.asarray(self.modalities, dtype=np.int64)
        if self.features.ndim != 2 or not len(self.features) == len(self.identities) == len(self.modalities):
            raise ProtocolError("features must be (n, D) with parallel identity and modality arrays")


@dataclass
class RetrievalResult:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray

    def rank(self, k: int) -> float:
        """CMC at rank ``k``; ranks beyond the gallery size saturate at 1.0."""
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def record(self) -> dict:
        rec = {f"rank{k}": self.rank(k) for k in REPORT_RANKS}
        rec["cmc"] = {str(k): self.rank(k) for k in REPORT_RANKS}
        rec["mAP"] = float(self.map)
        return rec


def euclidean_distances(query, gallery):
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    d2 = np.sum((q[:, None, :] - g[None, :, :]) ** 2, axis=-1)
    return np.sqrt(d2)


def evaluate(query: FeatureBatch, gallery: FeatureBatch, check_modalities: bool = True) -> RetrievalResult:
    """Rank the gallery for every query by ascending distance and score the lists.

    Distance ties are broken by gallery position (stable sort). AP averages
    the precision at each correct hit over all correct gallery entries.
    """
    if check_modalities and len(query.modalities) and len(gallery.modalities):
        shared = np.intersect1d(np.unique(query.modalities), np.unique(gallery.modalities))
        if len(shared):
            raise ProtocolError("query and gallery must come from different modalities")
    missing = np.setdiff1d(np.unique(query.identities), gallery.identities)
    if len(missing):
        raise ProtocolError(f"query identities absent from gallery: {missing.tolist()}")
    dist = euclidean_distances(query.features, gallery.features)
    order = np.argsort(dist, axis=1, kind="stable")
    hits = gallery.identities[order] == query.identities[:, None]
    n_gallery = hits.shape[1]
    first = np.argmax(hits, axis=1)
    cmc = np.mean(first[:, None] <= np.arange(n_gallery)[None, :], axis=0)
    cum = np.cumsum(hits, axis=1)
    precision = cum / np.arange(1, n_gallery + 1)
    ap = np.sum(precision * hits, axis=1) / hits.sum(axis=1)
    return RetrievalResult(cmc, float(ap.mean()), ap)


def write_features_csv(path, batch: FeatureBatch):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        dim = batch.features.shape[1]
        writer.writerow(["identity", "modality"] + [f"f{i}" for i in range(dim)])
        for feat, pid, mod in zip(batch.features, batch.identities, batch.modalities):
            writer.writerow([int(pid), Modality(int(mod)).code] + [repr(float(v)) for v in feat])


def read_features_csv(path) -> FeatureBatch:
    """Parse an ``identity,modality,f0..fD-1`` file; errors name the offending row and column."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file", row=1)
        header = [h.strip() for h in header]
        dim = len(header) - 2
        if header[:2] != ["identity", "modality"] or dim < 1 or header[2:] != [f"f{i}" for i in range(dim)]:
            raise ParseError(f"{path}: expected header identity,modality,f0..fD-1", row=1)
        feats, ids, mods = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise ParseError(f"{path}: expected {dim + 2} fields, got {len(row)}", row=lineno)
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise ParseError(f"{path}: bad identity {row[0]!r}", row=lineno, column=1) from None
            try:
                mods.append(int(Modality.parse(row[1])))
            except ValueError:
                raise ParseError(f"{path}: bad modality {row[1]!r}", row=lineno, column=2) from None
            vals = []
            for col, text in enumerate(row[2:], start=3):
                try:
                    v = float(text)
                except ValueError:
                    raise ParseError(f"{path}: bad feature value {text!r}", row=lineno, column=col) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}: non-finite feature value", row=lineno, column=col)
                vals.append(v)
            feats.append(vals)
    if not feats:
        raise ParseError(f"{path}: no data rows", row=2)
    return FeatureBatch(np.array(feats), np.array(ids), np.array(mods))
