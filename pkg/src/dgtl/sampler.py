"""Identity-balanced PK mini-batch construction.

Each batch holds ``P`` identities with ``K`` visible and ``K`` thermal samples
per identity, laid out identity by identity as ``[V]*K + [T]*K``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError


class Modality(enum.IntEnum):
    VISIBLE = 0
    THERMAL = 1

    @property
    def code(self) -> str:
        return "V" if self is Modality.VISIBLE else "T"

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        text = str(value).strip().upper()
        if text in ("V", "VISIBLE"):
            return cls.VISIBLE
        if text in ("T", "THERMAL"):
            return cls.THERMAL
        raise ValueError(f"unknown modality {value!r}")


@dataclass(frozen=True)
class DatasetIndex:
    sample_ids: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray

    def __post_init__(self):
        sid = np.asarray(self.sample_ids, dtype=np.int64)
        ids = np.asarray(self.identities, dtype=np.int64)
        mods = np.asarray(self.modalities, dtype=np.int64)
        if not (sid.shape == ids.shape == mods.shape) or sid.ndim != 1:
            raise DataError("sample_ids, identities and modalities must be parallel 1-d arrays")
        object.__setattr__(self, "sample_ids", sid)
        object.__setattr__(self, "identities", ids)
        object.__setattr__(self, "modalities", mods)

    @classmethod
    def from_entries(cls, entries) -> "DatasetIndex":
        entries = list(entries)
        return cls(
            np.array([e[0] for e in entries], dtype=np.int64),
            np.array([e[1] for e in entries], dtype=np.int64),
            np.array([int(Modality.parse(e[2])) for e in entries], dtype=np.int64),
        )

    def __len__(self):
        return len(self.sample_ids)

    @property
    def identity_set(self) -> np.ndarray:
        return np.unique(self.identities)

    def validate(self):
        if len(np.unique(self.sample_ids)) != len(self.sample_ids):
            raise DataError("sample_id values must be unique")
        if np.any(self.identities < 0):
            raise DataError("identities must be non-negative")
        if not np.all(np.isin(self.modalities, [0, 1])):
            raise DataError("modality must be 0 (visible) or 1 (thermal)")
        for pid in self.identity_set:
            mods = self.modalities[self.identities == pid]
            for m in Modality:
                if not np.any(mods == m):
                    raise DataError(f"identity {pid} has no {m.name.lower()} sample")

    def groups(self) -> dict:
        """Map ``(identity, modality)`` to the sorted sample ids of that group."""
        out = {}
        order = np.argsort(self.sample_ids, kind="stable")
        for sid, pid, mod in zip(self.sample_ids[order], self.identities[order], self.modalities[order]):
            out.setdefault((int(pid), int(mod)), []).append(int(sid))
        return out

    def subset(self, mask) -> "DatasetIndex":
        mask = np.asarray(mask)
        return DatasetIndex(self.sample_ids[mask], self.identities[mask], self.modalities[mask])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "identity", "modality"])
            for sid, pid, mod in zip(self.sample_ids, self.identities, self.modalities):
                writer.writerow([int(sid), int(pid), Modality(int(mod)).code])

    @classmethod
    def from_csv(cls, path) -> "DatasetIndex":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["sample_id", "identity", "modality"]:
                raise ParseError(f"{path}: expected header sample_id,identity,modality", row=1)
            entries = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise ParseError(f"{path}: expected 3 fields, got {len(row)}", row=lineno)
                try:
                    sid = int(row[0])
                except ValueError:
                    raise ParseError(f"{path}: bad sample_id {row[0]!r}", row=lineno, column=1) from None
                try:
                    pid = int(row[1])
                except ValueError:
                    raise ParseError(f"{path}: bad identity {row[1]!r}", row=lineno, column=2) from None
                try:
                    mod = Modality.parse(row[2])
                except ValueError:
                    raise ParseError(f"{path}: bad modality {row[2]!r}", row=lineno, column=3) from None
                entries.append((sid, pid, mod))
        return cls.from_entries(entries)


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 8
    K: int = 4
    seed: int = 0

    def __post_init__(self):
        if int(self.P) < 2:
            raise ConfigError(f"P must be >= 2, got {self.P}")
        if int(self.K) < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class MiniBatchSpec:
    slots: np.ndarray
    identities: np.ndarray
    modalities: np.ndarray

    def __len__(self):
        return len(self.slots)

    def check(self, P: int, K: int):
        """Raise ``DataError`` unless this batch is a valid PK batch."""
        if len(self.slots) != 2 * P * K:
            raise DataError(f"batch has {len(self.slots)} slots, expected {2 * P * K}")
        pids = np.unique(self.identities)
        if len(pids) != P:
            raise DataError(f"batch has {len(pids)} identities, expected {P}")
        for pid in pids:
            for m in Modality:
                n = int(np.sum((self.identities == pid) & (self.modalities == m)))
                if n != K:
                    raise DataError(f"identity {pid} has {n} {m.name.lower()} slots, expected {K}")


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """PCG64 stream for one epoch, spawned from ``seed`` by epoch number."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(epoch),))))


def batches_per_epoch(num_identities: int, P: int) -> int:
    return -(-num_identities // P)


def build_epoch(index: DatasetIndex, cfg: SamplerConfig, epoch: int = 0) -> list:
    """Return the list of PK batches making up ``epoch``.

    Identities are visited by a shuffled round-robin; the last short group is
    topped up with identities already used this epoch. Within an
    (identity, modality) group, samples are drawn without replacement when
    the group has at least ``K`` members.
    """
    index.validate()
    groups = index.groups()
    pids = index.identity_set
    P, K = int(cfg.P), int(cfg.K)
    if P > len(pids):
        raise ConfigError(f"P={P} exceeds the {len(pids)} identities in the index")

    rng = epoch_rng(cfg.seed, epoch)
    order = pids[rng.permutation(len(pids))]
    batches = []
    for start in range(0, len(order), P):
        chosen = list(order[start:start + P])
        if len(chosen) < P:
            used = order[:start]
            chosen.extend(rng.choice(used, size=P - len(chosen), replace=False))
        slots, ids, mods = [], [], []
        for pid in chosen:
            for m in (Modality.VISIBLE, Modality.THERMAL):
                pool = groups[(int(pid), int(m))]
                picked = rng.choice(pool, size=K, replace=len(pool) < K)
                slots.extend(int(s) for s in picked)
                ids.extend([int(pid)] * K)
                mods.extend([int(m)] * K)
        batches.append(MiniBatchSpec(np.array(slots, dtype=np.int64),
                                     np.array(ids, dtype=np.int64),
                                     np.array(mods, dtype=np.int64)))
    return batches
