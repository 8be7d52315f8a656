"""Synthetic two-modality identity data standing in for real VT-ReID images.

Every identity owns a random prototype tensor. A sample is the prototype
plus a per-channel offset vector shared by all samples of its modality
(broadcast over the spatial grid) plus independent per-sample noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .sampler import DatasetIndex

SAMPLES_FILE = "samples.npy"
INDEX_FILE = "index.csv"
SPEC_FILE = "spec.json"


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 32
    samples_per_identity_per_modality: int = 8
    input_shape: tuple = (6, 6, 4)
    identity_scale: float = 1.0
    modality_offset_scale: float = 1.0
    noise_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_identities < 2 or self.samples_per_identity_per_modality < 1:
            raise ConfigError("need at least 2 identities and 1 sample per identity per modality")
        if min(self.identity_scale, self.modality_offset_scale, self.noise_scale) < 0:
            raise ConfigError("scales must be non-negative")
        if self.identity_scale <= self.noise_scale:
            raise ConfigError("identity_scale must exceed noise_scale for identities to be separable")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class Dataset:
    samples: np.ndarray
    index: DatasetIndex
    spec: dict | None = None

    def take(self, sample_ids):
        """Sample tensors for ``sample_ids`` (which are row positions in ``samples``)."""
        return self.samples[np.asarray(sample_ids, dtype=np.int64)]

    def split(self, test_per_modality: int):
        """Hold out the last ``test_per_modality`` samples (by sample id) of each identity and modality."""
        groups = self.index.groups()
        test = set()
        for key, ids in groups.items():
            if len(ids) <= test_per_modality:
                raise DataError(f"group {key} has {len(ids)} samples, cannot hold out {test_per_modality}")
            test.update(ids[len(ids) - test_per_modality:])
        mask = np.isin(self.index.sample_ids, sorted(test))
        return self.index.subset(~mask), self.index.subset(mask)


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(spec.seed))))
    shape = spec.input_shape
    prototypes = rng.normal(0.0, spec.identity_scale, size=(spec.num_identities,) + shape)
    offsets = rng.normal(0.0, spec.modality_offset_scale, size=(2, 1, 1, shape[2]))
    n = spec.samples_per_identity_per_modality
    samples, entries = [], []
    for pid in range(spec.num_identities):
        for mod in (0, 1):
            noise = rng.normal(0.0, spec.noise_scale, size=(n,) + shape)
            for j in range(n):
                entries.append((len(samples), pid, mod))
                samples.append(prototypes[pid] + offsets[mod] + noise[j])
    return Dataset(np.stack(samples), DatasetIndex.from_entries(entries), spec.to_dict())


def save_dataset(dataset: Dataset, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / SAMPLES_FILE, dataset.samples)
    dataset.index.to_csv(out / INDEX_FILE)
    if dataset.spec is not None:
        (out / SPEC_FILE).write_text(json.dumps(dataset.spec, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    samples = np.load(path / SAMPLES_FILE)
    index = DatasetIndex.from_csv(path / INDEX_FILE)
    if index.sample_ids.min() < 0 or index.sample_ids.max() >= len(samples):
        raise DataError(f"{path}: sample ids out of range for {len(samples)} stored samples")
    spec = json.loads((path / SPEC_FILE).read_text()) if (path / SPEC_FILE).exists() else None
    return Dataset(samples, index, spec)
