"""Momentum-SGD training loop and finite-difference gradient checking."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .embedder import FROZEN, Embedder, EmbedderConfig
from .errors import ConfigError, NumericalError
from .losses import LossConfig, dgtl_total
from .pooling import PoolKind
from .sampler import DatasetIndex, SamplerConfig, batches_per_epoch, build_epoch

logger = logging.getLogger(__name__)

MAX_EPOCHS = 10_000
LOSS_KEYS = ("l_f_tri", "l_c_tri", "l_id_fine", "l_id_coarse", "l_all")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    log_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if not 1 <= int(self.epochs) <= MAX_EPOCHS:
            raise ConfigError(f"epochs must be in [1, {MAX_EPOCHS}], got {self.epochs}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ConfigError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (np.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self):
        return {
            "epochs": self.epochs, "learning_rate": self.learning_rate, "momentum": self.momentum,
            "weight_decay": self.weight_decay, "log_every": self.log_every,
            "checkpoint_path": self.checkpoint_path,
            "sampler": {"P": self.sampler.P, "K": self.sampler.K, "seed": self.sampler.seed},
            "embedder": self.embedder.to_dict(),
            "loss": {
                "margin_fine": self.loss.margin_fine, "margin_coarse": self.loss.margin_coarse,
                "arrangement": self.loss.arrangement.value, "fine_feature": self.loss.fine_feature,
                "coarse_feature": self.loss.coarse_feature,
            },
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sampler"] = SamplerConfig(**d["sampler"])
        d["embedder"] = EmbedderConfig.from_dict(d["embedder"])
        d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def epoch_means(self, key="l_all"):
        by_epoch = {}
        for rec in self.records:
            by_epoch.setdefault(rec["epoch"], []).append(rec[key])
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def class_labels(identities, classes) -> np.ndarray:
    """Map identity values onto contiguous indices into ``classes`` (sorted)."""
    return np.searchsorted(classes, identities)


def sgd_update(params, grads, velocity, lr, momentum, weight_decay, frozen=FROZEN):
    """``v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v``, in place."""
    for name, theta in params.items():
        if name in frozen:
            continue
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = momentum * v + grads[name] + weight_decay * theta
        velocity[name] = v
        params[name] = theta - lr * v


class Trainer:
    """Stateful training run that can be checkpointed between any two steps."""

    def __init__(self, samples, index: DatasetIndex, cfg: TrainConfig, embedder=None, velocity=None, step=0):
        self.samples = np.asarray(samples)
        self.index = index
        self.cfg = cfg
        self.classes = index.identity_set
        if len(self.classes) > cfg.embedder.num_identities:
            raise ConfigError(f"{len(self.classes)} training identities exceed "
                              f"num_identities={cfg.embedder.num_identities}")
        self.embedder = embedder if embedder is not None else Embedder(cfg.embedder)
        self.velocity = velocity if velocity is not None else {}
        self.step = step
        self.bpe = batches_per_epoch(len(self.classes), cfg.sampler.P)
        self.history = TrainHistory()
        self._epoch_cache = (None, None)

    @property
    def total_steps(self):
        return self.cfg.epochs * self.bpe

    def _batches(self, epoch):
        if self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, build_epoch(self.index, self.cfg.sampler, epoch))
        return self._epoch_cache[1]

    def train_step(self):
        try:
            return self._train_step()
        except NumericalError as exc:
            if exc.step is None:
                raise NumericalError(f"step {self.step}: {exc}", step=self.step) from exc
            raise

    def _train_step(self):
        epoch, b = divmod(self.step, self.bpe)
        spec = self._batches(epoch)[b]
        x = self.samples[spec.slots]
        labels = class_labels(spec.identities, self.classes)
        out = self.embedder.forward(x, spec.modalities, train=True)
        report = dgtl_total(out, spec.identities, spec.modalities, labels, self.cfg.loss)
        values = report.as_dict()
        if not all(np.isfinite(v) for v in values.values()):
            raise NumericalError(f"non-finite loss at step {self.step}: {values}", step=self.step)
        grads = self.embedder.backward(report.grads)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(f"non-finite gradient at step {self.step}", step=self.step)
        sgd_update(self.embedder.params, grads, self.velocity,
                   self.cfg.learning_rate, self.cfg.momentum, self.cfg.weight_decay)
        rec = {"step": self.step, "epoch": epoch, "batch": b, **values}
        self.history.records.append(rec)
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            logger.info("epoch %d batch %d l_all %.6f", epoch, b, values["l_all"])
        self.step += 1
        return rec

    def run(self, max_steps=None) -> TrainHistory:
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        while self.step < stop:
            self.train_step()
        if self.step >= self.total_steps and self.cfg.checkpoint_path:
            self.save(self.cfg.checkpoint_path)
        return self.history

    def save(self, path):
        return save_checkpoint(path, self.embedder, self.velocity, state={"step": self.step},
                               train_config=self.cfg.to_dict())

    @classmethod
    def resume(cls, path, samples, index, cfg: TrainConfig | None = None):
        embedder, velocity, meta = load_checkpoint(path)
        if cfg is None:
            cfg = TrainConfig.from_dict(meta["train_config"])
        return cls(samples, index, cfg, embedder=embedder, velocity=velocity, step=int(meta["state"]["step"]))


def train(samples, index: DatasetIndex, cfg: TrainConfig):
    """Train from scratch; returns ``(embedder, history)``."""
    trainer = Trainer(samples, index, cfg)
    history = trainer.run()
    return trainer.embedder, history


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    checked: int
    ties: list
    per_param: dict
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def summary(self) -> dict:
        return {
            "passed": self.passed, "max_rel_error": self.max_rel_error, "threshold": self.threshold,
            "worst": None if self.worst is None else [self.worst[0], list(self.worst[1])],
            "checked": self.checked, "ties": [[n, list(i)] for n, i in self.ties],
            "per_param": self.per_param,
        }


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dividing by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(embedder: Embedder, inputs, modalities, identities, labels, loss_cfg: LossConfig,
                    num_params=20, seed=0, step=1e-4, threshold=1e-4) -> GradCheckReport:
    """Compare analytic parameter gradients of ``l_all`` with central differences.

    ``num_params`` coordinates are drawn per parameter tensor. A coordinate
    whose perturbation changes any hard-mining selection, hinge activity or
    max-pooling argmax is a tie: it is excluded from the error and listed in
    ``ties``.
    """
    model = embedder.copy()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))

    max_pooled = PoolKind.MAX in (model.config.pool_fine.kind, model.config.pool_coarse.kind)

    def evaluate():
        out = model.forward(inputs, modalities, train=True)
        rep = dgtl_total(out, identities, modalities, labels, loss_cfg)
        sig = rep.mining
        if max_pooled:
            fmap = model._cache["fmap"]
            sig += (np.argmax(fmap.reshape(fmap.shape[0], -1, fmap.shape[-1]), axis=1).tobytes(),)
        return rep, sig

    base, base_sig = evaluate()
    grads = model.backward(base.grads)
    worst, worst_err, checked, ties, per_param = None, 0.0, 0, [], {}
    for name, theta in model.params.items():
        coords = list(np.ndindex(theta.shape))
        picks = rng.choice(len(coords), size=min(num_params, len(coords)), replace=False)
        layer_err = 0.0
        for k in sorted(picks):
            idx = coords[k]
            orig = theta[idx]
            theta[idx] = orig + step
            plus, plus_sig = evaluate()
            theta[idx] = orig - step
            minus, minus_sig = evaluate()
            theta[idx] = orig
            if plus_sig != base_sig or minus_sig != base_sig:
                ties.append((name, idx))
                continue
            numeric = (plus.l_all - minus.l_all) / (2 * step)
            err = relative_error(grads[name][idx], numeric)
            checked += 1
            layer_err = max(layer_err, err)
            if err > worst_err or worst is None:
                worst, worst_err = (name, idx), max(err, worst_err)
        per_param[name] = layer_err
    return GradCheckReport(worst_err, worst, checked, ties, per_param, threshold)


# Inputs at unit scale leave untrained pooled features with batch variance near
# the batch-norm epsilon; the resulting curvature swamps small gradients in the
# O(h^2) central-difference error. Scale 3 keeps the check well conditioned.
GRADCHECK_INPUT_SCALE = 3.0


def grad_check(cfg: TrainConfig, num_params=20, seed=0, dataset=None) -> GradCheckReport:
    """Gradient check on one sampled batch of a small configuration.

    Without ``dataset`` a synthetic set matching ``cfg.embedder.input_shape``
    is generated from ``seed``.
    """
    from .synthetic import SyntheticSpec, generate

    P, K = cfg.sampler.P, cfg.sampler.K
    if 2 * P * K > 16 or cfg.embedder.feature_dim > 16:
        raise ConfigError("grad_check expects a small config: batch <= 16 and feature_dim <= 16")
    if dataset is None:
        scale = GRADCHECK_INPUT_SCALE
        dataset = generate(SyntheticSpec(num_identities=P, samples_per_identity_per_modality=K,
                                         input_shape=cfg.embedder.input_shape, identity_scale=scale,
                                         noise_scale=0.2 * scale, modality_offset_scale=scale, seed=seed))
    spec = build_epoch(dataset.index, cfg.sampler, 0)[0]
    classes = dataset.index.identity_set
    embedder = Embedder(cfg.embedder)
    return check_gradients(embedder, dataset.take(spec.slots), spec.modalities, spec.identities,
                           class_labels(spec.identities, classes), cfg.loss, num_params, seed)
