"""Global Avg / Max / GeM pooling over the spatial axes of ``(..., H, W, C)`` maps."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, NumericalError, ShapeError


class PoolKind(str, enum.Enum):
    AVG = "avg"
    MAX = "max"
    GEM = "gem"


@dataclass(frozen=True)
class PoolingMethod:
    kind: PoolKind = PoolKind.MAX
    gem_p: float = 3.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PoolKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown pooling kind {self.kind!r}") from None
        if not (np.isfinite(self.gem_p) and self.gem_p > 0):
            raise ConfigError(f"gem_p must be finite and positive, got {self.gem_p}")

    def __str__(self):
        return self.kind.value


def _flatten(fmap):
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim < 3:
        raise ShapeError(f"feature map needs at least 3 dims (H, W, C), got shape {fmap.shape}")
    lead = fmap.shape[:-3]
    h, w, c = fmap.shape[-3:]
    return fmap.reshape(lead + (h * w, c)), lead, (h, w, c)


def pool_forward(fmap, method: PoolingMethod) -> np.ndarray:
    """Pool an ``(..., H, W, C)`` map to ``(..., C)``."""
    flat, _, _ = _flatten(fmap)
    if not np.all(np.isfinite(flat)):
        raise NumericalError("feature map contains non-finite entries")
    if method.kind is PoolKind.AVG:
        return flat.mean(axis=-2)
    if method.kind is PoolKind.MAX:
        return flat.max(axis=-2)
    if np.any(flat < 0):
        raise DomainError("GeM pooling requires non-negative inputs")
    p = float(method.gem_p)
    # scale by the channel max so x**p cannot overflow for large p
    peak = flat.max(axis=-2, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    mean = np.mean((flat / safe) ** p, axis=-2)
    return np.where(peak[..., 0, :] > 0, safe[..., 0, :] * mean ** (1.0 / p), 0.0)


def pool_backward(fmap, method: PoolingMethod, upstream) -> np.ndarray:
    """Gradient of the pooled vector w.r.t. the map, given ``d loss / d pooled``."""
    flat, lead, (h, w, c) = _flatten(fmap)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != lead + (c,):
        raise ShapeError(f"upstream shape {upstream.shape} does not match pooled shape {lead + (c,)}")
    n = h * w
    if method.kind is PoolKind.AVG:
        grad = np.broadcast_to(upstream[..., None, :] / n, flat.shape).copy()
    elif method.kind is PoolKind.MAX:
        arg = np.argmax(flat, axis=-2)
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, arg[..., None, :], upstream[..., None, :], axis=-2)
    else:
        p = float(method.gem_p)
        pooled = pool_forward(fmap, method)[..., None, :]
        # d/dx_i (mean x^p)^(1/p) = (x_i / y)^(p-1) / n
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(pooled > 0, flat / pooled, 0.0)
        grad = upstream[..., None, :] * ratio ** (p - 1.0) / n
    return grad.reshape(lead + (h, w, c))
