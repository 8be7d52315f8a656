"""Two-stream toy embedder with dual pooling branches, BNNeck and fusion.

The backbone is a stack of per-pixel affine layers with softplus
activations: modality-specific layers first (separate weights for visible
and thermal inputs), then shared layers ending in ``feature_dim`` channels.
The resulting ``H0 x W0 x C`` map feeds the fine and coarse pooling branches::

    map --pool_fine--> f_p_fine --BN--> f_bn --cls_fine--> logits_fine
    map --pool_coarse--> f_p_coarse --fuse(., f_bn)--> f_fused --BN--> f_bnf --cls_coarse--> logits_coarse
"""
from __future__ import annotations

import copy
import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pooling
from .errors import ConfigError, NumericalError, ShapeError, StateError
from .pooling import PoolingMethod

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


class Fusion(str, enum.Enum):
    SUM = "sum"
    CONCAT = "cat"


@dataclass(frozen=True)
class EmbedderConfig:
    input_shape: tuple = (6, 6, 4)
    spec_layers: tuple = (32,)
    shared_layers: tuple = (32,)
    feature_dim: int = 32
    num_identities: int = 32
    fusion: Fusion = Fusion.SUM
    pool_fine: PoolingMethod = field(default_factory=lambda: PoolingMethod("max"))
    pool_coarse: PoolingMethod = field(default_factory=lambda: PoolingMethod("max"))
    bn_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "spec_layers", tuple(int(v) for v in self.spec_layers))
        object.__setattr__(self, "shared_layers", tuple(int(v) for v in self.shared_layers))
        for name in ("pool_fine", "pool_coarse"):
            v = getattr(self, name)
            if isinstance(v, str):
                object.__setattr__(self, name, PoolingMethod(v))
            elif isinstance(v, dict):
                object.__setattr__(self, name, PoolingMethod(**v))
        try:
            object.__setattr__(self, "fusion", Fusion(self.fusion))
        except ValueError:
            raise ConfigError(f"unknown fusion {self.fusion!r}") from None
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (H0, W0, C0) with positive entries, got {self.input_shape}")
        if not self.spec_layers:
            raise ConfigError("spec_layers must hold at least one modality-specific layer")
        if any(w < 1 for w in self.spec_layers + self.shared_layers):
            raise ConfigError("layer widths must be positive")
        if self.feature_dim < 2:
            raise ConfigError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be >= 2, got {self.num_identities}")
        if not (np.isfinite(self.bn_epsilon) and self.bn_epsilon > 0):
            raise ConfigError("bn_epsilon must be positive")

    @property
    def fine_dim(self) -> int:
        return self.feature_dim

    @property
    def coarse_dim(self) -> int:
        return self.feature_dim

    @property
    def fused_dim(self) -> int:
        return self.coarse_dim + self.fine_dim if self.fusion is Fusion.CONCAT else self.coarse_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.value
        d["pool_fine"] = {"kind": self.pool_fine.kind.value, "gem_p": self.pool_fine.gem_p}
        d["pool_coarse"] = {"kind": self.pool_coarse.kind.value, "gem_p": self.pool_coarse.gem_p}
        d["input_shape"] = list(self.input_shape)
        d["spec_layers"] = list(self.spec_layers)
        d["shared_layers"] = list(self.shared_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        return cls(**d)


@dataclass
class ForwardOutputs:
    f_p_fine: np.ndarray
    f_p_coarse: np.ndarray
    f_bn: np.ndarray
    f_fused: np.ndarray
    f_bnf: np.ndarray
    logits_fine: np.ndarray
    logits_coarse: np.ndarray


OUTPUT_NAMES = ("f_p_fine", "f_p_coarse", "f_bn", "f_fused", "f_bnf", "logits_fine", "logits_coarse")


def fuse(coarse, fine, fusion: Fusion) -> np.ndarray:
    """Combine the coarse-branch pooled feature with ``f_bn``."""
    if Fusion(fusion) is Fusion.SUM:
        if coarse.shape != fine.shape:
            raise ConfigError(f"sum fusion needs equal branch dims, got {coarse.shape[-1]} and {fine.shape[-1]}")
        return coarse + fine
    return np.concatenate([coarse, fine], axis=-1)


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def layer_shapes(config: EmbedderConfig):
    """Ordered ``(name, shape)`` list of every parameter."""
    shapes = []
    c0 = config.input_shape[2]
    for stream in ("visible", "thermal"):
        fan_in = c0
        for i, width in enumerate(config.spec_layers):
            shapes += [(f"{stream}.{i}.weight", (fan_in, width)), (f"{stream}.{i}.bias", (width,))]
            fan_in = width
    fan_in = config.spec_layers[-1]
    for i, width in enumerate(config.shared_layers + (config.feature_dim,)):
        shapes += [(f"shared.{i}.weight", (fan_in, width)), (f"shared.{i}.bias", (width,))]
        fan_in = width
    shapes += [
        ("bn_fine.gamma", (config.fine_dim,)),
        ("bn_fine.beta", (config.fine_dim,)),
        ("bn_fused.gamma", (config.fused_dim,)),
        ("bn_fused.beta", (config.fused_dim,)),
        ("cls_fine.weight", (config.fine_dim, config.num_identities)),
        ("cls_coarse.weight", (config.fused_dim, config.num_identities)),
    ]
    return shapes


# BN shifts stay at zero; the optimizer never touches them.
FROZEN = frozenset({"bn_fine.beta", "bn_fused.beta"})


def init_params(config: EmbedderConfig):
    """Return ``(params, buffers)`` as ordered dicts of float64 arrays."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(config.seed))))
    params = {}
    for name, shape in layer_shapes(config):
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif name.endswith("beta"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if name.endswith("weight") else _fan_in(params, name)
            bound = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    buffers = {
        "bn_fine.running_mean": np.zeros(config.fine_dim),
        "bn_fine.running_var": np.ones(config.fine_dim),
        "bn_fused.running_mean": np.zeros(config.fused_dim),
        "bn_fused.running_var": np.ones(config.fused_dim),
    }
    return params, buffers


def _fan_in(params, bias_name):
    return params[bias_name.replace(".bias", ".weight")].shape[0]


class Embedder:
    """Parameters, inference statistics and the cached train-mode forward pass."""

    def __init__(self, config: EmbedderConfig, params=None, buffers=None):
        self.config = config
        if params is None or buffers is None:
            fresh_params, fresh_buffers = init_params(config)
            params = fresh_params if params is None else params
            buffers = fresh_buffers if buffers is None else buffers
        self.params = params
        self.buffers = buffers
        self._cache = None

    def copy(self) -> "Embedder":
        return Embedder(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers))

    def param_names(self, trainable_only=False):
        return [n for n in self.params if not (trainable_only and n in FROZEN)]

    # -- forward ---------------------------------------------------------

    def _stream(self, prefix, x, n_layers, cache):
        for i in range(n_layers):
            z = x @ self.params[f"{prefix}.{i}.weight"] + self.params[f"{prefix}.{i}.bias"]
            if cache is not None:
                cache.append((prefix, i, x, z))
            x = softplus(z)
        return x

    def _backbone(self, inputs, modalities, cache=None):
        cfg = self.config
        n = inputs.shape[0]
        mid = np.empty(inputs.shape[:3] + (cfg.spec_layers[-1],))
        for m, prefix in ((0, "visible"), (1, "thermal")):
            rows = np.flatnonzero(modalities == m)
            if len(rows):
                sub = [] if cache is not None else None
                mid[rows] = self._stream(prefix, inputs[rows], len(cfg.spec_layers), sub)
                if cache is not None:
                    cache.append((prefix, rows, sub))
        shared = [] if cache is not None else None
        fmap = self._stream("shared", mid, len(cfg.shared_layers) + 1, shared)
        if cache is not None:
            cache.append(("shared", None, shared))
        assert fmap.shape[0] == n
        return fmap

    def _batchnorm(self, name, x, train, cache):
        eps = self.config.bn_epsilon
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - mu) * inv
            cache[name] = (xhat, inv)
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            cache[name + ".stats"] = (mu, unbiased)
        else:
            xhat = (x - self.buffers[f"{name}.running_mean"]) / np.sqrt(self.buffers[f"{name}.running_var"] + eps)
        return gamma * xhat + beta

    def forward(self, inputs, modalities, train: bool = True) -> ForwardOutputs:
        """Run the network on ``inputs`` of shape ``(N, H0, W0, C0)``.

        Train mode normalizes with batch statistics, caches activations for
        ``backward`` and updates the running statistics. Eval mode uses the
        running statistics and leaves the model untouched.
        """
        cfg = self.config
        x = np.asarray(inputs, dtype=np.float64)
        mods = np.asarray(modalities, dtype=np.int64)
        if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
            raise ShapeError(f"expected inputs of shape (N, {cfg.input_shape}), got {x.shape}")
        if x.shape[0] == 0 or mods.shape != (x.shape[0],):
            raise ShapeError("batch must be non-empty with one modality tag per sample")
        if not np.all(np.isin(mods, (0, 1))):
            raise ShapeError("modality tags must be 0 (visible) or 1 (thermal)")
        cache = {"backbone": []} if train else None
        fmap = self._backbone(x, mods, cache["backbone"] if train else None)
        f_p_fine = pooling.pool_forward(fmap, cfg.pool_fine)
        f_p_coarse = pooling.pool_forward(fmap, cfg.pool_coarse)
        f_bn = self._batchnorm("bn_fine", f_p_fine, train, cache)
        f_fused = fuse(f_p_coarse, f_bn, cfg.fusion)
        f_bnf = self._batchnorm("bn_fused", f_fused, train, cache)
        logits_fine = f_bn @ self.params["cls_fine.weight"]
        logits_coarse = f_bnf @ self.params["cls_coarse.weight"]
        out = ForwardOutputs(f_p_fine, f_p_coarse, f_bn, f_fused, f_bnf, logits_fine, logits_coarse)
        if train:
            cache.update(inputs=x, modalities=mods, fmap=fmap, outputs=out)
            self._cache = cache
            for name in ("bn_fine", "bn_fused"):
                mu, var = cache[name + ".stats"]
                rm, rv = self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]
                self.buffers[f"{name}.running_mean"] = (1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu
                self.buffers[f"{name}.running_var"] = (1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var
        return out

    # -- backward --------------------------------------------------------

    def _bn_backward(self, name, g, grads):
        xhat, inv = self._cache[name]
        grads[f"{name}.gamma"] = np.sum(g * xhat, axis=0)
        grads[f"{name}.beta"] = np.sum(g, axis=0)
        gx = g * self.params[f"{name}.gamma"]
        n = gx.shape[0]
        return inv / n * (n * gx - gx.sum(axis=0) - xhat * np.sum(gx * xhat, axis=0))

    def _stream_backward(self, layers, g, grads):
        for prefix, i, x, z in reversed(layers):
            g = g * sigmoid(z)
            w = self.params[f"{prefix}.{i}.weight"]
            grads[f"{prefix}.{i}.weight"] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[f"{prefix}.{i}.bias"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ w.T
        return g

    def backward(self, upstream: dict) -> dict:
        """Parameter gradients given ``d loss / d output`` for any subset of the forward outputs."""
        if self._cache is None:
            raise StateError("backward called without a cached train-mode forward pass")
        unknown = set(upstream) - set(OUTPUT_NAMES)
        if unknown:
            raise ShapeError(f"unknown forward outputs {sorted(unknown)}")
        cfg, cache, out = self.config, self._cache, self._cache["outputs"]

        def up(name):
            g = upstream.get(name)
            ref = getattr(out, name)
            if g is None:
                return np.zeros_like(ref)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != ref.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {ref.shape}")
            return g.copy()

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        g_bnf = up("f_bnf")
        g_logits_c = up("logits_coarse")
        grads["cls_coarse.weight"] = out.f_bnf.T @ g_logits_c
        g_bnf += g_logits_c @ self.params["cls_coarse.weight"].T
        g_fused = up("f_fused") + self._bn_backward("bn_fused", g_bnf, grads)

        g_bn = up("f_bn")
        g_pc = up("f_p_coarse")
        if cfg.fusion is Fusion.SUM:
            g_pc += g_fused
            g_bn += g_fused
        else:
            g_pc += g_fused[:, :cfg.coarse_dim]
            g_bn += g_fused[:, cfg.coarse_dim:]
        g_logits_f = up("logits_fine")
        grads["cls_fine.weight"] = out.f_bn.T @ g_logits_f
        g_bn += g_logits_f @ self.params["cls_fine.weight"].T
        g_pf = up("f_p_fine") + self._bn_backward("bn_fine", g_bn, grads)

        fmap = cache["fmap"]
        g_map = pooling.pool_backward(fmap, cfg.pool_fine, g_pf) + pooling.pool_backward(fmap, cfg.pool_coarse, g_pc)

        entries = cache["backbone"]
        _, _, shared_layers = entries[-1]
        g_mid = self._stream_backward(shared_layers, g_map, grads)
        for prefix, rows, layers in entries[:-1]:
            self._stream_backward(layers, g_mid[rows], grads)
        return grads

    # -- inference -------------------------------------------------------

    def extract_features(self, inputs, modalities, which: str = "f_bnf") -> np.ndarray:
        """Eval-mode ``f_bn`` or ``f_bnf`` rows scaled to unit L2 norm.

        All-zero rows stay zero and are reported with a logged warning.
        """
        if which not in ("f_bn", "f_bnf"):
            raise ConfigError(f"which must be 'f_bn' or 'f_bnf', got {which!r}")
        feats = getattr(self.forward(inputs, modalities, train=False), which)
        if not np.all(np.isfinite(feats)):
            bad = np.flatnonzero(~np.all(np.isfinite(feats), axis=1))
            raise NumericalError(f"non-finite feature rows {bad.tolist()}")
        return l2_normalize(feats)


def l2_normalize(feats):
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if np.any(zero):
        logger.warning("zero feature rows left unnormalized: %s", np.flatnonzero(zero).tolist())
    return feats / np.where(norms > 0, norms, 1.0)
