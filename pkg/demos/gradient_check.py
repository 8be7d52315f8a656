"""Finite-difference check of every layer of a small embedder."""
from dgtl.embedder import EmbedderConfig
from dgtl.losses import LossConfig
from dgtl.sampler import SamplerConfig
from dgtl.trainer import TrainConfig, grad_check

cfg = TrainConfig(
    sampler=SamplerConfig(P=3, K=2),
    embedder=EmbedderConfig(input_shape=(3, 3, 2), spec_layers=(8,), shared_layers=(8,), feature_dim=8,
                            num_identities=3),
    loss=LossConfig(arrangement="f2c"),
)
report = grad_check(cfg, num_params=20, seed=1)
for name, err in report.per_param.items():
    print(f"{name:<20} {err:.2e}")
print("passed" if report.passed else "failed", f"worst {report.max_rel_error:.2e} at {report.worst}")
