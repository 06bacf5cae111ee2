"""Frame-local 3DMM generator.

Each output frame is ``x_k(t) + net([x_k(t), mean_c])``: the expression source
frame concatenated with the target identity's mean feature (124 channels),
lifted to the hidden width, passed through K=1 residual blocks and projected
back to 62 channels.  Every convolution has kernel size one and the group
norms are per frame, so frame t of the output depends on frame t only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, ShapeError
from .features import FEATURE_DIM, FeatureFrame, FeatureSequence
from .tid_net import TidConfig, _norm_act, he_kernel, residual_block


@dataclass(frozen=True)
class GenConfig:
    in_channels: int = 2 * FEATURE_DIM
    hidden_channels: int = 512
    out_channels: int = FEATURE_DIM
    n_blocks: int = 3
    groupnorm_groups: int = 32
    leaky_slope: float = 0.2
    gn_eps: float = 1e-5

    @property
    def n_layers(self) -> int:
        return self.n_blocks + 2

    def _as_tid(self) -> TidConfig:
        # the residual blocks are the temporal-network blocks with K=1, D=1
        return TidConfig(in_channels=self.in_channels, hidden_channels=self.hidden_channels,
                         out_channels=self.out_channels, blocks=((1, 1),) * self.n_blocks,
                         groupnorm_groups=self.groupnorm_groups, leaky_slope=self.leaky_slope,
                         gn_eps=self.gn_eps)

    def validate(self) -> None:
        if self.in_channels != 2 * self.out_channels:
            raise ConfigError("generator input must be two concatenated feature vectors")
        self._as_tid().validate()


def init(config: GenConfig, seed: int) -> ParamSet:
    config.validate()
    rng = np.random.default_rng(seed)
    H = config.hidden_channels
    p = {"entry.w": he_kernel(rng, 1, config.in_channels, H), "entry.b": np.zeros(H)}
    for i in range(config.n_blocks):
        pre = f"block{i:02d}"
        p[f"{pre}.gn1.g"] = np.ones(H)
        p[f"{pre}.gn1.b"] = np.zeros(H)
        p[f"{pre}.conv1.w"] = he_kernel(rng, 1, H, H)
        p[f"{pre}.conv1.b"] = np.zeros(H)
        p[f"{pre}.gn2.g"] = np.ones(H)
        p[f"{pre}.gn2.b"] = np.zeros(H)
        p[f"{pre}.conv2.w"] = he_kernel(rng, 1, H, H)
        p[f"{pre}.conv2.b"] = np.zeros(H)
    p["exit.gn.g"] = np.ones(H)
    p["exit.gn.b"] = np.zeros(H)
    # zero exit layer: a fresh generator is the identity map on the expression source
    p["exit.w"] = np.zeros((1, H, config.out_channels))
    p["exit.b"] = np.zeros(config.out_channels)
    return ParamSet(p)


def forward(params, expr_source, identity_mean, cfg: GenConfig) -> Tensor:
    """expr_source: (T, 62) or (B, T, 62); identity_mean: (62,) or (B, 62)."""
    x = ad.as_tensor(expr_source)
    m = ad.as_tensor(identity_mean)
    if x.shape[-1] != cfg.out_channels or m.shape[-1] != cfg.out_channels:
        raise ShapeError(f"generator inputs must have {cfg.out_channels} channels")
    if params["entry.w"].shape != (1, cfg.in_channels, cfg.hidden_channels):
        raise ShapeError("parameters do not match the generator configuration")
    if m.ndim == x.ndim - 1:
        if x.ndim == 3 and m.shape[0] != x.shape[0]:
            raise ShapeError("one identity mean per batch item is required")
        m = ad.reshape(m, m.shape[:-1] + (1, m.shape[-1]))
    m = ad.broadcast_to(m, x.shape)
    h = ad.conv1d(ad.concat([x, m], axis=-1), params["entry.w"], params["entry.b"])
    tcfg = cfg._as_tid()
    for i in range(cfg.n_blocks):
        h = residual_block(h, params, f"block{i:02d}", tcfg, 1, 1)
    h = _norm_act(h, params, "exit.gn", tcfg)
    h = ad.conv1d(h, params["exit.w"], params["exit.b"])
    return x + h


def generate(params, expr_source: FeatureSequence, identity_mean, cfg: GenConfig,
             **labels) -> FeatureSequence:
    """Features with the appearance of ``identity_mean`` and the motion of ``expr_source``."""
    mean = identity_mean.values if isinstance(identity_mean, FeatureFrame) else np.asarray(identity_mean)
    with ad.no_grad():
        out = forward(params, expr_source.frames, mean, cfg).data
    return expr_source.with_frames(out, **labels)
