"""Temporal ID network: 62-dim 3DMM frames -> 128-dim unit embeddings per frame.

Layout: 1x1 entry conv, a stack of pre-activation residual blocks
(GN -> LeakyReLU -> conv(K, D) -> GN -> LeakyReLU -> conv(1, 1), identity
skip), then GN -> LeakyReLU -> 1x1 exit conv and row-wise L2 normalisation.
Only the (K, D) convolutions widen the receptive field.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, ShapeError
from .features import FEATURE_DIM, FeatureSequence

PAPER_BLOCKS = ((3, 1), (3, 1), (3, 2), (3, 2), (3, 4), (3, 4), (3, 8), (3, 2), (3, 1))


@dataclass(frozen=True)
class TidConfig:
    in_channels: int = FEATURE_DIM
    hidden_channels: int = 512
    out_channels: int = 128
    blocks: tuple = PAPER_BLOCKS
    groupnorm_groups: int = 32
    leaky_slope: float = 0.2
    gn_eps: float = 1e-5

    @property
    def n_layers(self) -> int:
        return len(self.blocks) + 2

    def validate(self) -> None:
        if min(self.in_channels, self.hidden_channels, self.out_channels) < 1:
            raise ConfigError("channel counts must be positive")
        if self.groupnorm_groups < 1 or self.hidden_channels % self.groupnorm_groups:
            raise ConfigError(f"{self.hidden_channels} hidden channels not divisible into "
                              f"{self.groupnorm_groups} groups")
        for k, d in self.blocks:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"block kernel size must be odd, got {k}")
            if d < 1:
                raise ConfigError(f"block dilation must be >= 1, got {d}")

    def to_text(self) -> str:
        d = asdict(self)
        d["blocks"] = ",".join(f"{k}x{dd}" for k, dd in self.blocks)
        return "".join(f"{k}={v}\n" for k, v in d.items())

    @classmethod
    def from_text(cls, text: str) -> "TidConfig":
        kv = parse_kv(text)
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in kv.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "blocks":
                out[key] = tuple(tuple(int(x) for x in b.split("x")) for b in val.split(",") if b)
            elif key in ("leaky_slope", "gn_eps"):
                out[key] = float(val)
            else:
                out[key] = int(val)
        return cls(**out)


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line {line!r}")
        out[key.strip()] = val.strip()
    return out


def default_config() -> TidConfig:
    return TidConfig()


def receptive_field(config: TidConfig) -> int:
    return 1 + sum((k - 1) * d for k, d in config.blocks)


def he_kernel(rng, k, cin, cout):
    return rng.normal(0.0, np.sqrt(2.0 / (k * cin)), size=(k, cin, cout))


def init(config: TidConfig, seed: int) -> ParamSet:
    config.validate()
    rng = np.random.default_rng(seed)
    H = config.hidden_channels
    p = {
        "entry.w": he_kernel(rng, 1, config.in_channels, H),
        "entry.b": np.zeros(H),
    }
    for i, (k, _) in enumerate(config.blocks):
        pre = f"block{i:02d}"
        p[f"{pre}.gn1.g"] = np.ones(H)
        p[f"{pre}.gn1.b"] = np.zeros(H)
        p[f"{pre}.conv1.w"] = he_kernel(rng, k, H, H)
        p[f"{pre}.conv1.b"] = np.zeros(H)
        p[f"{pre}.gn2.g"] = np.ones(H)
        p[f"{pre}.gn2.b"] = np.zeros(H)
        p[f"{pre}.conv2.w"] = he_kernel(rng, 1, H, H)
        p[f"{pre}.conv2.b"] = np.zeros(H)
    p["exit.gn.g"] = np.ones(H)
    p["exit.gn.b"] = np.zeros(H)
    p["exit.w"] = he_kernel(rng, 1, H, config.out_channels)
    p["exit.b"] = np.zeros(config.out_channels)
    return ParamSet(p)


def _norm_act(x, params, pre, cfg):
    x = ad.group_norm(x, cfg.groupnorm_groups, params[pre + ".g"], params[pre + ".b"],
                      eps=cfg.gn_eps, over_time=False)
    return ad.leaky_relu(x, cfg.leaky_slope)


def residual_block(x, params, pre, cfg, k, d):
    h = _norm_act(x, params, pre + ".gn1", cfg)
    h = ad.conv1d(h, params[pre + ".conv1.w"], params[pre + ".conv1.b"], dilation=d)
    h = _norm_act(h, params, pre + ".gn2", cfg)
    h = ad.conv1d(h, params[pre + ".conv2.w"], params[pre + ".conv2.b"])
    return x + h


def _check_params(params, cfg):
    w = params.get("entry.w") if hasattr(params, "get") else None
    if w is None or w.shape != (1, cfg.in_channels, cfg.hidden_channels):
        raise ShapeError("parameters do not match the network configuration")
    if params["exit.w"].shape != (1, cfg.hidden_channels, cfg.out_channels):
        raise ShapeError("exit layer does not match the network configuration")
    for i, (k, _) in enumerate(cfg.blocks):
        key = f"block{i:02d}.conv1.w"
        if key not in params or params[key].shape[0] != k:
            raise ShapeError(f"missing or mis-shaped {key}")


def forward(params, x, cfg: TidConfig) -> Tensor:
    """Differentiable forward pass on (T, 62) or (B, T, 62) inputs."""
    _check_params(params, cfg)
    x = ad.as_tensor(x)
    if x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, expected {cfg.in_channels}")
    h = ad.conv1d(x, params["entry.w"], params["entry.b"])
    for i, (k, d) in enumerate(cfg.blocks):
        h = residual_block(h, params, f"block{i:02d}", cfg, k, d)
    h = _norm_act(h, params, "exit.gn", cfg)
    h = ad.conv1d(h, params["exit.w"], params["exit.b"])
    return ad.l2_normalize(h, axis=-1)


@dataclass(frozen=True)
class EmbeddingSequence:
    vectors: np.ndarray
    video_id: str = ""
    identity_id: str | None = None

    def __len__(self):
        return self.vectors.shape[0]


def embed(params, seq, cfg: TidConfig, stats=None) -> EmbeddingSequence:
    """Embed one sequence.  ``stats`` (FeatureStats) standardises it first."""
    x = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    if stats is not None:
        x = stats.apply(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"expected (T, {cfg.in_channels}) frames, got {x.shape}")
    with ad.no_grad():
        y = forward(params, x, cfg).data
    vid = getattr(seq, "video_id", "")
    ident = getattr(seq, "identity_id", None)
    return EmbeddingSequence(y, video_id=vid, identity_id=ident)


def embed_batch(params, x: np.ndarray, cfg: TidConfig) -> np.ndarray:
    """(B, T, 62) standardised frames -> (B, T, out) embeddings, no graph."""
    with ad.no_grad():
        return forward(params, x, cfg).data


def save(path_prefix, params: ParamSet, cfg: TidConfig, extra: dict | None = None) -> None:
    """Write ``<prefix>.idrc`` (tensors) and ``<prefix>.cfg`` (key=value)."""
    prefix = Path(path_prefix)
    tensors = dict(params.arrays())
    if extra:
        tensors.update(extra)
    ad.save_checkpoint(prefix.with_suffix(".idrc"), tensors)
    prefix.with_suffix(".cfg").write_text(cfg.to_text(), encoding="utf-8")
