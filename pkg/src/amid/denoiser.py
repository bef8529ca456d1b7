"""Timestep-conditioned convolutional noise predictor.

A plain conv stack: stem conv + SiLU, sinusoidal timestep embedding
broadcast-added channelwise after the first block, then residual
conv + SiLU blocks, then a zero-initialized output conv so the prediction
is exactly zero at init. Images run through the engine in channels-last
(N, H, W, 1) layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .schedule import Latent, NoiseSchedule


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 32
    depth: int = 4
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")

    @property
    def receptive_field(self) -> int:
        # depth + 2 stacked 3x3 convs, each widening the field by 2
        return 2 * (self.depth + 2) + 1

    def param_count(self) -> int:
        c, e, d = self.channels, self.time_embed_dim, self.depth
        stem = 9 * c + c
        time_proj = e * c + c
        blocks = d * (9 * c * c + c)
        out = 9 * c + 1
        return stem + time_proj + blocks + out


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer timestep, shape (dim,)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def init_denoiser(cfg: DenoiserConfig, rng_seed: int) -> dict:
    """Kaiming fan-in Gaussian init; the output conv starts at exactly zero."""
    rng = np.random.default_rng(rng_seed)
    c, e = cfg.channels, cfg.time_embed_dim

    def kaiming(shape, fan_in):
        return ad.Tensor(
            rng.standard_normal(shape, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in)),
            requires_grad=True,
        )

    def zeros(shape):
        return ad.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    params = {
        "conv_in.w": kaiming((3, 3, 1, c), 9),
        "conv_in.b": zeros((c,)),
        "time.w": kaiming((e, c), e),
        "time.b": zeros((c,)),
    }
    for d in range(cfg.depth):
        params[f"block{d}.w"] = kaiming((3, 3, c, c), 9 * c)
        params[f"block{d}.b"] = zeros((c,))
    params["conv_out.w"] = zeros((3, 3, c, 1))
    params["conv_out.b"] = zeros((1,))
    return params


def apply_denoiser(params: dict, x: ad.Tensor, t: int, cfg: DenoiserConfig) -> ad.Tensor:
    """Forward pass on a batch (N, H, W, 1) at a shared timestep."""
    if x.data.ndim != 4 or x.shape[3] != 1:
        raise ValueError(f"denoiser expects (N, H, W, 1) input, got {x.shape}")
    n = x.shape[0]
    emb = ad.Tensor(np.tile(time_embedding(t, cfg.time_embed_dim), (n, 1)))

    h = ad.conv2d(x, params["conv_in.w"])
    h = ad.broadcast_add_channelwise(h, params["conv_in.b"])
    h = ad.silu(h)
    h = ad.broadcast_add_channelwise(h, ad.matmul(emb, params["time.w"]))
    h = ad.broadcast_add_channelwise(h, params["time.b"])
    for d in range(cfg.depth):
        blk = ad.conv2d(h, params[f"block{d}.w"])
        blk = ad.broadcast_add_channelwise(blk, params[f"block{d}.b"])
        h = ad.add(h, ad.silu(blk))
    out = ad.conv2d(h, params["conv_out.w"])
    return ad.broadcast_add_channelwise(out, params["conv_out.b"])


def predict_eps(params: dict, x_t: Latent, t: int, sched: NoiseSchedule, cfg: DenoiserConfig) -> np.ndarray:
    """Predicted noise field for one latent; same shape as the input image.

    Pure function of (params, input): evaluated outside any tape, so the
    result carries no gradient.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside schedule range 1..{sched.T}")
    if x_t.t not in (0, t):
        raise ValueError(f"latent stamped t={x_t.t} but prediction requested at t={t}")
    img = np.asarray(x_t.image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"latent image must be 2D, got shape {img.shape}")
    with ad.no_tape():
        x = ad.Tensor(img[None, :, :, None])
        out = apply_denoiser(params, x, t, cfg)
    return out.data[0, :, :, 0]
