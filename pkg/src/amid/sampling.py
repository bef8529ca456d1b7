"""Deterministic reverse sampling: DDIM from T down to the integration step,
then one-shot clean recovery.

The reverse update is noise-injection-free: with the predicted noise
eps_hat at step t, the clean estimate is (x_t - sqrt(1-ab_t) * eps_hat)
/ sqrt(ab_t) and the latent at the earlier step re-mixes that estimate with
the same eps_hat. Re-running a chain from a fixed x_T is bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserConfig, apply_denoiser
from .imaging import Measurement, integrate_measurement
from .schedule import Latent, NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-trajectory description; eta is fixed at 0 (deterministic)."""

    num_ddim_steps: int = 50
    eta: float = 0.0
    t1: int = 1

    def __post_init__(self):
        if self.num_ddim_steps < 1:
            raise ValueError(f"num_ddim_steps must be >= 1, got {self.num_ddim_steps}")
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta = 0) is implemented")
        if self.t1 < 1:
            raise ValueError(f"t1 must be >= 1, got {self.t1}")

    def substeps(self, T: int) -> list:
        """Strictly decreasing integer steps from T to t1 inclusive."""
        if self.t1 > T:
            raise ValueError(f"t1={self.t1} exceeds schedule T={T}")
        grid = np.linspace(T, self.t1, self.num_ddim_steps + 1)
        return sorted(set(int(round(v)) for v in grid), reverse=True)


def _ddim_update(x: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule):
    """Core reverse transition, shape-agnostic (single image or a stack)."""
    ab_t = sched.alpha_bar[t - 1]
    ab_p = sched.alpha_bar[t_prev - 1]
    e = np.asarray(eps_hat, dtype=np.float64)
    x0_hat = (x.astype(np.float64) - np.sqrt(1.0 - ab_t) * e) / np.sqrt(ab_t)
    return (np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * e).astype(np.float32)


def _recover(x: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar[t - 1]
    e = np.asarray(eps_hat, dtype=np.float64)
    raw = x.astype(np.float64) / np.sqrt(ab) - (np.sqrt(1.0 - ab) / np.sqrt(ab)) * e
    return raw.astype(np.float32)


def ddim_step(x_t: Latent, t: int, t_prev: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> Latent:
    """One deterministic reverse transition t -> t_prev (t > t_prev)."""
    if not (1 <= t_prev < t <= sched.T):
        raise ValueError(f"need 1 <= t_prev < t <= {sched.T}, got t={t}, t_prev={t_prev}")
    if x_t.t != t:
        raise ValueError(f"latent stamped t={x_t.t} but step expects t={t}")
    if x_t.image.shape != np.shape(eps_hat):
        raise ValueError(f"latent shape {x_t.image.shape} != prediction shape {np.shape(eps_hat)}")
    return Latent(image=_ddim_update(x_t.image, t, t_prev, eps_hat, sched), t=t_prev)


def recover_x0(
    x_t1: Latent, eps_hat_t1: np.ndarray, sched: NoiseSchedule, return_unclamped: bool = False
):
    """One-shot clean recovery from the latent at the integration step.

    Clamped to [0, 1] for metrics and IO; pass return_unclamped=True to also
    get the raw estimate for diagnostics.
    """
    if not 1 <= x_t1.t <= sched.T:
        raise ValueError(f"latent carries invalid timestep {x_t1.t}")
    raw = _recover(x_t1.image, x_t1.t, eps_hat_t1, sched)
    clamped = np.clip(raw, 0.0, 1.0)
    if return_unclamped:
        return clamped, raw
    return clamped


def _predict_batch(params, cfg: DenoiserConfig, batch: np.ndarray, t: int) -> np.ndarray:
    """Noise prediction for a stack (n, H, W) at a shared timestep."""
    with ad.no_tape():
        out = apply_denoiser(params, ad.Tensor(batch[..., None]), t, cfg)
    return out.data[..., 0]


def generate_som_samples(
    params: dict,
    cfg: SamplerConfig,
    count: int,
    rng_seed: int,
    *,
    denoiser_cfg: DenoiserConfig,
    sched: NoiseSchedule,
    size: int,
    chunk: int = 64,
) -> list:
    """Draw `count` object samples: unit-Gaussian x_T, reverse chain to t1,
    one-shot recovery. Deterministic given the seed; ensemble members are
    processed in chunks to bound memory."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    ts = cfg.substeps(sched.T)
    out: list = []
    remaining = count
    while remaining > 0:
        n = min(chunk, remaining)
        x = rng.standard_normal((n, size, size)).astype(np.float32)
        for t, t_prev in zip(ts[:-1], ts[1:]):
            eps_hat = _predict_batch(params, denoiser_cfg, x, t)
            x = _ddim_update(x, t, t_prev, eps_hat, sched)
        eps_t1 = _predict_batch(params, denoiser_cfg, x, ts[-1])
        raw = _recover(x, ts[-1], eps_t1, sched)
        out.extend(np.clip(raw, 0.0, 1.0))
        remaining -= n
    return out


def denoise_measurement(
    params: dict,
    denoiser_cfg: DenoiserConfig,
    m: Measurement,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Map a measurement onto the trajectory and recover the clean image."""
    from .denoiser import predict_eps

    x_t1 = integrate_measurement(m, sched)
    eps_hat = predict_eps(params, x_t1, x_t1.t, sched, denoiser_cfg)
    return recover_x0(x_t1, eps_hat, sched)
