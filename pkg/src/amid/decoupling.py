"""Closed-form transport of a latent between timesteps and the decomposition
of its total noise into measurement and injected components.

For t2 > t1 the latent is transported by x_t2 = rho * x_t1 + sqrt(1-rho^2) * eps
with rho = sqrt(alpha_bar_t2 / alpha_bar_t1). Written on top of the clean
image, the total noise at t2 is omega1 * eps0 + omega2 * eps where eps0 is the
scaled measurement noise (n / sigma_y, unit variance) and eps the injected
diffusion noise; omega1^2 + omega2^2 = 1 keeps it unit Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Latent, NoiseSchedule


def weight_arrays(t1, t2, sched: NoiseSchedule):
    """(rho, omega1, omega2) in float64; t1/t2 may be scalars or arrays.

    rho involves a ratio of near-equal cumulative products for adjacent
    steps, so this path is deliberately float64.
    """
    t1 = np.asarray(t1)
    t2 = np.asarray(t2)
    if np.any(t1 < 1) or np.any(t2 > sched.T) or np.any(t2 <= t1):
        raise ValueError(f"need 1 <= t1 < t2 <= {sched.T}, got t1={t1}, t2={t2}")
    ab1 = sched.alpha_bar[t1 - 1]
    ab2 = sched.alpha_bar[t2 - 1]
    rho = np.sqrt(ab2 / ab1)
    omega1 = rho * np.sqrt(1.0 - ab1) / np.sqrt(1.0 - ab2)
    omega2 = np.sqrt(1.0 - rho * rho) / np.sqrt(1.0 - ab2)
    return rho, omega1, omega2


@dataclass(frozen=True)
class MixingWeights:
    """Transport factor and noise-mixing weights for a (t1, t2) pair."""

    t1: int
    t2: int
    rho: float
    omega1: float
    omega2: float

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        gap = abs(self.omega1**2 + self.omega2**2 - 1.0)
        if gap > 1e-9:
            raise ValueError(f"omega1^2 + omega2^2 = 1 violated by {gap:.3e}")


@dataclass(frozen=True)
class NoisePair:
    """Unit-variance noise fields: scaled measurement noise and injected
    diffusion noise."""

    eps0: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        if self.eps0.shape != self.eps.shape:
            raise ValueError(
                f"noise shapes differ: {self.eps0.shape} vs {self.eps.shape}"
            )


def mixing_weights(t1: int, t2: int, sched: NoiseSchedule) -> MixingWeights:
    """Weights for transporting t1 -> t2; requires t2 > t1."""
    rho, omega1, omega2 = weight_arrays(t1, t2, sched)
    return MixingWeights(
        t1=int(t1), t2=int(t2), rho=float(rho), omega1=float(omega1), omega2=float(omega2)
    )


def propagate_latent(x_t1: Latent, w: MixingWeights, eps: np.ndarray) -> Latent:
    """Transport a latent from w.t1 to w.t2 with injected unit noise."""
    if x_t1.t != w.t1:
        raise ValueError(f"latent stamped t={x_t1.t} but weights expect t1={w.t1}")
    if x_t1.image.shape != eps.shape:
        raise ValueError(f"latent shape {x_t1.image.shape} != noise shape {eps.shape}")
    out = w.rho * x_t1.image.astype(np.float64) + np.sqrt(1.0 - w.rho**2) * eps
    return Latent(image=out.astype(np.float32), t=w.t2)


def compose_total_noise(pair: NoisePair, w: MixingWeights) -> np.ndarray:
    """omega1 * eps0 + omega2 * eps; unit variance in expectation."""
    out = w.omega1 * pair.eps0.astype(np.float64) + w.omega2 * pair.eps.astype(np.float64)
    return out.astype(np.float32)
