"""Diffusion noise schedule and the measurement-integration step finder.

The schedule holds the cumulative retention products alpha_bar_t together
with the derived coefficients zeta_t = sqrt(alpha_bar_t) (clean-image scale)
and sqrt(1 - alpha_bar_t) (noise scale). A noisy measurement is mapped onto
the trajectory by matching its normalized signal coefficient
1/sqrt(1 + sigma^2) against zeta_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Latent:
    """A 2D field stamped with its diffusion timestep (1-based)."""

    image: np.ndarray
    t: int


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and cumulative coefficients, 1-indexed by timestep.

    Arrays are float64 and indexed [t-1] for step t in 1..T. Immutable after
    construction, so safe to share across threads.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    zeta: np.ndarray
    sqrt_one_minus: np.ndarray

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("need at least 2 per-step variances")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("per-step variances must lie strictly in (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        sched = cls(
            T=beta.size,
            beta=beta,
            alpha_bar=alpha_bar,
            zeta=np.sqrt(alpha_bar),
            sqrt_one_minus=np.sqrt(1.0 - alpha_bar),
        )
        sched._validate()
        return sched

    @classmethod
    def from_alpha_bar(cls, alpha_bar) -> "NoiseSchedule":
        """Build from a hand-set cumulative-product table (toy schedules)."""
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        prev = np.concatenate(([1.0], alpha_bar[:-1]))
        return cls.from_betas(1.0 - alpha_bar / prev)

    def _validate(self):
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ident = self.zeta**2 + self.sqrt_one_minus**2
        if np.max(np.abs(ident - 1.0)) > 1e-6:
            raise ValueError("coefficient identity zeta^2 + (1 - alpha_bar) = 1 violated")

    def fingerprint(self) -> str:
        """Short stable digest of the schedule table."""
        import hashlib

        h = hashlib.sha256(self.beta.tobytes())
        return h.hexdigest()[:16]


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated per-step variances, endpoints inclusive."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


def default_schedule() -> NoiseSchedule:
    return make_linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> Latent:
    """Diffuse a clean image to step t: zeta_t * x0 + sqrt(1 - alpha_bar_t) * eps.

    The unit-Gaussian noise field is injected by the caller so the operation
    stays deterministic and testable.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside schedule range 1..{sched.T}")
    if x0.shape != eps.shape:
        raise ValueError(f"image shape {x0.shape} != noise shape {eps.shape}")
    out = sched.zeta[t - 1] * x0.astype(np.float64) + sched.sqrt_one_minus[t - 1] * eps
    return Latent(image=out.astype(np.float32), t=t)


def find_integration_step(sigma_y: float, sched: NoiseSchedule) -> int:
    """Timestep whose clean-image coefficient best matches a noise level.

    Returns argmin_t |zeta_t - 1/sqrt(1 + sigma_y^2)|, 1-based. Ties break
    toward the smaller t (the less-corrupted interpretation).
    """
    if sigma_y < 0.0:
        raise ValueError(f"sigma_y must be >= 0, got {sigma_y}")
    target = 1.0 / np.sqrt(1.0 + float(sigma_y) ** 2)
    return int(np.argmin(np.abs(sched.zeta - target))) + 1
