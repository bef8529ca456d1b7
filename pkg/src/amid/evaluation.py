"""Task-based and statistical image-quality evaluation.

Covers signal-known-exactly patch construction, the Hotelling observer with
rank-based AUC, windowed SSIM and its cross-pair density, and a spectral
high-frequency energy fraction used by the consistency-weight ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import rankdata


@dataclass(frozen=True)
class SKETask:
    """Signal-known-exactly detection task: a centered Gaussian bump of
    known amplitude added to background patches.

    The width is either a plain pixel std ("pixels") or a dimensionless
    value on a 10-pixel reference scale that shrinks with the patch
    ("relative"): width_px = width * 10 * patch_size / 64.
    """

    patch_size: int = 32
    signal_width: float = 0.3
    signal_amplitude: float = 0.32
    width_unit: str = "relative"

    def __post_init__(self):
        if self.signal_amplitude <= 0.0:
            raise ValueError("signal_amplitude must be > 0")
        if self.width_unit not in ("relative", "pixels"):
            raise ValueError(f"unknown width_unit {self.width_unit!r}")
        if self.width_pixels * 6 > self.patch_size:
            raise ValueError("signal does not fit within the patch")

    @property
    def width_pixels(self) -> float:
        if self.width_unit == "pixels":
            return self.signal_width
        return self.signal_width * 10.0 * self.patch_size / 64.0


def ske_signal(task: SKETask) -> np.ndarray:
    """Signal profile: peak = amplitude exactly at the center pixel."""
    p = task.patch_size
    c = p // 2
    rows = np.arange(p, dtype=np.float64)
    d2 = (rows[:, None] - c) ** 2 + (rows[None, :] - c) ** 2
    return (task.signal_amplitude * np.exp(-d2 / (2.0 * task.width_pixels**2))).astype(
        np.float32
    )


def make_ske_patches(
    backgrounds: list,
    task: SKETask,
    rng_seed: int,
    n_per_class: int,
    paired: bool = False,
):
    """Trim random patches and build balanced signal-present/absent classes.

    Returns (present, absent), each (n, p, p) float32. With paired=True the
    present class reuses the absent patches, so present - absent is exactly
    the signal profile.
    """
    if not backgrounds:
        raise ValueError("no backgrounds given")
    p = task.patch_size
    h, w = backgrounds[0].shape
    if p > h or p > w:
        raise ValueError(f"patch size {p} exceeds background shape {(h, w)}")
    rng = np.random.default_rng(rng_seed)
    signal = ske_signal(task)

    def trim(n):
        out = np.empty((n, p, p), dtype=np.float32)
        idx = rng.integers(0, len(backgrounds), size=n)
        rs = rng.integers(0, h - p + 1, size=n)
        cs = rng.integers(0, w - p + 1, size=n)
        for i, (b, r, c) in enumerate(zip(idx, rs, cs)):
            out[i] = backgrounds[b][r : r + p, c : c + p]
        return out

    absent = trim(n_per_class)
    base = absent if paired else trim(n_per_class)
    present = base + signal[None]
    return present, absent


@dataclass(frozen=True)
class ObserverResult:
    """Linear-observer outputs on a labeled patch set."""

    template: np.ndarray
    stats_present: np.ndarray
    stats_absent: np.ndarray
    auc: float
    snr: float

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc outside [0, 1]: {self.auc}")


def observer_statistics(template: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Inner product of the template with each patch."""
    flat = patches.reshape(patches.shape[0], -1).astype(np.float64)
    return flat @ template.reshape(-1).astype(np.float64)


def _observer_result(template, present, absent) -> ObserverResult:
    sp = observer_statistics(template, present)
    sa = observer_statistics(template, absent)
    pooled = 0.5 * (sp.var(ddof=1) + sa.var(ddof=1))
    snr = float((sp.mean() - sa.mean()) / np.sqrt(pooled)) if pooled > 0 else 0.0
    return ObserverResult(
        template=template,
        stats_present=sp,
        stats_absent=sa,
        auc=auc(sp, sa),
        snr=snr,
    )


def hotelling_observer(present: np.ndarray, absent: np.ndarray, reg: float | str = "auto") -> ObserverResult:
    """Linear template S^-1 (mean difference) from labeled training patches.

    S is the average of the two class covariances. reg="auto" adds
    gamma * I with gamma = 1e-3 * trace(S) / dim, which keeps the solve
    well-posed when patches are scarce relative to their dimension; reg=0
    requires a nonsingular S.
    """
    if present.ndim != 3 or absent.ndim != 3 or present.shape[1:] != absent.shape[1:]:
        raise ValueError(
            f"expected (n, p, p) patch stacks of equal patch size, got "
            f"{present.shape} and {absent.shape}"
        )
    if present.shape[0] < 2 or absent.shape[0] < 2:
        raise ValueError("each class needs at least 2 patches to estimate covariance")
    shape = present.shape[1:]
    fp = present.reshape(present.shape[0], -1).astype(np.float64)
    fa = absent.reshape(absent.shape[0], -1).astype(np.float64)
    delta = fp.mean(axis=0) - fa.mean(axis=0)
    s = 0.5 * (np.cov(fp, rowvar=False) + np.cov(fa, rowvar=False))
    dim = s.shape[0]
    gamma = 1e-3 * np.trace(s) / dim if reg == "auto" else float(reg)
    if gamma > 0.0:
        s = s + gamma * np.eye(dim)
    try:
        template = np.linalg.solve(s, delta)
        if gamma == 0.0:
            np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise ValueError(
            "class covariance is singular; rerun with reg='auto' or a positive "
            "regularization"
        ) from None
    template = template.reshape(shape)
    return _observer_result(template, present, absent)


def apply_observer(template: np.ndarray, present: np.ndarray, absent: np.ndarray) -> ObserverResult:
    """Evaluate an existing template on held-out labeled patches."""
    return _observer_result(template, present, absent)


def auc(statistics_present, statistics_absent) -> float:
    """Rank-based area under the ROC curve; ties earn half credit."""
    sp = np.asarray(statistics_present, dtype=np.float64)
    sa = np.asarray(statistics_absent, dtype=np.float64)
    if sp.size == 0 or sa.size == 0:
        raise ValueError("both classes must be nonempty")
    ranks = rankdata(np.concatenate([sp, sa]))
    r_present = ranks[: sp.size].sum()
    u = r_present - sp.size * (sp.size + 1) / 2.0
    return float(u / (sp.size * sa.size))


def roc_points(statistics_present, statistics_absent):
    """(fpr, tpr) arrays swept over all distinct thresholds, ends included."""
    sp = np.asarray(statistics_present, dtype=np.float64)
    sa = np.asarray(statistics_absent, dtype=np.float64)
    if sp.size == 0 or sa.size == 0:
        raise ValueError("both classes must be nonempty")
    thresholds = np.unique(np.concatenate([sp, sa]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for th in thresholds:
        tpr.append(np.mean(sp >= th))
        fpr.append(np.mean(sa >= th))
    return np.asarray(fpr), np.asarray(tpr)


# ---------------------------------------------------------------------------
# SSIM with a 7x7 Gaussian window (sigma 1.5) on unit dynamic range


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _ssim_window()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity over the valid window region."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < _WINDOW.shape[0]:
        raise ValueError(f"image smaller than the {_WINDOW.shape[0]}x{_WINDOW.shape[0]} window")
    a = a.astype(np.float64)
    b = b.astype(np.float64)

    def filt(x):
        return convolve2d(x, _WINDOW, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a**2 + mu_b**2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class SSIMPdf:
    """Normalized histogram of SSIM values over random cross-pairs."""

    bin_edges: np.ndarray
    densities: np.ndarray
    sample_count: int

    def l1_distance(self, other: "SSIMPdf") -> float:
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise ValueError("histograms use different bin edges")
        widths = np.diff(self.bin_edges)
        return float(np.sum(np.abs(self.densities - other.densities) * widths))


def ssim_pdf(set_a: list, set_b: list, pairs: int, rng_seed: int, bins: int = 40) -> SSIMPdf:
    """Density of SSIM over uniformly random cross-pairs of two ensembles.

    Bins are fixed on [-1, 1] so densities from different ensemble pairs are
    directly comparable. When both arguments are the same ensemble object,
    self-pairs are excluded (unless it is a singleton, which collapses to a
    point mass at 1).
    """
    if not set_a or not set_b:
        raise ValueError("both ensembles must be nonempty")
    same = set_a is set_b and len(set_a) > 1
    rng = np.random.default_rng(rng_seed)
    values = np.empty(pairs, dtype=np.float64)
    for k in range(pairs):
        i = int(rng.integers(0, len(set_a)))
        j = int(rng.integers(0, len(set_b)))
        while same and j == i:
            j = int(rng.integers(0, len(set_b)))
        values[k] = ssim(set_a[i], set_b[j])
    densities, edges = np.histogram(values, bins=bins, range=(-1.0, 1.0), density=True)
    return SSIMPdf(bin_edges=edges, densities=densities, sample_count=pairs)


# ---------------------------------------------------------------------------
# spectral high-frequency energy


def highfreq_band_mask(h: int, w: int, cutoff: float = 0.25) -> np.ndarray:
    """Frequency-grid mask of radial frequency above `cutoff` cycles/pixel."""
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return r > cutoff


def highfreq_residual_energy(ensemble: list, cutoff: float = 0.25) -> float:
    """Mean fraction of spectral energy above half the Nyquist frequency."""
    if not ensemble:
        raise ValueError("empty ensemble")
    h, w = ensemble[0].shape
    mask = highfreq_band_mask(h, w, cutoff)
    fracs = []
    for img in ensemble:
        power = np.abs(np.fft.fft2(img.astype(np.float64))) ** 2
        total = power.sum()
        fracs.append(power[mask].sum() / total if total > 0.0 else 0.0)
    return float(np.mean(fracs))
