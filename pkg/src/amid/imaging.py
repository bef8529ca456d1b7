"""Measurement model, synthetic phantom generation, noise estimation and
dataset persistence.

Images are 2D float32 arrays with intensities nominally in [0, 1]. The
imaging operator is the identity: measurements are the object plus i.i.d.
Gaussian noise of known or estimated standard deviation on the same
intensity scale.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .schedule import Latent

# Gaussian quantile at 3/4; median(|N(0, s^2)|) = s * MAD_TO_STD^-1
_MAD_SCALE = 0.6744897501960817


def validate_image(img: np.ndarray, what: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"{what} must be 2D with height, width >= 8, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{what} holds non-finite values")
    return img


@dataclass(frozen=True)
class OperatorDescriptor:
    """Imaging-operator tag. Only the identity is implemented; the field
    exists so non-trivial operators have a seam to plug into."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind != "identity":
            raise ValueError(f"unsupported operator kind {self.kind!r}")


@dataclass(frozen=True)
class Measurement:
    """Noisy observation with its noise level and operator descriptor."""

    y: np.ndarray
    sigma_y: float
    operator: OperatorDescriptor = field(default_factory=OperatorDescriptor)

    def __post_init__(self):
        if self.sigma_y < 0.0:
            raise ValueError(f"sigma_y must be >= 0, got {self.sigma_y}")


@dataclass(frozen=True)
class LumpyParams:
    """Poisson count of Gaussian blobs at uniform positions on a DC baseline."""

    mean_lump_count: float = 80.0
    lump_amplitude: float = 0.2
    lump_width: float = 4.0
    dc_offset: float = 0.1

    def __post_init__(self):
        for name in ("mean_lump_count", "lump_amplitude", "lump_width", "dc_offset"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


def render_lumps(
    centers: np.ndarray, amplitude: float, width: float, dc_offset: float, size: int
) -> np.ndarray:
    """Sum of Gaussian blobs a*exp(-|r - c|^2 / (2 w^2)) on a constant baseline.

    centers: (n, 2) array of (row, col) positions; may be empty.
    """
    img = np.full((size, size), dc_offset, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if centers.shape[0] and amplitude > 0.0 and width > 0.0:
        rows = np.arange(size, dtype=np.float64)
        d2 = (
            (rows[None, :, None] - centers[:, 0, None, None]) ** 2
            + (rows[None, None, :] - centers[:, 1, None, None]) ** 2
        )
        img += amplitude * np.exp(-d2 / (2.0 * width**2)).sum(axis=0)
    return img.astype(np.float32)


def sample_lumpy_background(
    params: LumpyParams, size: int, rng_seed: int, return_clip_fraction: bool = False
):
    """Draw one lumpy background, clipped to [0, 1].

    Deterministic given the seed: blob count ~ Poisson(mean_lump_count),
    centers uniform over the field. Optionally also returns the fraction of
    pixels that hit the clip.
    """
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    rng = np.random.default_rng(rng_seed)
    count = rng.poisson(params.mean_lump_count)
    centers = rng.uniform(0.0, size, size=(count, 2))
    img = render_lumps(centers, params.lump_amplitude, params.lump_width, params.dc_offset, size)
    clipped = np.clip(img, 0.0, 1.0)
    if return_clip_fraction:
        frac = float(np.mean(clipped != img))
        return clipped, frac
    return clipped


def simulate_measurement(x0: np.ndarray, sigma: float, rng_seed: int) -> Measurement:
    """y = x0 + sigma * eps with unit Gaussian i.i.d. pixel noise."""
    x0 = validate_image(x0, "x0")
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return Measurement(y=x0.astype(np.float32).copy(), sigma_y=0.0)
    rng = np.random.default_rng(rng_seed)
    eps = rng.standard_normal(x0.shape)
    y = (x0.astype(np.float64) + sigma * eps).astype(np.float32)
    return Measurement(y=y, sigma_y=float(sigma))


def estimate_noise_std(y: np.ndarray, method: str = "highpass_mad") -> float:
    """Estimate the pixel-noise standard deviation of an image.

    "highpass_mad" (default): median absolute deviation of the finest
    diagonal high-pass residual d = (y00 - y01 - y10 + y11) / 2, whose gain
    on white noise is exactly 1 while smooth content is suppressed.

    "literal_std": plain std(y). This conflates object variance with noise
    variance and overestimates on structured images; it is kept because the
    integration procedure is stated in terms of it.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 16 or y.shape[1] < 16:
        raise ValueError(f"noise estimation needs at least 16x16, got {y.shape}")
    if method == "literal_std":
        return float(y.std())
    if method != "highpass_mad":
        raise ValueError(f"unknown method {method!r}")
    d = 0.5 * (y[:-1, :-1] - y[:-1, 1:] - y[1:, :-1] + y[1:, 1:])
    return float(np.median(np.abs(d)) / _MAD_SCALE)


def normalize_measurement(m: Measurement) -> Latent:
    """Scale y by 1/sqrt(1 + sigma_y^2) so that the implied clean-image and
    noise coefficients are unit-norm, matching the diffusion form.

    The result carries timestep 0, meaning "not yet assigned": the caller
    stamps it with the integration step.
    """
    scale = 1.0 / np.sqrt(1.0 + m.sigma_y**2)
    return Latent(image=(m.y.astype(np.float64) * scale).astype(np.float32), t=0)


def integrate_measurement(m: Measurement, sched) -> Latent:
    """Normalize a measurement and stamp it at its matched timestep."""
    from .schedule import find_integration_step

    t1 = find_integration_step(m.sigma_y, sched)
    return Latent(image=normalize_measurement(m).image, t=t1)


# ---------------------------------------------------------------------------
# dataset persistence: raw little-endian float32 planes + plain-text manifest

_FORMAT = "amid-dataset-v1"
_ROLES = ("truth", "meas", "sample")


@dataclass
class Dataset:
    """In-memory view of a dataset directory.

    Any role may be absent; a measurement set without ground truth loads
    with truth = None.
    """

    meta: dict
    truth: list | None = None
    measurements: list | None = None
    samples: list | None = None

    @property
    def count(self) -> int:
        return int(self.meta["count"])


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_write(
    path: str,
    *,
    truth: list | None = None,
    measurements: list | None = None,
    samples: list | None = None,
    meta: dict | None = None,
) -> None:
    """Write images and manifest; the round trip is bit-exact for float32."""
    roles = {
        "truth": truth,
        "meas": [m.y for m in measurements] if measurements else None,
        "sample": samples,
    }
    present = {k: v for k, v in roles.items() if v}
    if not present:
        raise ValueError("dataset_write: nothing to write")
    counts = {len(v) for v in present.values()}
    if len(counts) != 1:
        raise ValueError(f"dataset_write: role counts differ: { {k: len(v) for k, v in present.items()} }")
    count = counts.pop()
    shapes = {v[0].shape for v in present.values()}
    if len(shapes) != 1:
        raise ValueError("dataset_write: roles have differing image shapes")
    h, w = shapes.pop()

    os.makedirs(path, exist_ok=True)
    lines = [f"format = {_FORMAT}"]
    m = dict(meta or {})
    if measurements:
        m.setdefault("sigma", repr(float(measurements[0].sigma_y)))
        m.setdefault("operator", measurements[0].operator.kind)
    m.setdefault("normalization", "none")
    m["count"] = str(count)
    m["height"] = str(h)
    m["width"] = str(w)
    for key in sorted(m):
        lines.append(f"{key} = {m[key]}")

    file_lines = []
    for role in _ROLES:
        images = present.get(role)
        if not images:
            continue
        for i, img in enumerate(images):
            img = validate_image(img, f"{role}[{i}]")
            name = f"{role}_{i:04d}.f32"
            fp = os.path.join(path, name)
            with open(fp, "wb") as f:
                f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
            file_lines.append(f"file.{name}.sha256 = {_sha256(fp)}")
    lines.extend(sorted(file_lines))
    tmp = os.path.join(path, "manifest.txt.tmp")
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(path, "manifest.txt"))


class DatasetError(RuntimeError):
    pass


def dataset_read(path: str, verify: bool = True) -> Dataset:
    """Load a dataset directory, refusing on missing files or bad checksums."""
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest):
        raise DatasetError(f"missing manifest: {manifest}")
    meta: dict = {}
    files: dict = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(" = ")
            if not _:
                raise DatasetError(f"malformed manifest line: {line!r}")
            if key.startswith("file.") and key.endswith(".sha256"):
                files[key[len("file."):-len(".sha256")]] = value
            else:
                meta[key] = value
    if meta.get("format") != _FORMAT:
        raise DatasetError(f"unsupported dataset format {meta.get('format')!r}")
    h, w = int(meta["height"]), int(meta["width"])

    by_role: dict[str, dict[int, np.ndarray]] = {r: {} for r in _ROLES}
    for name, digest in files.items():
        fp = os.path.join(path, name)
        if not os.path.isfile(fp):
            raise DatasetError(f"missing data file: {fp}")
        if verify and _sha256(fp) != digest:
            raise DatasetError(f"checksum mismatch for {fp}; refusing to load")
        role, _, rest = name.partition("_")
        if role not in _ROLES:
            raise DatasetError(f"unknown role in file name {name!r}")
        idx = int(rest.split(".")[0])
        arr = np.frombuffer(open(fp, "rb").read(), dtype="<f4").reshape(h, w)
        by_role[role][idx] = arr.astype(np.float32)

    def ordered(role):
        d = by_role[role]
        if not d:
            return None
        if sorted(d) != list(range(len(d))):
            raise DatasetError(f"non-contiguous indices for role {role!r}")
        return [d[i] for i in range(len(d))]

    truth = ordered("truth")
    samples = ordered("sample")
    meas_imgs = ordered("meas")
    measurements = None
    if meas_imgs is not None:
        sigma = float(meta.get("sigma", "0"))
        op = OperatorDescriptor(meta.get("operator", "identity"))
        measurements = [Measurement(y=img, sigma_y=sigma, operator=op) for img in meas_imgs]
    return Dataset(meta=meta, truth=truth, measurements=measurements, samples=samples)


def write_pgm(img: np.ndarray, path: str) -> None:
    """8-bit binary portable graymap preview of a [0, 1] image."""
    img = validate_image(img, "preview")
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(q.tobytes())
