"""Phantom statistics, the measurement model, noise estimation and dataset
round trips."""

import numpy as np
import pytest
from scipy import stats

from amid.imaging import (
    Dataset,
    DatasetError,
    LumpyParams,
    Measurement,
    OperatorDescriptor,
    dataset_read,
    dataset_write,
    estimate_noise_std,
    integrate_measurement,
    normalize_measurement,
    render_lumps,
    sample_lumpy_background,
    simulate_measurement,
    write_pgm,
)
from amid.schedule import default_schedule, find_integration_step


def test_no_lumps_gives_constant():
    params = LumpyParams(mean_lump_count=0.0, dc_offset=0.25)
    img = sample_lumpy_background(params, 16, 0)
    np.testing.assert_array_equal(img, np.full((16, 16), 0.25, dtype=np.float32))


def test_single_centered_lump_peak():
    img = render_lumps(
        np.array([[16.0, 16.0]]), amplitude=0.3, width=2.0, dc_offset=0.1, size=32
    )
    assert img[16, 16] == pytest.approx(0.4, abs=1e-6)
    assert img.max() == img[16, 16]


def test_lumpy_seed_determinism():
    params = LumpyParams()
    a = sample_lumpy_background(params, 32, 123)
    b = sample_lumpy_background(params, 32, 123)
    c = sample_lumpy_background(params, 32, 124)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_lumpy_ensemble_mean_matches_analytic():
    """Center-pixel ensemble mean vs dc + count * a * 2 pi w^2 / (H W)."""
    size, n = 32, 10000
    params = LumpyParams(mean_lump_count=20.0, lump_amplitude=0.1, lump_width=2.0, dc_offset=0.1)
    vals = np.empty(n)
    for i in range(n):
        vals[i] = sample_lumpy_background(params, size, 50_000 + i)[size // 2, size // 2]
    expected = 0.1 + 20.0 * 0.1 * 2.0 * np.pi * 4.0 / size**2
    se = vals.std(ddof=1) / np.sqrt(n)
    assert abs(vals.mean() - expected) < 3.0 * se


def test_measurement_noiseless_bit_exact(rng):
    x0 = rng.random((16, 16)).astype(np.float32)
    m = simulate_measurement(x0, 0.0, 5)
    assert m.y.tobytes() == x0.tobytes()
    assert m.sigma_y == 0.0


def test_measurement_std_tolerance():
    x0 = np.zeros((256, 256), dtype=np.float32)
    m = simulate_measurement(x0, 0.06, 7)
    assert abs(m.y.std() - 0.06) / 0.06 < 0.01


def test_measurement_seed_contract(rng):
    x0 = rng.random((16, 16)).astype(np.float32)
    a = simulate_measurement(x0, 0.1, 1)
    b = simulate_measurement(x0, 0.1, 2)
    assert a.y.tobytes() != b.y.tobytes()


def test_measurement_residual_normality():
    x0 = np.full((256, 256), 0.5, dtype=np.float32)
    m = simulate_measurement(x0, 0.08, 21)
    resid = (m.y - x0).ravel()
    assert abs(stats.skew(resid)) < 0.05
    assert abs(stats.kurtosis(resid)) < 0.05


# ---------------------------------------------------------------------------
# noise estimation


def test_estimate_constant_image_is_zero():
    assert estimate_noise_std(np.full((32, 32), 0.3)) == 0.0


def test_estimate_pure_noise_calibration():
    rng = np.random.default_rng(9)
    field = rng.standard_normal((256, 256))
    assert abs(estimate_noise_std(field) - 1.0) < 0.05


def test_estimate_on_lumpy_vs_literal_std():
    """High-pass estimate stays near the true sigma; plain std overshoots."""
    params = LumpyParams(mean_lump_count=80.0, lump_amplitude=0.2, lump_width=4.0, dc_offset=0.1)
    errs = []
    for i in range(10):
        x0 = sample_lumpy_background(params, 64, 900 + i)
        m = simulate_measurement(x0, 0.08, 800 + i)
        errs.append(estimate_noise_std(m.y))
        assert estimate_noise_std(m.y, method="literal_std") > 1.5 * 0.08
    mean_est = np.mean(errs)
    assert abs(mean_est - 0.08) / 0.08 < 0.15


def test_estimate_rejects_small_images():
    with pytest.raises(ValueError):
        estimate_noise_std(np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# normalization


def test_normalize_identity_when_noiseless(rng):
    y = rng.random((16, 16)).astype(np.float32)
    out = normalize_measurement(Measurement(y=y, sigma_y=0.0))
    np.testing.assert_array_equal(out.image, y)
    assert out.t == 0


def test_normalize_scale_factor(rng):
    y = np.ones((16, 16), dtype=np.float32)
    out = normalize_measurement(Measurement(y=y, sigma_y=0.06))
    assert out.image[0, 0] == pytest.approx(0.9982050, abs=1e-6)


def test_normalize_coefficient_identity(rng):
    for sigma in rng.uniform(0.0, 3.0, size=20):
        c_signal = 1.0 / np.sqrt(1.0 + sigma**2)
        c_noise = sigma / np.sqrt(1.0 + sigma**2)
        assert c_signal**2 + c_noise**2 == pytest.approx(1.0, abs=1e-12)


def test_integration_matches_schedule_quantization(rng):
    """Implied coefficients at t1 differ from the schedule's by at most the
    local quantization gap."""
    sched = default_schedule()
    for sigma in (0.02, 0.06, 0.1, 0.3):
        t1 = find_integration_step(sigma, sched)
        implied_signal = 1.0 / np.sqrt(1.0 + sigma**2)
        neighbor_gaps = []
        for tn in (t1 - 1, t1 + 1):
            if 1 <= tn <= sched.T:
                neighbor_gaps.append(abs(sched.zeta[tn - 1] - sched.zeta[t1 - 1]))
        quantization = max(neighbor_gaps)
        assert abs(sched.zeta[t1 - 1] - implied_signal) <= quantization
        m = Measurement(y=rng.random((16, 16)).astype(np.float32), sigma_y=float(sigma))
        assert integrate_measurement(m, sched).t == t1


# ---------------------------------------------------------------------------
# dataset persistence


def _write_pairs(tmp_path, n=5):
    rng = np.random.default_rng(0)
    truth = [rng.random((16, 16)).astype(np.float32) for _ in range(n)]
    meas = [simulate_measurement(img, 0.1, i) for i, img in enumerate(truth)]
    path = str(tmp_path / "ds")
    dataset_write(path, truth=truth, measurements=meas, meta={"kind": "measurement", "seed": "0"})
    return path, truth, meas


def test_dataset_round_trip_bit_exact(tmp_path):
    path, truth, meas = _write_pairs(tmp_path, n=100)
    ds = dataset_read(path)
    assert ds.count == 100
    for a, b in zip(ds.truth, truth):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(ds.measurements, meas):
        assert a.y.tobytes() == b.y.tobytes()
        assert a.sigma_y == b.sigma_y


def test_dataset_checksum_mismatch_refused(tmp_path):
    path, _, _ = _write_pairs(tmp_path)
    victim = tmp_path / "ds" / "truth_0001.f32"
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="checksum"):
        dataset_read(path)


def test_dataset_missing_file_refused(tmp_path):
    path, _, _ = _write_pairs(tmp_path)
    (tmp_path / "ds" / "meas_0002.f32").unlink()
    with pytest.raises(DatasetError, match="missing"):
        dataset_read(path)


def test_dataset_partial_loads_without_truth(tmp_path, rng):
    meas = [simulate_measurement(rng.random((16, 16)).astype(np.float32), 0.1, i) for i in range(3)]
    path = str(tmp_path / "only_meas")
    dataset_write(path, measurements=meas, meta={"kind": "measurement"})
    ds = dataset_read(path)
    assert ds.truth is None
    assert len(ds.measurements) == 3


def test_pgm_preview(tmp_path, rng):
    img = rng.random((16, 24)).astype(np.float32)
    out = tmp_path / "p.pgm"
    write_pgm(img, str(out))
    raw = out.read_bytes()
    assert raw.startswith(b"P5\n24 16\n255\n")
    assert len(raw) == len(b"P5\n24 16\n255\n") + 16 * 24


def test_operator_descriptor_identity_only():
    with pytest.raises(ValueError):
        OperatorDescriptor("blur")
