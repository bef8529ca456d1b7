"""Training objective and loop.

The loss has two mean-reduced terms. The first matches the predicted total
noise at t2 against a mixed target omega1 * SG(eps_hat_t1) + omega2 * eps,
where the t1 prediction is evaluated under stop-gradient so it acts as a
fixed reference within the step. The second is a consistency term on two
forward passes of the same latent with independently injected noises: the
prediction difference must follow omega2 times the injected-noise
difference, which cancels the shared component tied to x_t1 and damps
high-frequency residual.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamHyper, AdamState, Tensor
from .decoupling import MixingWeights, mixing_weights
from .denoiser import DenoiserConfig, apply_denoiser
from .imaging import normalize_measurement
from .schedule import NoiseSchedule, find_integration_step


class TrainingAbort(RuntimeError):
    """Raised when the loss becomes non-finite; carries step diagnostics."""


@dataclass(frozen=True)
class LossTerms:
    l1: float
    l2: float
    lam: float

    @property
    def total(self) -> float:
        return self.l1 + self.lam * self.l2


@dataclass
class TrainState:
    """Everything a run carries between steps; resumable from a checkpoint."""

    params: dict
    opt: AdamState
    step_count: int
    rng: np.random.Generator
    config_fingerprint: str
    denoiser_cfg: DenoiserConfig
    hyper: AdamHyper


def init_train_state(
    cfg: DenoiserConfig,
    hyper: AdamHyper,
    init_seed: int,
    train_seed: int,
    config_fingerprint: str,
) -> TrainState:
    from .denoiser import init_denoiser

    params = init_denoiser(cfg, init_seed)
    return TrainState(
        params=params,
        opt=AdamState.for_params(params),
        step_count=0,
        rng=np.random.default_rng(train_seed),
        config_fingerprint=config_fingerprint,
        denoiser_cfg=cfg,
        hyper=hyper,
    )


def _require_constant(t, what: str):
    if isinstance(t, Tensor):
        tape = ad.active_tape()
        if tape is not None and tape.records(t):
            raise AssertionError(
                f"{what} is connected to the active tape; it must be evaluated "
                "under stop-gradient"
            )
        return t.data
    return np.asarray(t, dtype=np.float32)


def ambient_l1(eps_tot_hat: Tensor, eps_t1_hat_sg, eps: np.ndarray, w: MixingWeights) -> Tensor:
    """Mean squared gap between the t2 prediction and the mixed target.

    Gradient flows only through eps_tot_hat; the t1 reference and the
    injected noise are constants.
    """
    sg = _require_constant(eps_t1_hat_sg, "the t1 reference prediction")
    target = Tensor(
        np.float32(w.omega1) * sg + np.float32(w.omega2) * np.asarray(eps, dtype=np.float32)
    )
    return ad.mse(eps_tot_hat, target)


def ambient_l2(
    eps_tot_hat_a: Tensor,
    eps_tot_hat_b: Tensor,
    eps_a: np.ndarray,
    eps_b: np.ndarray,
    w: MixingWeights,
) -> Tensor:
    """Mean squared inconsistency between two same-latent passes along the
    injected-noise direction."""
    if eps_tot_hat_a.shape != eps_tot_hat_b.shape:
        raise ValueError(
            f"prediction shapes differ: {eps_tot_hat_a.shape} vs {eps_tot_hat_b.shape}"
        )
    diff = ad.sub(eps_tot_hat_a, eps_tot_hat_b)
    target = Tensor(
        np.float32(w.omega2)
        * (np.asarray(eps_a, dtype=np.float32) - np.asarray(eps_b, dtype=np.float32))
    )
    return ad.mse(diff, target)


def _batch_t1(batch, sched: NoiseSchedule) -> int:
    sigmas = {m.sigma_y for m in batch}
    if len(sigmas) != 1:
        raise ValueError(f"batch mixes noise levels {sorted(sigmas)}; split by sigma")
    return find_integration_step(sigmas.pop(), sched)


def training_step(
    state: TrainState, batch: list, sched: NoiseSchedule, lam: float
) -> tuple[TrainState, LossTerms]:
    """One optimizer step on a batch of measurements.

    Normalizes the batch onto the trajectory at t1, samples one shared
    t2 uniform on (t1, T], transports the batch there twice with
    independent injected noises, and descends l1 + lam * l2. l1 is averaged
    over the two passes so neither is wasted. Deterministic given the
    carried rng state.
    """
    if not batch:
        raise ValueError("empty batch")
    t1 = _batch_t1(batch, sched)
    if t1 >= sched.T:
        raise ValueError(f"integration step t1={t1} leaves no room for t2 <= T={sched.T}")
    x_t1 = np.stack([normalize_measurement(m).image for m in batch])[..., None]

    rng = state.rng
    t2 = int(rng.integers(t1 + 1, sched.T + 1))
    w = mixing_weights(t1, t2, sched)
    eps_a = rng.standard_normal(x_t1.shape, dtype=np.float32)
    eps_b = rng.standard_normal(x_t1.shape, dtype=np.float32)
    root = np.float32(np.sqrt(1.0 - w.rho**2))
    x_a = np.float32(w.rho) * x_t1 + root * eps_a
    x_b = np.float32(w.rho) * x_t1 + root * eps_b

    try:
        with ad.no_tape():
            eps_t1_hat = apply_denoiser(state.params, Tensor(x_t1), t1, state.denoiser_cfg)
        with ad.Tape() as tape:
            a_hat = apply_denoiser(state.params, Tensor(x_a), t2, state.denoiser_cfg)
            b_hat = apply_denoiser(state.params, Tensor(x_b), t2, state.denoiser_cfg)
            l1 = ad.mul_scalar(
                ad.add(
                    ambient_l1(a_hat, eps_t1_hat, eps_a, w),
                    ambient_l1(b_hat, eps_t1_hat, eps_b, w),
                ),
                0.5,
            )
            l2 = ambient_l2(a_hat, b_hat, eps_a, eps_b, w)
            total = ad.add(l1, ad.mul_scalar(l2, lam))
    except ValueError as exc:
        if "non-finite" in str(exc):
            raise TrainingAbort(
                f"non-finite loss at step {state.step_count} (t1={t1}, t2={t2}): {exc}"
            ) from exc
        raise

    grads = ad.backward(tape, total)
    named = {name: grads.get(p) for name, p in state.params.items()}
    try:
        params, opt = ad.sgd_adam_step(state.params, named, state.opt, state.hyper)
    except ValueError as exc:
        raise TrainingAbort(f"step {state.step_count} (t1={t1}, t2={t2}): {exc}") from exc

    terms = LossTerms(l1=float(l1.data), l2=float(l2.data), lam=float(lam))
    new_state = replace(state, params=params, opt=opt, step_count=state.step_count + 1)
    return new_state, terms


def run_training(
    state: TrainState,
    measurements: list,
    sched: NoiseSchedule,
    lam: float,
    batch_size: int,
    steps: int,
    log_every: int = 25,
    on_step=None,
) -> tuple[TrainState, list]:
    """Drive `steps` training steps with batches drawn by the carried rng.

    Returns the final state and a log of dict rows
    (step, l1, l2, total, wall_time_s); one row per `log_every` steps and
    always the final step.
    """
    n = len(measurements)
    if n == 0 and steps > 0:
        raise ValueError("no measurements to train on")
    log: list = []
    start = time.perf_counter()
    for i in range(steps):
        idx = state.rng.integers(0, n, size=batch_size)
        batch = [measurements[j] for j in idx]
        state, terms = training_step(state, batch, sched, lam)
        if on_step is not None:
            on_step(state.step_count, terms)
        if state.step_count % log_every == 0 or i == steps - 1:
            log.append(
                {
                    "step": state.step_count,
                    "l1": terms.l1,
                    "l2": terms.l2,
                    "total": terms.total,
                    "wall_time_s": time.perf_counter() - start,
                }
            )
    return state, log


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config fingerprint, counters, rng state,
# tensor table. Written atomically; bit-exact round trip.

_MAGIC = b"AMIDCKP1"
_VERSION = 1
_KINDS = {"param": 0, "m": 1, "v": 2}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


class CheckpointError(RuntimeError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, kind: int, arr: np.ndarray) -> bytes:
    head = _pack_str(name) + struct.pack("<BI", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(state: TrainState, path: str) -> None:
    import os

    rng_state = json.dumps(state.rng.bit_generator.state, sort_keys=True)
    blob = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        _pack_str(state.config_fingerprint),
        struct.pack("<QQ", state.step_count, state.opt.step),
        _pack_str(rng_state),
    ]
    entries = []
    for name, p in state.params.items():
        entries.append(_pack_tensor(name, _KINDS["param"], p.data))
        entries.append(_pack_tensor(name, _KINDS["m"], state.opt.m[name]))
        entries.append(_pack_tensor(name, _KINDS["v"], state.opt.v[name]))
    blob.append(struct.pack("<I", len(entries)))
    blob.extend(entries)
    payload = b"".join(blob)
    import hashlib

    payload += hashlib.sha256(payload).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode()


def load_checkpoint(
    path: str,
    config_fingerprint: str,
    denoiser_cfg: DenoiserConfig,
    hyper: AdamHyper,
) -> TrainState:
    """Restore a TrainState; refuses on version or fingerprint mismatch."""
    import hashlib

    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < 32 + len(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (too short)")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; refusing to load")
    r = _Reader(body)
    if r.take(len(_MAGIC)) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint")
    (version,) = r.unpack("<I")
    if version != _VERSION:
        raise CheckpointError(f"{path}: version {version} != supported {_VERSION}")
    fingerprint = r.string()
    if fingerprint != config_fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint {fingerprint} does not match {config_fingerprint}; "
            "refusing to load"
        )
    step_count, opt_step = r.unpack("<QQ")
    rng_state = json.loads(r.string())
    (n_entries,) = r.unpack("<I")
    params: dict = {}
    moments: dict = {"m": {}, "v": {}}
    for _ in range(n_entries):
        name = r.string()
        kind, ndim = r.unpack("<BI")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        kind_name = _KIND_NAMES.get(kind)
        if kind_name == "param":
            params[name] = Tensor(arr, requires_grad=True)
        elif kind_name in ("m", "v"):
            moments[kind_name][name] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind}")
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(
        params=params,
        opt=AdamState(step=opt_step, m=moments["m"], v=moments["v"]),
        step_count=step_count,
        rng=rng,
        config_fingerprint=fingerprint,
        denoiser_cfg=denoiser_cfg,
        hyper=hyper,
    )
