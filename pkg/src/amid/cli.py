"""Command-line front end.

Subcommands compose through the filesystem only: phantom -> measure ->
train -> sample -> eval, plus the consistency-weight sweep (ablate). Each
command writes its artifacts plus a run.txt provenance record from which
the command can be reproduced (see `rerun`).

Exit codes: 0 success, 2 missing input, 3 config error (with line number),
4 non-finite-loss abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .autodiff import AdamHyper
from .config import TRAIN_SECTIONS, ConfigError, RunConfig, apply_overrides, default_config, load_config
from .denoiser import DenoiserConfig
from .evaluation import (
    SKETask,
    apply_observer,
    highfreq_residual_energy,
    hotelling_observer,
    make_ske_patches,
    roc_points,
    ssim,
    ssim_pdf,
)
from .imaging import (
    Dataset,
    DatasetError,
    LumpyParams,
    Measurement,
    dataset_read,
    dataset_write,
    estimate_noise_std,
    sample_lumpy_background,
    simulate_measurement,
    write_pgm,
)
from .sampling import SamplerConfig, denoise_measurement, generate_som_samples
from .schedule import find_integration_step, make_linear_schedule
from .training import (
    CheckpointError,
    TrainingAbort,
    init_train_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

_RUN_MARKER = "--- config ---"


def _schedule(cfg: RunConfig):
    s = cfg["schedule"]
    return make_linear_schedule(s["steps"], s["beta_start"], s["beta_end"])


def _denoiser_cfg(cfg: RunConfig) -> DenoiserConfig:
    d = cfg["denoiser"]
    return DenoiserConfig(
        channels=d["channels"], depth=d["depth"], time_embed_dim=d["time_embed_dim"]
    )


def _hyper(cfg: RunConfig) -> AdamHyper:
    return AdamHyper(lr=cfg["train"]["lr"])


def _ske_task(cfg: RunConfig) -> SKETask:
    k = cfg["ske"]
    return SKETask(
        patch_size=k["patch_size"],
        signal_width=k["signal_width"],
        signal_amplitude=k["signal_amplitude"],
        width_unit=k["width_unit"],
    )


def write_run_record(out_dir: str, command: str, cfg: RunConfig, wall_s: float, extra=None):
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"config_fingerprint = {cfg.fingerprint()}",
        f"wall_time_s = {wall_s:.3f}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines.append(_RUN_MARKER)
    lines.append(cfg.dump())
    with open(os.path.join(out_dir, "run.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def parse_run_record(path: str):
    """(command, RunConfig) recovered from a run.txt."""
    from .config import parse_config

    with open(path) as f:
        text = f.read()
    head, sep, config_text = text.partition(_RUN_MARKER + "\n")
    if not sep:
        raise ConfigError(f"{path}: not a run record (missing config marker)")
    command = None
    for line in head.splitlines():
        key, _, value = line.partition(" = ")
        if key == "command":
            command = value.strip()
    if command is None:
        raise ConfigError(f"{path}: run record lacks a command line")
    return command, parse_config(config_text, source=path)


def _out_dir(cfg: RunConfig, leaf: str) -> str:
    path = os.path.join(cfg["paths"]["out_root"], leaf)
    os.makedirs(path, exist_ok=True)
    return path


def _require_dataset(path: str) -> Dataset:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"missing dataset directory: {path}")
    return dataset_read(path)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: RunConfig):
    from .report import save_image_grid

    lp = cfg["lumpy"]
    params = LumpyParams(
        mean_lump_count=lp["mean_lump_count"],
        lump_amplitude=lp["lump_amplitude"],
        lump_width=lp["lump_width"],
        dc_offset=lp["dc_offset"],
    )
    images, clip_fracs = [], []
    for i in range(lp["count"]):
        img, frac = sample_lumpy_background(
            params, lp["size"], lp["seed"] + i, return_clip_fraction=True
        )
        images.append(img)
        clip_fracs.append(frac)
    out = _out_dir(cfg, "phantoms")
    dataset_write(
        out,
        truth=images,
        meta={"kind": "phantom", "seed": str(lp["seed"]), "params": cfg.fingerprint()},
    )
    save_image_grid(images[:8], os.path.join(out, "grid.png"), title="phantoms")
    return out, {"seed": lp["seed"], "mean_clip_fraction": f"{np.mean(clip_fracs):.6f}"}


def cmd_measure(cfg: RunConfig):
    from .report import save_image_grid

    truth_dir = os.path.join(cfg["paths"]["out_root"], "phantoms")
    ds = _require_dataset(truth_dir)
    if ds.truth is None:
        raise DatasetError(f"{truth_dir}: no ground-truth images to measure")
    mc = cfg["measure"]
    measurements = [
        simulate_measurement(img, mc["sigma"], mc["seed"] + i) for i, img in enumerate(ds.truth)
    ]
    meta = {"kind": "measurement", "seed": str(mc["seed"]), "params": cfg.fingerprint()}
    if mc["sigma_mode"] == "estimated":
        est = float(np.mean([estimate_noise_std(m.y) for m in measurements]))
        measurements = [Measurement(y=m.y, sigma_y=est, operator=m.operator) for m in measurements]
        meta["sigma_true"] = repr(float(mc["sigma"]))
    elif mc["sigma_mode"] != "known":
        raise ConfigError(f"measure.sigma_mode must be known or estimated, got {mc['sigma_mode']!r}")
    out = _out_dir(cfg, "measurements")
    dataset_write(out, truth=ds.truth, measurements=measurements, meta=meta)
    save_image_grid([m.y for m in measurements[:8]], os.path.join(out, "grid.png"), title="measurements")
    return out, {"seed": mc["seed"], "sigma": measurements[0].sigma_y}


def _train_measurements(cfg: RunConfig):
    meas_dir = os.path.join(cfg["paths"]["out_root"], "measurements")
    ds = _require_dataset(meas_dir)
    if ds.measurements is None:
        raise DatasetError(f"{meas_dir}: dataset holds no measurements")
    heldout = cfg["train"]["heldout"]
    if heldout >= len(ds.measurements):
        raise ConfigError(
            f"train.heldout={heldout} leaves no training data (dataset has {len(ds.measurements)})"
        )
    split = len(ds.measurements) - heldout
    return ds, ds.measurements[:split], ds.measurements[split:]


def cmd_train(cfg: RunConfig):
    from .report import save_loss_curves, write_csv

    _, train_meas, _ = _train_measurements(cfg)
    tc = cfg["train"]
    state = init_train_state(
        _denoiser_cfg(cfg),
        _hyper(cfg),
        init_seed=cfg["denoiser"]["init_seed"],
        train_seed=tc["seed"],
        config_fingerprint=cfg.fingerprint(TRAIN_SECTIONS),
    )
    sched = _schedule(cfg)
    state, log = run_training(
        state,
        train_meas,
        sched,
        lam=tc["lambda"],
        batch_size=tc["batch"],
        steps=tc["steps"],
        log_every=tc["log_every"],
    )
    out = _out_dir(cfg, "train")
    save_checkpoint(state, os.path.join(out, "checkpoint.bin"))
    write_csv(
        os.path.join(out, "train_log.csv"),
        [{**r, "l1": repr(r["l1"]), "l2": repr(r["l2"]), "total": repr(r["total"]),
          "wall_time_s": f"{r['wall_time_s']:.3f}"} for r in log],
        ["step", "l1", "l2", "total", "wall_time_s"],
    )
    save_loss_curves(log, os.path.join(out, "loss_curve.png"))
    return out, {"seed": tc["seed"], "steps": tc["steps"], "final_step": state.step_count}


def _load_trained(cfg: RunConfig):
    path = os.path.join(cfg["paths"]["out_root"], "train", "checkpoint.bin")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return load_checkpoint(path, cfg.fingerprint(TRAIN_SECTIONS), _denoiser_cfg(cfg), _hyper(cfg))


def cmd_sample(cfg: RunConfig):
    from .report import save_image_grid

    state = _load_trained(cfg)
    sched = _schedule(cfg)
    ds, _, _ = _train_measurements(cfg)
    sigma = ds.measurements[0].sigma_y
    t1 = find_integration_step(sigma, sched)
    sc = cfg["sample"]
    sampler = SamplerConfig(num_ddim_steps=sc["num_ddim_steps"], t1=t1)
    samples = generate_som_samples(
        state.params,
        sampler,
        sc["count"],
        sc["seed"],
        denoiser_cfg=state.denoiser_cfg,
        sched=sched,
        size=cfg["lumpy"]["size"],
        chunk=sc["chunk"],
    )
    out = _out_dir(cfg, "samples")
    dataset_write(
        out,
        samples=samples,
        meta={"kind": "ensemble", "seed": str(sc["seed"]), "params": cfg.fingerprint(), "t1": str(t1)},
    )
    previews = os.path.join(out, "previews")
    os.makedirs(previews, exist_ok=True)
    for i, img in enumerate(samples[: sc["preview_count"]]):
        write_pgm(img, os.path.join(previews, f"sample_{i:04d}.pgm"))
    save_image_grid(samples[:8], os.path.join(out, "grid.png"), title="generated samples")
    return out, {"seed": sc["seed"], "t1": t1, "count": len(samples)}


def _ske_auc(backgrounds, task: SKETask, n_train: int, n_test: int, seed: int):
    present, absent = make_ske_patches(backgrounds, task, seed, n_train + n_test)
    obs = hotelling_observer(present[:n_train], absent[:n_train])
    test = apply_observer(obs.template, present[n_train:], absent[n_train:])
    return obs, test


def cmd_eval(cfg: RunConfig):
    from .report import save_roc_figure, save_ssim_pdf_figure, write_csv

    out_root = cfg["paths"]["out_root"]
    truth_ds = _require_dataset(os.path.join(out_root, "measurements"))
    if truth_ds.truth is None or truth_ds.measurements is None:
        raise DatasetError("measurement dataset must hold truth/measurement pairs")
    samples_ds = _require_dataset(os.path.join(out_root, "samples"))
    if samples_ds.samples is None:
        raise DatasetError("samples dataset holds no generated images")
    state = _load_trained(cfg)
    sched = _schedule(cfg)
    _, _, heldout = _train_measurements(cfg)

    truth = truth_ds.truth
    gen = samples_ds.samples
    ec = cfg["eval"]
    fp = cfg.fingerprint()
    out = _out_dir(cfg, "eval")

    # recovery quality on measurements never seen in training
    heldout_truth = truth[len(truth) - len(heldout):]
    mse_rec, mse_meas = [], []
    for m, x0 in zip(heldout, heldout_truth):
        rec = denoise_measurement(state.params, state.denoiser_cfg, m, sched)
        mse_rec.append(float(np.mean((rec - x0) ** 2)))
        mse_meas.append(float(np.mean((m.y - x0) ** 2)))

    # distribution-level similarity
    pairs, bins = ec["ssim_pairs"], ec["ssim_bins"]
    seed = ec["seed"]
    pdf_tt = ssim_pdf(truth, truth, pairs, seed, bins)
    pdf_gt = ssim_pdf(gen, truth, pairs, seed + 1, bins)
    meas_imgs = [m.y for m in truth_ds.measurements]
    pdf_mt = ssim_pdf(meas_imgs, truth, pairs, seed + 2, bins)
    d_gen = pdf_gt.l1_distance(pdf_tt)
    d_meas = pdf_mt.l1_distance(pdf_tt)

    # task performance on true vs generated backgrounds
    task = _ske_task(cfg)
    kc = cfg["ske"]
    _, test_truth = _ske_auc(truth, task, kc["train_per_class"], kc["test_per_class"], kc["seed"])
    _, test_gen = _ske_auc(gen, task, kc["train_per_class"], kc["test_per_class"], kc["seed"] + 1)

    metrics = [
        ("mse_recovered_vs_truth", float(np.mean(mse_rec))),
        ("mse_measurement_vs_truth", float(np.mean(mse_meas))),
        ("ssim_pdf_l1_gen_vs_truthtruth", d_gen),
        ("ssim_pdf_l1_meas_vs_truthtruth", d_meas),
        ("hotelling_auc_truth", test_truth.auc),
        ("hotelling_auc_gen", test_gen.auc),
        ("hotelling_snr_truth", test_truth.snr),
        ("hotelling_snr_gen", test_gen.snr),
        ("highfreq_energy_truth", highfreq_residual_energy(truth)),
        ("highfreq_energy_gen", highfreq_residual_energy(gen)),
        ("ssim_gen_truth_mean", _mean_cross_ssim(gen, truth, pairs, seed + 3)),
        ("ensemble_mean_truth", float(np.mean([im.mean() for im in truth]))),
        ("ensemble_mean_gen", float(np.mean([im.mean() for im in gen]))),
    ]
    write_csv(
        os.path.join(out, "metrics.csv"),
        [{"metric": k, "value": repr(v), "fingerprint": fp} for k, v in metrics],
        ["metric", "value", "fingerprint"],
    )

    for name, pdf in (("truth_truth", pdf_tt), ("gen_truth", pdf_gt), ("meas_truth", pdf_mt)):
        centers = 0.5 * (pdf.bin_edges[:-1] + pdf.bin_edges[1:])
        write_csv(
            os.path.join(out, f"ssim_pdf_{name}.csv"),
            [
                {"bin_center": repr(float(c)), "density": repr(float(d))}
                for c, d in zip(centers, pdf.densities)
            ],
            ["bin_center", "density"],
        )
    save_ssim_pdf_figure(
        {"truth vs truth": pdf_tt, "generated vs truth": pdf_gt, "measured vs truth": pdf_mt},
        os.path.join(out, "ssim_pdf.png"),
    )

    curves = {}
    for label, res in (("truth", test_truth), ("generated", test_gen)):
        fpr, tpr = roc_points(res.stats_present, res.stats_absent)
        write_csv(
            os.path.join(out, f"roc_{label}.csv"),
            [{"fpr": repr(float(x)), "tpr": repr(float(y))} for x, y in zip(fpr, tpr)],
            ["fpr", "tpr"],
        )
        curves[label] = (fpr, tpr, res.auc)
    save_roc_figure(curves, os.path.join(out, "roc.png"))
    return out, {"seed": seed, "metrics": len(metrics)}


def _mean_cross_ssim(set_a, set_b, pairs: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    vals = [
        ssim(set_a[int(rng.integers(0, len(set_a)))], set_b[int(rng.integers(0, len(set_b)))])
        for _ in range(pairs)
    ]
    return float(np.mean(vals))


def cmd_ablate(cfg: RunConfig):
    from .report import save_ablation_figure, write_csv

    _, train_meas, _ = _train_measurements(cfg)
    truth = _require_dataset(os.path.join(cfg["paths"]["out_root"], "measurements")).truth
    sched = _schedule(cfg)
    sigma = train_meas[0].sigma_y
    t1 = find_integration_step(sigma, sched)
    ab = cfg["ablate"]
    tc = cfg["train"]
    ec = cfg["eval"]
    out = _out_dir(cfg, "ablation")

    per_run, per_lambda = [], []
    for lam in ab["lambdas"]:
        energies, ssims = [], []
        for s in ab["seeds"]:
            state = init_train_state(
                _denoiser_cfg(cfg),
                _hyper(cfg),
                init_seed=cfg["denoiser"]["init_seed"] + s,
                train_seed=tc["seed"] + s,
                config_fingerprint=cfg.fingerprint(TRAIN_SECTIONS),
            )
            state, _ = run_training(
                state, train_meas, sched, lam=lam, batch_size=tc["batch"],
                steps=ab["train_steps"], log_every=max(1, ab["train_steps"] // 4),
            )
            sampler = SamplerConfig(num_ddim_steps=cfg["sample"]["num_ddim_steps"], t1=t1)
            gen = generate_som_samples(
                state.params, sampler, ab["sample_count"], cfg["sample"]["seed"] + s,
                denoiser_cfg=state.denoiser_cfg, sched=sched,
                size=cfg["lumpy"]["size"], chunk=cfg["sample"]["chunk"],
            )
            energy = highfreq_residual_energy(gen)
            ssim_mean = _mean_cross_ssim(gen, truth, ec["ssim_pairs"], ec["seed"] + s)
            energies.append(energy)
            ssims.append(ssim_mean)
            per_run.append(
                {"lambda": lam, "seed": s,
                 "highfreq_residual_energy": repr(energy), "ssim_gen_truth": repr(ssim_mean)}
            )
        per_lambda.append(
            {"lambda": lam,
             "highfreq_residual_energy": float(np.mean(energies)),
             "ssim_gen_truth": float(np.mean(ssims))}
        )

    write_csv(
        os.path.join(out, "ablation_runs.csv"), per_run,
        ["lambda", "seed", "highfreq_residual_energy", "ssim_gen_truth"],
    )
    write_csv(
        os.path.join(out, "ablation.csv"),
        [{"lambda": r["lambda"],
          "highfreq_residual_energy": repr(r["highfreq_residual_energy"]),
          "ssim_gen_truth": repr(r["ssim_gen_truth"])} for r in per_lambda],
        ["lambda", "highfreq_residual_energy", "ssim_gen_truth"],
    )
    save_ablation_figure(per_lambda, os.path.join(out, "ablation.png"))
    return out, {"lambdas": ",".join(str(v) for v in ab["lambdas"])}


_COMMANDS = {
    "phantom": cmd_phantom,
    "measure": cmd_measure,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    parser = argparse.ArgumentParser(prog="amid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"amid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write the default configuration file")
    init.add_argument("path")

    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="configuration file (defaults used if omitted)")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="SECTION.KEY=VALUE", help="override one configuration value",
        )
        if name == "train":
            p.add_argument("--steps", type=int, help="shorthand for --set train.steps=N")

    rerun = sub.add_parser("rerun", help="re-execute a command from its run.txt")
    rerun.add_argument("run_record")
    rerun.add_argument("--out", required=True, help="fresh output root for the rerun")
    return parser


def _run_command(name: str, cfg: RunConfig) -> int:
    start = time.perf_counter()
    out, extra = _COMMANDS[name](cfg)
    wall = time.perf_counter() - start
    write_run_record(out, name, cfg, wall, extra)
    print(f"{name}: wrote {out} ({wall:.1f}s)")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            with open(args.path, "w") as f:
                f.write(default_config().dump())
            print(f"wrote {args.path}")
            return 0
        if args.command == "rerun":
            name, cfg = parse_run_record(args.run_record)
            cfg.set("paths", "out_root", args.out)
            return _run_command(name, cfg)
        cfg = load_config(args.config) if args.config else default_config()
        apply_overrides(cfg, args.overrides)
        if getattr(args, "steps", None) is not None:
            cfg.set("train", "steps", str(args.steps))
        return _run_command(args.command, cfg)
    except ConfigError as exc:
        print(f"error: code=3 config: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, DatasetError, CheckpointError) as exc:
        print(f"error: code=2 missing-input: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"error: code=4 training-abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
