"""Command-line experiment runner.

``flowcal <command> --config <path> [--out <dir>] [--seed <u64>]``

Exit codes: 0 success, 2 invalid configuration or inputs, 3 numerical
divergence, 4 failed verification (trend or oracle checks).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, load_config
from .correction import (
    CorrectionConfig,
    CorrectionDiverged,
    CorrectionError,
    LatentCorrection,
    Observation,
    meanfield_vi,
    train_correction,
)
from .flows import build_flow
from .inference import (
    contraction_sweep,
    data_residual_qc,
    ensemble_stats,
    histogram_rows,
    pooled_trends,
    prior_samples,
    sample_posterior,
    snr_db,
    trend_checks,
    write_histogram_csv,
    write_pgm,
    write_sweep_csv,
)
from .oracle import (
    DenseGaussianProblem,
    OracleError,
    analytic_posterior,
    assemble_dense_operator,
    dense_operator_for,
    reverse_kl_diag_fit,
)
from .physics import BornLiteSurvey, NoiseModel, adjoint_dot_test, rtm, simulate_observation
from .prior import DatasetError, config_hash, load_dataset, make_splits, sample_prior, save_dataset, stack
from .training import CheckpointError, TrainingDiverged, checkpoint_summary, load_checkpoint, save_checkpoint, train_amortized

logger = logging.getLogger("flowcal")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

CHECKPOINT_NAME = "flow.avif"
CORRECTION_NAME = "correction.lcor"
PROVENANCE_NAME = "provenance.json"


class UsageError(Exception):
    pass


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(out: Path, command: str, cfg: ExperimentConfig, inputs: dict[str, Path], extra=None) -> dict:
    record = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in inputs.items()},
        "seeds": asdict(cfg.seeds),
        "versions": {
            "flowcal": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        record.update(extra)
    (out / PROVENANCE_NAME).write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def _outdir(cfg: ExperimentConfig, sub: str) -> Path:
    out = Path(cfg.output) / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def new_flow(cfg: ExperimentConfig):
    f = cfg.flow
    return build_flow(
        cfg.survey.size,
        f.n_layers,
        f.hidden,
        f.features,
        f.alpha,
        seed=cfg.seeds.flow_init,
        linear_skip=f.linear_skip,
    )


def scenario(cfg: ExperimentConfig, n_sources: int | None = None, multiplier: float | None = None, truth_seed=None):
    """(truth, survey, noise, shots, migrated image) for the configured scenario."""
    sc = cfg.scenario
    prior = cfg.prior.shifted() if sc.shifted_prior else cfg.prior
    truth = sample_prior(prior, sc.truth_seed if truth_seed is None else truth_seed)
    survey = cfg.survey.with_sources(sc.n_sources if n_sources is None else n_sources)
    noise = NoiseModel(cfg.noise.sigma_base, sc.noise_mult if multiplier is None else multiplier)
    data = simulate_observation(truth, survey, noise, cfg.seeds.noise)
    return truth, survey, noise, data, rtm(survey, data)


# commands --------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, "dataset")
    train, val = make_splits(cfg.dataset.n_train, cfg.dataset.n_val, cfg.prior, cfg.survey, cfg.noise, cfg.seeds.data)
    meta = {
        "seed": cfg.seeds.data,
        "config_hash": config_hash(cfg.prior, cfg.survey, cfg.noise, cfg.dataset),
        "prior": cfg.prior.to_dict(),
        "noise": asdict(cfg.noise),
    }
    manifest = save_dataset(out, train, val, meta)
    write_provenance(out, "gen-data", cfg, {})
    print(f"wrote {manifest['n_train']} + {manifest['n_val']} pairs to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    data_dir = _require(args.data, "data")
    train, val, manifest = load_dataset(data_dir)
    out = _outdir(cfg, "train")
    flow = new_flow(cfg)
    X, Y = stack(train)
    if X.shape[1] != flow.dim:
        raise UsageError(f"dataset models have {X.shape[1]} cells, config grid has {flow.dim}")
    flow.set_condition_stats(Y)
    tcfg = cfg.train_config()
    try:
        flow, curves = train_amortized(flow, (X, Y), val, tcfg)
    except TrainingDiverged as exc:
        save_checkpoint(flow, out / "diverged.avif", {"diverged_epoch": exc.epoch})
        raise
    curves.write_csv(out / "curves.csv")
    digest = save_checkpoint(flow, out / CHECKPOINT_NAME, checkpoint_summary(curves, tcfg))
    write_provenance(out, "train", cfg, {"manifest": data_dir / "manifest.json"}, {"checkpoint_sha256": digest})
    final = curves.val_loss[-1] if curves.val_loss else float("nan")
    print(f"trained {len(curves.train_loss)} epochs; val loss {curves.initial_val_loss} -> {final}")
    return EXIT_OK


def cmd_correct(cfg: ExperimentConfig, args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    flow = load_checkpoint(ckpt)
    out = _outdir(cfg, "correct")
    truth, survey, noise, data, cond = scenario(cfg)
    ccfg = cfg.correction_config()
    log_rows = []
    try:
        corr, _ = train_correction(
            flow, Observation(data, cond), survey, noise.sigma, ccfg, progress=lambda e, i, l: log_rows.append((e, i, l))
        )
    except CorrectionDiverged as exc:
        exc.last.save(out / "diverged.lcor")
        raise
    with open(out / "correction_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "iteration", "loss"])
        w.writerows((e, i, repr(l)) for e, i, l in log_rows)
    digest = corr.save(out / CORRECTION_NAME)
    write_provenance(out, "correct", cfg, {"checkpoint": ckpt}, {"correction_sha256": digest})
    print(f"correction after {len(log_rows)} iterations: loss {log_rows[0][2]:.4g} -> {log_rows[-1][2]:.4g}")
    return EXIT_OK


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    flow = load_checkpoint(ckpt)
    corr = LatentCorrection.load(_require(args.correction, "correction")) if args.correction else None
    out = _outdir(cfg, "infer-corrected" if corr is not None else "infer")
    inf = cfg.inference
    truth, survey, noise, data, cond = scenario(cfg)
    shape = survey.shape
    seed = cfg.seeds.sampling
    families = {}
    amortized = ensemble_stats(
        sample_posterior(flow, cond, inf.n_samples, None, seed, shape=shape), inf.stabilizer, inf.probes, inf.bins, inf.ci_level
    )
    families["amortized"] = amortized
    main = amortized
    if corr is not None:
        main = ensemble_stats(
            sample_posterior(flow, cond, inf.n_samples, corr, seed, shape=shape),
            inf.stabilizer,
            inf.probes,
            inf.bins,
            inf.ci_level,
        )
        families["corrected"] = main
    families["prior"] = ensemble_stats(
        prior_samples(flow, inf.n_samples, seed, shape=shape), inf.stabilizer, inf.probes, inf.bins, inf.ci_level
    )
    for name, img in (("mean", main.mean), ("std", main.std), ("normalized_std", main.normalized_std), ("rtm", cond)):
        write_pgm(img, out / f"{name}.pgm")
        np.save(out / f"{name}.npy", img)
    np.save(out / "truth.npy", truth)
    write_histogram_csv(histogram_rows(families), out / "histograms.csv")
    with open(out / "ci_traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "depth", "mean", "lower", "upper"])
        for col in sorted({c for _, c in inf.probes}):
            tr = main.trace(col)
            for z in range(survey.nz):
                w.writerow([col, z, tr["mean"][z], tr["lower"][z], tr["upper"][z]])
    clean = survey.forward_all(truth)
    summary = {
        "snr_db": snr_db(main.mean, truth),
        "snr_amortized_db": snr_db(amortized.mean, truth),
        "data_snr_db": data_residual_qc(survey, main.mean, data, clean).snr_db,
        "data_snr_amortized_db": data_residual_qc(survey, amortized.mean, data, clean).snr_db,
        "n_samples": inf.n_samples,
        "ci_level": inf.ci_level,
        "normalized_std": f"std / (|mean| + {inf.stabilizer} * max|mean|)",
        "prior_samples_condition": "dataset-mean migrated image",
        "corrected": corr is not None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    inputs = {"checkpoint": ckpt}
    if corr is not None:
        inputs["correction"] = Path(args.correction)
    write_provenance(out, "infer", cfg, inputs)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    flow = load_checkpoint(ckpt)
    out = _outdir(cfg, "verify")
    sw = cfg.sweep
    rows = []
    for s in sw.seeds:
        truth = sample_prior(cfg.prior, cfg.scenario.truth_seed + s)
        ccfg = CorrectionConfig(**{**asdict(cfg.correction), "seed": s})
        rows += contraction_sweep(
            flow, truth, cfg.survey, sw.n_values, sw.multipliers, cfg.noise.sigma_base, ccfg, s, cfg.inference.n_samples
        )
    write_sweep_csv(rows, out / "sweep.csv")
    trends = trend_checks(rows)

    def verdict(ok, n):
        frac = ok / n if n else 1.0
        return {"passed": ok, "total": n, "fraction": frac, "ok": frac >= sw.min_fraction}

    # the gate is one std tally and one SNR tally over both grid axes
    checks = {k: verdict(*v) for k, v in pooled_trends(trends).items()}
    per_axis = {k: verdict(*v) for k, v in trends.items()}
    failed_cells = [r for r in rows if "error" in r]
    summary = {"checks": checks, "per_axis": per_axis, "failed_cells": len(failed_cells), "min_fraction": sw.min_fraction}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_provenance(out, "verify", cfg, {"checkpoint": ckpt})
    for k, c in per_axis.items():
        print(f"     {k}: {c['passed']}/{c['total']}")
    for k, c in checks.items():
        print(f"{'PASS' if c['ok'] else 'FAIL'} {k} trends: {c['passed']}/{c['total']}")
    return EXIT_OK if all(c["ok"] for c in checks.values()) and not failed_cells else EXIT_VERIFY


def oracle_checks(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """Exact-arithmetic checks of the physics and the Gaussian machinery."""
    checks = []

    def record(name, value, tol, detail=""):
        checks.append({"check": name, "value": float(value), "tolerance": tol, "ok": bool(value < tol), "detail": detail})

    record("adjoint dot test", adjoint_dot_test(cfg.survey, 100, seed), 1e-10, f"{cfg.survey.shape} grid, 100 trials")
    small = BornLiteSurvey(nz=8, nx=8, n_sources=4, taper_width=cfg.survey.taper_width, f0=cfg.survey.f0, half_width=4)
    rng = np.random.default_rng(seed)
    J = assemble_dense_operator(small)
    d = [rng.standard_normal(small.shape) for _ in range(small.n_sources)]
    dense = (J.T @ np.concatenate([x.ravel() for x in d])).reshape(small.shape)
    record("migration equals dense adjoint", np.max(np.abs(rtm(small, d) - dense)), 1e-10, "8x8 grid")

    prob = DenseGaussianProblem.standard(J, 0.5)
    _, y = prob.simulate(rng, 1)
    post = analytic_posterior(prob, y[0])
    grad = prob.neg_log_posterior_grad(post.mean, y[0])
    record("analytic posterior stationarity", np.max(np.abs(grad)), 1e-8, "gradient of -log posterior at the mean")

    mu_ref, s_ref = reverse_kl_diag_fit(post)
    ccfg = CorrectionConfig(epochs=2000, lr=0.05, decay=0.7, decay_every=100, z_batch=32, indices_per_iter=4, seed=seed)
    op = dense_operator_for(small)
    shots = [y[0][i * small.size : (i + 1) * small.size].reshape(small.shape) for i in range(small.n_sources)]
    mean, std = meanfield_vi(shots, op, 0.5, np.zeros(small.size), np.ones(small.size), ccfg)
    record("reverse-KL fit mean", np.max(np.abs(mean - mu_ref)), 1e-2, "max-abs")
    record("reverse-KL fit std", np.max(np.abs(std / s_ref - 1)), 0.05, "max relative")
    return checks


def cmd_oracle_check(cfg: ExperimentConfig, args) -> int:
    out = _outdir(cfg, "oracle")
    seed = cfg.seeds.data
    checks = oracle_checks(cfg, seed)
    report = {"seed": seed, "checks": checks, "ok": all(c["ok"] for c in checks)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_provenance(out, "oracle-check", cfg, {})
    for c in checks:
        print(f"{'PASS' if c['ok'] else 'FAIL'} {c['check']}: {c['value']:.3e} < {c['tolerance']:g} ({c['detail']})")
    print(f"seed {seed}")
    return EXIT_OK if report["ok"] else EXIT_VERIFY


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "correct": cmd_correct,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowcal", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment JSON")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--data", help="dataset directory (train)")
    p.add_argument("--checkpoint", help="flow checkpoint (correct, infer, verify)")
    p.add_argument("--correction", help="correction blob (infer)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config).with_overrides(args.out, args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, CheckpointError, DatasetError, OracleError, CorrectionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc, CorrectionDiverged) else EXIT_INVALID
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
