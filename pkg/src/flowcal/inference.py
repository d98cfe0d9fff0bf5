"""Posterior sampling, ensemble statistics, data-space QC and verification sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .correction import CorrectionConfig, LatentCorrection, Observation, train_correction
from .flows import flow_inverse
from .physics import BornLiteSurvey, NoiseModel, rtm, simulate_observation

logger = logging.getLogger(__name__)

SNR_CAP_DB = 300.0
CI_LEVEL = 0.99
SWEEP_HEADER = ["N", "noise_mult", "snr_uncorrected_db", "snr_corrected_db", "std_median", "std_q1", "std_q3", "seed"]
HIST_HEADER = ["probe_id", "bin_lo", "bin_hi", "count", "which"]


def _hash(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        for key in ("flow", "correction", "condition", "seed"):
            if not str(self.provenance.get(key, "")):
                raise ValueError(f"provenance field {key!r} is empty")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]


@dataclass
class EnsembleStats:
    mean: np.ndarray
    std: np.ndarray
    normalized_std: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    histograms: dict = field(default_factory=dict)
    stabilizer: float = 0.05

    def trace(self, column: int) -> dict[str, np.ndarray]:
        """Depth profile of the mean and confidence band at one column."""
        return {
            "mean": self.mean[:, column],
            "lower": self.ci_lower[:, column],
            "upper": self.ci_upper[:, column],
        }


def sample_posterior(
    flow,
    y_cond,
    n: int,
    correction: LatentCorrection | None = None,
    seed=0,
    shape: tuple[int, ...] | None = None,
) -> PosteriorEnsemble:
    """Push ``n`` latent draws (optionally corrected) through the inverse flow."""
    if n < 1:
        raise ValueError("need at least one sample")
    if correction is not None and correction.dim != flow.dim:
        raise ValueError(f"correction has dimension {correction.dim}, flow has {flow.dim}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, flow.dim))
    if correction is not None:
        z = correction.apply(z)
    x = flow_inverse(flow, z, y_cond)
    if shape is None:
        shape = np.shape(y_cond) if y_cond is not None and np.size(y_cond) == flow.dim else (flow.dim,)
    prov = {
        "flow": flow.fingerprint(),
        "correction": "none" if correction is None else correction.fingerprint(),
        "condition": "none" if y_cond is None else _hash(y_cond),
        "seed": str(seed),
    }
    return PosteriorEnsemble(x.reshape((n,) + tuple(shape)), prov)


def histogram(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.histogram(values, bins=bins, range=(lo, hi))


def ensemble_stats(
    ens: PosteriorEnsemble,
    stabilizer: float = 0.05,
    probes: Sequence[tuple[int, ...]] = (),
    bins: int = 50,
    ci_level: float = CI_LEVEL,
) -> EnsembleStats:
    """Mean, unbiased std, normalized std, probe histograms and CI bands."""
    if ens.n < 2:
        raise ValueError("statistics need at least two samples")
    s = ens.samples
    mean = s.mean(axis=0)
    std = s.std(axis=0, ddof=1)
    absmean = np.abs(mean)
    denom = absmean + stabilizer * absmean.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        norm_std = np.where(denom > 0, std / np.where(denom > 0, denom, 1.0), 0.0)
    tail = 0.5 * (1.0 - ci_level)
    lower, upper = np.quantile(s, [tail, 1.0 - tail], axis=0)
    hists = {}
    for k, probe in enumerate(probes):
        counts, edges = histogram(s[(slice(None),) + tuple(probe)], bins)
        hists[k] = (tuple(probe), counts, edges)
    return EnsembleStats(mean, std, norm_std, lower, upper, hists, stabilizer)


def snr_db(estimate, reference) -> float:
    """20 log10(||reference|| / ||reference - estimate||), capped at +300 dB."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {reference.shape}")
    ref = np.linalg.norm(reference)
    if ref == 0:
        raise ValueError("reference is identically zero")
    res = np.linalg.norm(reference - estimate)
    if res == 0:
        return SNR_CAP_DB
    return float(min(SNR_CAP_DB, 20.0 * np.log10(ref / res)))


@dataclass
class ResidualQC:
    predicted: list
    residual: list
    snr_db: float


def data_residual_qc(physics, mean: np.ndarray, y_obs, reference=None) -> ResidualQC:
    """Forward-model the conditional mean and compare against a reference (noise-free if given)."""
    predicted = physics.forward_all(mean)
    ref = y_obs if reference is None else reference
    if len(ref) != len(predicted):
        raise ValueError("reference shot count does not match the physics")
    residual = [np.asarray(r) - p for r, p in zip(ref, predicted)]
    return ResidualQC(predicted, residual, snr_db(np.stack(predicted), np.stack([np.asarray(r) for r in ref])))


def prior_samples(flow, n: int, seed=0, mean_condition=None, shape=None) -> PosteriorEnsemble:
    """Samples with the condition replaced by the dataset-mean condition image."""
    cond = flow.cond_shift if mean_condition is None else mean_condition
    if shape is None:
        shape = (flow.dim,)
    return sample_posterior(flow, cond, n, None, seed, shape=shape)


def histogram_rows(stats_by_family: dict[str, EnsembleStats]) -> list[list]:
    rows = []
    for which, st in stats_by_family.items():
        for k, (_, counts, edges) in st.histograms.items():
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                rows.append([k, float(lo), float(hi), int(c), which])
    return rows


# shift scenarios ---------------------------------------------------------


@dataclass
class ScenarioResult:
    n_sources: int
    multiplier: float
    truth: np.ndarray
    cond: np.ndarray
    correction: LatentCorrection
    history: list
    uncorrected: EnsembleStats
    corrected: EnsembleStats
    snr_uncorrected: float
    snr_corrected: float
    qc_uncorrected: ResidualQC
    qc_corrected: ResidualQC
    data: list = field(repr=False, default_factory=list)


def run_scenario(
    flow,
    truth: np.ndarray,
    survey: BornLiteSurvey,
    noise: NoiseModel,
    corr_cfg: CorrectionConfig,
    noise_seed=0,
    n_samples: int = 1000,
    sample_seed=0,
    probes=(),
    bins: int = 50,
) -> ScenarioResult:
    """simulate -> migrate -> correct -> sample (both ways) -> statistics for one (N, multiplier)."""
    data = simulate_observation(truth, survey, noise, noise_seed)
    cond = rtm(survey, data)
    obs = Observation(data, cond)
    corr, history = train_correction(flow, obs, survey, noise.sigma, corr_cfg)
    shape = survey.shape
    ens_u = sample_posterior(flow, cond, n_samples, None, sample_seed, shape=shape)
    ens_c = sample_posterior(flow, cond, n_samples, corr, sample_seed, shape=shape)
    st_u = ensemble_stats(ens_u, probes=probes, bins=bins)
    st_c = ensemble_stats(ens_c, probes=probes, bins=bins)
    clean = survey.forward_all(truth)
    return ScenarioResult(
        survey.n_sources,
        noise.multiplier,
        truth,
        cond,
        corr,
        history,
        st_u,
        st_c,
        snr_db(st_u.mean, truth),
        snr_db(st_c.mean, truth),
        data_residual_qc(survey, st_u.mean, data, clean),
        data_residual_qc(survey, st_c.mean, data, clean),
        data,
    )


def contraction_sweep(
    flow,
    truth: np.ndarray,
    survey: BornLiteSurvey,
    n_values: Sequence[int],
    multipliers: Sequence[float],
    sigma_base: float,
    corr_cfg: CorrectionConfig,
    seed=0,
    n_samples: int = 1000,
) -> list[dict]:
    """One row per (N, multiplier) cell; failures are recorded and the sweep goes on.

    Every cell shares the noise seed and the correction/sampling streams, so
    differences between cells come from the source count and noise level.
    """
    if len(n_values) < 2 or len(multipliers) < 2:
        raise ValueError("sweep needs at least two source counts and two multipliers")
    rows = []
    for n in n_values:
        for m in multipliers:
            row = {"N": int(n), "noise_mult": float(m), "seed": seed}
            try:
                res = run_scenario(
                    flow,
                    truth,
                    survey.with_sources(int(n)),
                    NoiseModel(sigma_base, m),
                    corr_cfg,
                    noise_seed=seed,
                    n_samples=n_samples,
                    sample_seed=seed,
                )
                q1, med, q3 = np.quantile(res.corrected.std, [0.25, 0.5, 0.75])
                row.update(
                    snr_uncorrected_db=res.snr_uncorrected,
                    snr_corrected_db=res.snr_corrected,
                    std_median=float(med),
                    std_q1=float(q1),
                    std_q3=float(q3),
                )
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                logger.warning("sweep cell N=%s m=%s failed: %s", n, m, exc)
                row.update({k: float("nan") for k in SWEEP_HEADER[2:7]}, error=str(exc))
            rows.append(row)
    return rows


def trend_checks(rows: list[dict]) -> dict[str, tuple[int, int]]:
    """Adjacent-cell comparisons satisfied / total, per trend.

    ``std_vs_N``: median std non-increasing as N grows (fixed multiplier).
    ``std_vs_noise``: median std non-decreasing as noise grows (fixed N).
    ``snr_vs_N``: corrected SNR non-decreasing as N grows.
    ``snr_vs_noise``: corrected SNR non-increasing as noise grows.
    """
    ns = sorted({r["N"] for r in rows})
    ms = sorted({r["noise_mult"] for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    cell = {(r["seed"], r["N"], r["noise_mult"]): r for r in rows}
    out = {k: [0, 0] for k in ("std_vs_N", "std_vs_noise", "snr_vs_N", "snr_vs_noise")}

    def tally(key, ok):
        out[key][0] += int(bool(ok))
        out[key][1] += 1

    for s in seeds:
        for m in ms:
            for a, b in zip(ns[:-1], ns[1:]):
                ra, rb = cell[(s, a, m)], cell[(s, b, m)]
                tally("std_vs_N", rb["std_median"] <= ra["std_median"])
                tally("snr_vs_N", rb["snr_corrected_db"] >= ra["snr_corrected_db"])
        for n in ns:
            for a, b in zip(ms[:-1], ms[1:]):
                ra, rb = cell[(s, n, a)], cell[(s, n, b)]
                tally("std_vs_noise", rb["std_median"] >= ra["std_median"])
                tally("snr_vs_noise", rb["snr_corrected_db"] <= ra["snr_corrected_db"])
    return {k: (v[0], v[1]) for k, v in out.items()}


def pooled_trends(checks: dict[str, tuple[int, int]]) -> dict[str, tuple[int, int]]:
    """Merge the per-axis tallies into one std and one SNR tally."""
    out = {}
    for kind in ("std", "snr"):
        parts = [v for k, v in checks.items() if k.startswith(kind + "_")]
        out[kind] = (sum(p[0] for p in parts), sum(p[1] for p in parts))
    return out


# exports -------------------------------------------------------------------


def write_sweep_csv(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r[k] for k in SWEEP_HEADER])


def write_histogram_csv(rows: list[list], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HIST_HEADER)
        w.writerows(rows)


def write_pgm(image: np.ndarray, path) -> dict:
    """16-bit binary PGM scaled to [min, max]; writes a JSON sidecar and returns it."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    levels = np.round((image - lo) / span * 65535.0).astype(">u2")
    h, w = image.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + levels.tobytes())
    side = {"min": lo, "max": hi, "shape": [h, w]}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2))
    return side


def read_pgm(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    levels = np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.float64)
    side = json.loads(path.with_suffix(".json").read_text())
    span = side["max"] - side["min"] if side["max"] > side["min"] else 1.0
    return side["min"] + levels / 65535.0 * span, side
