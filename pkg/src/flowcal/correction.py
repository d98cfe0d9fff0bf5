"""Physics-based diagonal Gaussian correction of a pretrained flow's latent space.

Given observed shot data that may come from a shifted distribution, fit
``N(mu, diag(s)^2)`` over the latent space by minimizing the reverse KL to
the latent posterior

    -log p(z | y_obs) = 1/(2 sigma^2) sum_i ||y_i - F_i(f^{-1}(z; y_cond))||^2 + 1/2 ||z||^2 + const.

With the reparameterization ``w = s * z + mu`` the objective becomes

    E_z [ misfit(w) + 1/2 ||w||^2 - sum(log s) ].

Corrected posterior samples are ``f^{-1}(s * z + mu; y_cond)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .flows import LOG_2PI, IdentityFlow
from .physics import AffineReparam

LCOR_MAGIC = b"LCOR"
LCOR_VERSION = 1


class CorrectionError(Exception):
    pass


class CorrectionDiverged(CorrectionError):
    def __init__(self, iteration: int, last: "LatentCorrection"):
        super().__init__(f"correction diverged at iteration {iteration}")
        self.iteration = iteration
        self.last = last


@dataclass
class LatentCorrection:
    mu: np.ndarray
    log_s: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.log_s = np.asarray(self.log_s, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.log_s.shape:
            raise CorrectionError("mu and log_s must have the same length")

    @classmethod
    def identity(cls, dim: int) -> "LatentCorrection":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)

    def apply(self, z: np.ndarray) -> np.ndarray:
        return self.s * z + self.mu

    def to_bytes(self) -> bytes:
        return (
            LCOR_MAGIC
            + struct.pack("<II", LCOR_VERSION, self.dim)
            + self.mu.astype("<f8").tobytes()
            + self.log_s.astype("<f8").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentCorrection":
        if len(data) < 12 or data[:4] != LCOR_MAGIC:
            raise CorrectionError("not an LCOR blob")
        version, dim = struct.unpack("<II", data[4:12])
        if version != LCOR_VERSION:
            raise CorrectionError(f"LCOR version {version}, expected {LCOR_VERSION}")
        if len(data) != 12 + 16 * dim:
            raise CorrectionError("truncated or oversized LCOR blob")
        mu = np.frombuffer(data[12 : 12 + 8 * dim], dtype="<f8")
        log_s = np.frombuffer(data[12 + 8 * dim :], dtype="<f8")
        return cls(mu.astype(np.float64), log_s.astype(np.float64))

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> "LatentCorrection":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass
class CorrectionConfig:
    epochs: int = 5
    lr: float = 0.1
    decay: float = 0.9
    decay_every: int = 2
    z_batch: int = 1
    indices_per_iter: int = 1
    prior_var: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("stepsize must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.decay_every < 1 or self.z_batch < 1 or self.indices_per_iter < 1:
            raise ValueError("decay cadence, z batch and index batch must be >= 1")
        if not self.prior_var > 0:
            raise ValueError("prior variance must be positive")

    def stepsize(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


@dataclass
class Observation:
    """Observed shot data (one entry per source) and the flow's condition image."""

    data: Sequence[np.ndarray]
    cond: np.ndarray | None = None
    rows: list = field(init=False, repr=False)

    def __post_init__(self):
        self.rows = [np.asarray(d, dtype=np.float64).reshape(-1) for d in self.data]


def _indices(indices, n_sources: int) -> np.ndarray:
    if indices is None:
        return np.arange(n_sources)
    idx = np.atleast_1d(np.asarray(indices, dtype=np.intp))
    if idx.size == 0 or idx.min() < 0 or idx.max() >= n_sources:
        raise IndexError("source subset out of range")
    return idx


def _check(obs: Observation, physics, sigma: float):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0 < np.float64(sigma) ** 2 < np.inf:
        raise ValueError(f"sigma {sigma!r} gives a non-finite misfit weight")
    if len(obs.rows) != physics.n_sources:
        raise ValueError(f"observation has {len(obs.rows)} shots, physics has {physics.n_sources} sources")


def _features(flow, p, g: ad.Graph, obs: Observation, batch: int):
    if isinstance(flow, IdentityFlow):
        return None
    if obs.cond is None:
        raise ValueError("a conditional flow needs obs.cond")
    cond = np.asarray(obs.cond, dtype=np.float64).reshape(1, -1)
    return flow.tile_features(flow.features(p, g.const(cond)), batch)


def _misfit_node(x: ad.Node, obs: Observation, physics, idx: np.ndarray) -> ad.Node:
    total = None
    for i in idx:
        r = ad.sub(obs.rows[i], physics.forward_node(int(i), x))
        term = ad.sqnorm(r)
        total = term if total is None else ad.add(total, term)
    return total


def _loss_graph(mu, log_s, z, idx, obs, flow, physics, sigma, prior_var, record=True):
    g = ad.Graph(record=record)
    mu_n = g.param("mu", mu)
    ls_n = g.param("log_s", log_s)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    b = z.shape[0]
    p = flow.bind(g)
    feat = _features(flow, p, g, obs, b)
    w = ad.add(ad.mul(g.const(z), ad.exp(ls_n)), mu_n)
    x = flow.inverse_nodes(p, w, feat)
    weight = physics.n_sources / idx.size / (2.0 * sigma**2) / b
    misfit = ad.scale(_misfit_node(x, obs, physics, idx), weight)
    prior = ad.scale(ad.sqnorm(w), 0.5 / (prior_var * b))
    loss = ad.sub(ad.add(misfit, prior), ad.sum(ls_n))
    return g, loss


def latent_log_posterior(z, obs: Observation, flow, physics, sigma: float, indices=None):
    """-(misfit + 1/2 ||z||^2) per latent row, additive constant dropped.

    With a source subset the misfit is rescaled by N/|subset|.
    """
    _check(obs, physics, sigma)
    idx = _indices(indices, physics.n_sources)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zr = np.atleast_2d(z)
    g = ad.Graph(record=False)
    p = flow.bind(g)
    feat = _features(flow, p, g, obs, zr.shape[0])
    x = flow.inverse_nodes(p, g.const(zr), feat)
    misfit = np.zeros(zr.shape[0])
    for i in idx:
        r = obs.rows[i] - physics.forward_node(int(i), x).value
        misfit += np.sum(r * r, axis=1)
    out = -(physics.n_sources / idx.size * misfit / (2.0 * sigma**2) + 0.5 * np.sum(zr * zr, axis=1))
    if not np.all(np.isfinite(out)):
        raise ad.NonFiniteError("latent_log_posterior", "non-finite value")
    return float(out[0]) if single else out


def correction_loss(mu, log_s, z, obs: Observation, flow, physics, sigma: float, indices=None, prior_var=1.0) -> float:
    """Monte-Carlo correction objective over the rows of ``z``."""
    _check(obs, physics, sigma)
    idx = _indices(indices, physics.n_sources)
    _, loss = _loss_graph(mu, log_s, z, idx, obs, flow, physics, sigma, prior_var, record=False)
    return float(loss.value)


def correction_loss_and_grad(mu, log_s, z, obs, flow, physics, sigma, indices=None, prior_var=1.0):
    """(loss, {"mu": d/dmu, "log_s": d/dlog_s})."""
    _check(obs, physics, sigma)
    idx = _indices(indices, physics.n_sources)
    g, loss = _loss_graph(mu, log_s, z, idx, obs, flow, physics, sigma, prior_var)
    return float(loss.value), g.backward(loss)


def correction_loss_via_density(mu, log_s, z, obs, flow, physics, sigma, indices=None) -> float:
    """The same objective assembled as E[-log p(w | y) + log N(w | mu, diag(s)^2)].

    The Gaussian log-density is evaluated in full (normalizer, log-det and
    quadratic form) at ``w = s * z + mu``; differences between parameter
    settings on a shared ``z`` batch agree with :func:`correction_loss`.
    """
    mu = np.asarray(mu, dtype=np.float64)
    log_s = np.asarray(log_s, dtype=np.float64)
    s = np.exp(log_s)
    zr = np.atleast_2d(np.asarray(z, dtype=np.float64))
    w = s * zr + mu
    neg_post = -latent_log_posterior(w, obs, flow, physics, sigma, indices)
    d = mu.size
    q = (w - mu) / s
    log_q = -0.5 * d * LOG_2PI - 0.5 * np.sum(np.log(s * s)) - 0.5 * np.sum(q * q, axis=1)
    return float(np.mean(neg_post + log_q))


def train_correction(flow, obs: Observation, physics, sigma: float, cfg: CorrectionConfig, progress=None):
    """Adam over (mu, log s) from (0, 0).

    Each epoch visits the sources in a fresh random order without
    replacement, ``cfg.indices_per_iter`` at a time, drawing a fresh
    ``(cfg.z_batch, D)`` latent batch per iteration.  Returns the
    correction and the per-iteration loss history.
    """
    _check(obs, physics, sigma)
    dim = flow.dim
    rng = np.random.default_rng(cfg.seed)
    params = {"mu": np.zeros(dim), "log_s": np.zeros(dim)}
    state = ad.AdamState(lr=cfg.lr)
    history: list[float] = []
    n = physics.n_sources
    it = 0
    for epoch in range(cfg.epochs):
        lr = cfg.stepsize(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.indices_per_iter):
            idx = order[start : start + cfg.indices_per_iter]
            z = rng.standard_normal((cfg.z_batch, dim))
            last = LatentCorrection(params["mu"].copy(), params["log_s"].copy())
            try:
                g, loss = _loss_graph(params["mu"], params["log_s"], z, idx, obs, flow, physics, sigma, cfg.prior_var)
                grads = g.backward(loss)
                ad.adam_step(params, grads, state, lr=lr)
            except ad.NonFiniteError:
                raise CorrectionDiverged(it, last) from None
            if not (np.all(np.isfinite(params["mu"])) and np.all(np.isfinite(params["log_s"]))):
                raise CorrectionDiverged(it, last)
            history.append(float(loss.value))
            if progress is not None:
                progress(epoch, it, history[-1])
            it += 1
    return LatentCorrection(params["mu"], params["log_s"]), history


def meanfield_vi(data, physics, sigma: float, prior_mean, prior_std, cfg: CorrectionConfig):
    """Diagonal Gaussian reverse-KL fit directly in model space.

    The model is whitened against the diagonal Gaussian prior
    (``x = prior_mean + prior_std * u``) and the correction machinery is run
    with the identity flow in ``u``.  Returns ``(mean, std)`` in model space.
    """
    prior_mean = np.asarray(prior_mean, dtype=np.float64).reshape(-1)
    prior_std = np.broadcast_to(np.asarray(prior_std, dtype=np.float64), prior_mean.shape)
    wrapped = AffineReparam(physics, prior_mean, prior_std)
    corr, _ = train_correction(IdentityFlow(prior_mean.size), Observation(data), wrapped, sigma, cfg)
    return prior_mean + prior_std * corr.mu, prior_std * corr.s


def config_dict(cfg: CorrectionConfig) -> dict:
    return asdict(cfg)
