"""Born-lite multi-source linear forward operator.

Each source ``i`` maps a reflectivity image ``x`` (nz x nx) to a shot panel
of the same shape: every column is convolved along depth with a Ricker
wavelet, then weighted by a Gaussian illumination taper centred on the
source column.  The operator is exactly linear, so its adjoint is a
per-column correlation with the same wavelet followed by the same taper.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

NOISE_MULTIPLIERS = (1.0, 1.5, 2.0, 2.5, 3.0)


def ricker(f0: float, half_width: int) -> np.ndarray:
    """Unit-L2-norm Ricker wavelet sampled at integer lags -half_width..half_width.

    ``f0`` is the central frequency in cycles per sample.
    """
    if not f0 > 0:
        raise ValueError("f0 must be positive")
    if half_width < 1:
        raise ValueError("half_width must be >= 1")
    t = np.arange(-half_width, half_width + 1, dtype=np.float64)
    a = (np.pi * f0 * t) ** 2
    r = (1.0 - 2.0 * a) * np.exp(-a)
    return r / np.linalg.norm(r)


@dataclass(frozen=True)
class NoiseModel:
    sigma_base: float = 0.05
    multiplier: float = 1.0

    def __post_init__(self):
        if not (self.sigma_base > 0 and self.multiplier > 0):
            raise ValueError("noise standard deviation must be positive")

    @property
    def sigma(self) -> float:
        return self.sigma_base * self.multiplier


@dataclass(frozen=True)
class BornLiteSurvey:
    nz: int = 16
    nx: int = 32
    n_sources: int = 16
    taper_width: float = 4.0
    f0: float = 0.15
    half_width: int = 8
    kernel_override: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.nz < 1 or self.nx < 1:
            raise ValueError("grid must be non-empty")
        if self.n_sources < 1:
            raise ValueError("need at least one source")
        if self.taper_width < 0:
            raise ValueError("taper width must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def size(self) -> int:
        return self.nz * self.nx

    @property
    def kernel(self) -> np.ndarray:
        if self.kernel_override is not None:
            return np.asarray(self.kernel_override, dtype=np.float64)
        return ricker(self.f0, self.half_width)

    @property
    def source_columns(self) -> np.ndarray:
        i = np.arange(self.n_sources)
        return ((2 * i + 1) * self.nx) // (2 * self.n_sources)

    def with_sources(self, n_sources: int) -> "BornLiteSurvey":
        return replace(self, n_sources=n_sources)

    def taper(self, i: int) -> np.ndarray:
        """Illumination weights over columns for source ``i`` (0-based)."""
        self._check_index(i)
        col = np.arange(self.nx, dtype=np.float64)
        c = float(self.source_columns[i])
        if self.taper_width == 0:
            return (col == c).astype(np.float64)
        if np.isinf(self.taper_width):
            return np.ones(self.nx)
        with np.errstate(over="ignore"):  # very narrow tapers underflow to exact zeros
            return np.exp(-0.5 * ((col - c) / self.taper_width) ** 2)

    def _check_index(self, i: int):
        if not 0 <= i < self.n_sources:
            raise IndexError(f"source index {i} out of range for {self.n_sources} sources")

    # numpy paths -------------------------------------------------------

    def forward(self, i: int, x: np.ndarray) -> np.ndarray:
        x = self._check_model(x)
        w = ad._shift_taps(x, self.kernel, axis=-2, flip=False)
        return w * self.taper(i)

    def adjoint(self, i: int, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        if d.shape[-2:] != self.shape:
            raise ValueError(f"shot panel shape {d.shape} does not match survey {self.shape}")
        c = ad._shift_taps(d, self.kernel, axis=-2, flip=True)
        return c * self.taper(i)

    def forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        return [self.forward(i, x) for i in range(self.n_sources)]

    def _check_model(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != self.shape:
            raise ValueError(f"model shape {x.shape} does not match survey {self.shape}")
        return x

    # autodiff path (flattened batch rows) -------------------------------

    def forward_node(self, i: int, x: ad.Node) -> ad.Node:
        """``x`` is (batch, nz*nx); returns (batch, nz*nx) shot rows."""
        b = x.shape[0]
        img = ad.reshape(x, (b, self.nz, self.nx))
        w = ad.conv1d(img, self.kernel, axis=1)
        d = ad.mul(w, self.taper(i))
        return ad.reshape(d, (b, self.size))

    def data_row(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d, dtype=np.float64).reshape(-1)


def born_lite_forward(survey: BornLiteSurvey, i: int, x: np.ndarray) -> np.ndarray:
    return survey.forward(i, x)


def born_lite_adjoint(survey: BornLiteSurvey, i: int, d: np.ndarray) -> np.ndarray:
    return survey.adjoint(i, d)


def rtm(survey: BornLiteSurvey, data) -> np.ndarray:
    """Migrated image: sum of per-source adjoints."""
    if len(data) != survey.n_sources:
        raise ValueError(f"expected {survey.n_sources} shot panels, got {len(data)}")
    image = np.zeros(survey.shape)
    for i, d in enumerate(data):
        image += survey.adjoint(i, d)
    return image


def band_limited_noise(survey: BornLiteSurvey, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One panel of wavelet-filtered white noise with per-sample std ``sigma``.

    The white noise is drawn with ``half_width`` extra samples above and
    below so that every output sample sees the full (unit-norm) kernel;
    the filtered noise is then stationary with unit variance before scaling.
    """
    k = survey.kernel
    h = (k.size - 1) // 2
    white = rng.standard_normal((survey.nz + 2 * h, survey.nx))
    filtered = ad._shift_taps(white, k, axis=0, flip=False)[h : h + survey.nz]
    return sigma * filtered / np.linalg.norm(k)


def simulate_observation(x: np.ndarray, survey: BornLiteSurvey, noise: NoiseModel, seed) -> list[np.ndarray]:
    """Noisy shot panels for every source, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return [survey.forward(i, x) + band_limited_noise(survey, noise.sigma, rng) for i in range(survey.n_sources)]


def adjoint_dot_test(survey: BornLiteSurvey, trials: int = 100, seed=0) -> float:
    """Max normalized mismatch |<F x, d> - <x, F^T d>| / (|F x| |d|)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for i in range(survey.n_sources):
            x = rng.standard_normal(survey.shape)
            d = rng.standard_normal(survey.shape)
            fx = survey.forward(i, x)
            lhs = float(np.vdot(fx, d))
            rhs = float(np.vdot(x, survey.adjoint(i, d)))
            denom = np.linalg.norm(fx) * np.linalg.norm(d) + 1e-300
            worst = max(worst, abs(lhs - rhs) / denom)
    return worst


class DenseOperator:
    """Physics given as stacked dense row blocks ``J_i`` acting on flat vectors."""

    def __init__(self, blocks):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks]
        if not self.blocks:
            raise ValueError("need at least one block")
        dims = {b.shape[1] for b in self.blocks}
        if len(dims) != 1:
            raise ValueError("all blocks must share the model dimension")
        self.size = dims.pop()

    @classmethod
    def split(cls, J: np.ndarray, n_blocks: int) -> "DenseOperator":
        return cls(np.array_split(np.atleast_2d(J), n_blocks, axis=0))

    @property
    def n_sources(self) -> int:
        return len(self.blocks)

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack(self.blocks)

    def forward(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.blocks[i] @ np.asarray(x, dtype=np.float64).reshape(-1)

    def adjoint(self, i: int, d: np.ndarray) -> np.ndarray:
        return self.blocks[i].T @ np.asarray(d, dtype=np.float64).reshape(-1)

    def forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        return [self.forward(i, x) for i in range(self.n_sources)]

    def forward_node(self, i: int, x: ad.Node) -> ad.Node:
        return ad.matmul(x, self.blocks[i].T)

    def data_row(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d, dtype=np.float64).reshape(-1)


class AffineReparam:
    """Wraps physics ``F`` as ``u -> F(mean + std * u)`` (prior whitening)."""

    def __init__(self, physics, mean: np.ndarray, std: np.ndarray):
        self.physics = physics
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        if np.any(self.std <= 0):
            raise ValueError("prior std must be positive")

    @property
    def n_sources(self) -> int:
        return self.physics.n_sources

    def to_model(self, u: np.ndarray) -> np.ndarray:
        return self.mean + self.std * u

    def forward_node(self, i: int, u: ad.Node) -> ad.Node:
        return self.physics.forward_node(i, ad.add(ad.mul(u, self.std), self.mean))

    def data_row(self, d: np.ndarray) -> np.ndarray:
        return self.physics.data_row(d)
