"""Conditional affine-coupling normalizing flow.

``f(x; y)`` maps a flattened model vector ``x`` to a latent vector ``z``
(normalizing direction).  A condition image ``y`` is standardized with
fixed statistics and linearly encoded once; the feature vector is shared
by every coupling layer.

Coupling layer ``k`` splits coordinates into a passive and a transformed
set and applies::

    z_t = x_t * exp(alpha * tanh(r)) + t,    (r, t) = C(x_p ++ features)

where ``C`` is a two-hidden-layer tanh perceptron plus an optional linear
map from the condition features alone.  The log-determinant is the sum
of ``alpha * tanh(r)``.  The output layer and skip of every conditioner
start at zero, making a fresh flow the identity.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))
SAMPLE_CHUNK = 256


@dataclass(frozen=True)
class FlowArch:
    dim: int
    cond_dim: int
    n_layers: int = 8
    hidden: int = 0
    features: int = 0
    alpha: float = 2.0
    seed: int = 0
    linear_skip: bool = True

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling flows need dim >= 2")
        if self.n_layers < 1:
            raise ValueError("need at least one coupling layer")
        if self.cond_dim < 1:
            raise ValueError("condition dimension must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        # zero widths mean "use the defaults"
        if self.hidden <= 0:
            object.__setattr__(self, "hidden", 4 * self.dim)
        if self.features <= 0:
            object.__setattr__(self, "features", 2 * self.dim)

    def to_dict(self) -> dict:
        return asdict(self)


def split_pattern(dim: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """(passive, transformed) index sets; cycles parity and halves, swapping roles."""
    idx = np.arange(dim)
    if (layer // 2) % 2 == 0:
        a, b = idx[0::2], idx[1::2]
    else:
        a, b = idx[: dim // 2], idx[dim // 2 :]
    return (a, b) if layer % 2 == 0 else (b, a)


class ConditionalFlow:
    def __init__(self, arch: FlowArch, params: dict[str, np.ndarray], cond_shift=None, cond_scale=None):
        self.arch = arch
        self.params = params
        self.cond_shift = np.zeros(arch.cond_dim) if cond_shift is None else np.asarray(cond_shift, np.float64)
        self.cond_scale = np.ones(arch.cond_dim) if cond_scale is None else np.asarray(cond_scale, np.float64)
        self.splits = [split_pattern(arch.dim, k) for k in range(arch.n_layers)]
        self.merge = [np.argsort(np.concatenate(s)) for s in self.splits]

    @property
    def dim(self) -> int:
        return self.arch.dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return expected_shapes(self.arch)

    def set_condition_stats(self, conds: np.ndarray):
        """Fix the standardization of condition inputs from a training set."""
        conds = np.asarray(conds, dtype=np.float64).reshape(len(conds), -1)
        self.cond_shift = conds.mean(axis=0)
        scale = float(conds.std())
        self.cond_scale = np.full(self.arch.cond_dim, scale if scale > 0 else 1.0)

    def copy(self) -> "ConditionalFlow":
        return ConditionalFlow(
            self.arch, {k: v.copy() for k, v in self.params.items()}, self.cond_shift.copy(), self.cond_scale.copy()
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(sorted(self.arch.to_dict().items())).encode())
        for name in self.params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        h.update(self.cond_shift.tobytes())
        h.update(self.cond_scale.tobytes())
        return h.hexdigest()

    # graph construction ------------------------------------------------

    def bind(self, graph: ad.Graph, trainable: bool = False) -> dict[str, ad.Node]:
        if trainable:
            return {k: graph.param(k, v) for k, v in self.params.items()}
        return {k: graph.input(k, v) for k, v in self.params.items()}

    def features(self, p: dict[str, ad.Node], y: ad.Node) -> ad.Node:
        """Encoded condition features, (batch, features)."""
        g = y.graph
        yn = ad.div(ad.sub(y, g.const(self.cond_shift)), g.const(self.cond_scale))
        return ad.add(ad.matmul(yn, p["enc.W"]), p["enc.b"])

    def _conditioner(self, p, k: int, xp: ad.Node, feat: ad.Node):
        u = ad.concat([xp, feat], axis=1)
        h = ad.tanh(ad.add(ad.matmul(u, p[f"c{k}.W1"]), p[f"c{k}.b1"]))
        h = ad.tanh(ad.add(ad.matmul(h, p[f"c{k}.W2"]), p[f"c{k}.b2"]))
        out = ad.add(ad.matmul(h, p[f"c{k}.W3"]), p[f"c{k}.b3"])
        if self.arch.linear_skip:
            out = ad.add(out, ad.matmul(feat, p[f"c{k}.Ws"]))
        nt = self.splits[k][1].size
        raw = ad.slice(out, np.s_[:nt], axis=1)
        t = ad.slice(out, np.s_[nt:], axis=1)
        return ad.scale(ad.tanh(raw), self.arch.alpha), t

    def forward_nodes(self, p, x: ad.Node, feat: ad.Node) -> tuple[ad.Node, ad.Node]:
        """x (B, D) -> z (B, D) and per-row log-determinant (B,)."""
        logdet = None
        for k, (passive, trans) in enumerate(self.splits):
            xp = ad.slice(x, passive, axis=1)
            xt = ad.slice(x, trans, axis=1)
            log_s, t = self._conditioner(p, k, xp, feat)
            zt = ad.add(ad.mul(xt, ad.exp(log_s)), t)
            x = ad.slice(ad.concat([xp, zt], axis=1), self.merge[k], axis=1)
            ld = ad.sum(log_s, axis=1)
            logdet = ld if logdet is None else ad.add(logdet, ld)
        return x, logdet

    def inverse_nodes(self, p, z: ad.Node, feat: ad.Node) -> ad.Node:
        """z (B, D) -> x (B, D)."""
        for k in reversed(range(len(self.splits))):
            passive, trans = self.splits[k]
            zp = ad.slice(z, passive, axis=1)
            zt = ad.slice(z, trans, axis=1)
            log_s, t = self._conditioner(p, k, zp, feat)
            xt = ad.mul(ad.sub(zt, t), ad.exp(ad.scale(log_s, -1.0)))
            z = ad.slice(ad.concat([zp, xt], axis=1), self.merge[k], axis=1)
        return z

    def tile_features(self, feat: ad.Node, batch: int) -> ad.Node:
        if feat.shape[0] == batch:
            return feat
        return ad.matmul(feat.graph.const(np.ones((batch, 1))), feat)


class IdentityFlow:
    """The identity map on R^D; lets the correction machinery run directly in model space."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.params: dict[str, np.ndarray] = {}

    def bind(self, graph, trainable=False):
        return {}

    def features(self, p, y):
        return None

    def tile_features(self, feat, batch):
        return None

    def forward_nodes(self, p, x, feat):
        return x, ad.scale(ad.sum(x, axis=1), 0.0)

    def inverse_nodes(self, p, z, feat):
        return z

    def fingerprint(self) -> str:
        return hashlib.sha256(f"identity:{self.dim}".encode()).hexdigest()


def expected_shapes(arch: FlowArch) -> dict[str, tuple[int, ...]]:
    shapes = {"enc.W": (arch.cond_dim, arch.features), "enc.b": (arch.features,)}
    for k in range(arch.n_layers):
        passive, trans = split_pattern(arch.dim, k)
        h = arch.hidden
        shapes[f"c{k}.W1"] = (passive.size + arch.features, h)
        shapes[f"c{k}.b1"] = (h,)
        shapes[f"c{k}.W2"] = (h, h)
        shapes[f"c{k}.b2"] = (h,)
        shapes[f"c{k}.W3"] = (h, 2 * trans.size)
        shapes[f"c{k}.b3"] = (2 * trans.size,)
        if arch.linear_skip:
            shapes[f"c{k}.Ws"] = (arch.features, 2 * trans.size)
    return shapes


def build_flow(
    dim: int,
    n_layers: int = 8,
    hidden: int = 0,
    features: int = 0,
    alpha: float = 2.0,
    seed: int = 0,
    cond_dim: int | None = None,
    linear_skip: bool = True,
) -> ConditionalFlow:
    """Fresh flow; identity map at construction (zero conditioner output layers)."""
    arch = FlowArch(dim, cond_dim or dim, n_layers, hidden, features, alpha, seed, linear_skip)
    return init_flow(arch)


def init_flow(arch: FlowArch) -> ConditionalFlow:
    rng = np.random.default_rng(arch.seed)
    params = {}
    for name, shape in expected_shapes(arch).items():
        last = name.endswith((".W3", ".b3", ".Ws")) or len(shape) == 1
        if last:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return ConditionalFlow(arch, params)


def _rows(a, width: int) -> tuple[np.ndarray, bool]:
    # (batch, width) rows, or a single vector/image of `width` entries
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] == width:
        return a, False
    if a.ndim == 1 or a.size == width:
        return a.reshape(1, -1), True
    return a.reshape(a.shape[0], -1), False


def _prepare(flow, x, y):
    xr, single = _rows(x, flow.dim)
    if xr.shape[1] != flow.dim:
        raise ValueError(f"expected model vectors of length {flow.dim}, got {xr.shape[1]}")
    if isinstance(flow, IdentityFlow):
        return xr, None, single
    yr, _ = _rows(y, flow.arch.cond_dim)
    if y is None or yr.shape[1] != flow.arch.cond_dim:
        raise ValueError(f"condition must have {flow.arch.cond_dim} entries")
    if yr.shape[0] not in (1, xr.shape[0]):
        raise ValueError("condition batch does not match model batch")
    return xr, yr, single


def flow_forward(flow, x, y) -> tuple[np.ndarray, np.ndarray | float]:
    """z = f(x; y) and log|det df/dx|.  Accepts one vector or a (batch, D) array."""
    xr, yr, single = _prepare(flow, x, y)
    g = ad.Graph(record=False)
    p = flow.bind(g)
    feat = None if yr is None else flow.tile_features(flow.features(p, g.const(yr)), xr.shape[0])
    z, ld = flow.forward_nodes(p, g.const(xr), feat)
    if single:
        return z.value[0], float(ld.value[0])
    return z.value, ld.value


def flow_inverse(flow, z, y) -> np.ndarray:
    """x = f^{-1}(z; y), layer by layer in reverse."""
    zr, yr, single = _prepare(flow, z, y)
    out = np.empty_like(zr)
    for start in range(0, zr.shape[0], SAMPLE_CHUNK):
        stop = min(start + SAMPLE_CHUNK, zr.shape[0])
        g = ad.Graph(record=False)
        p = flow.bind(g)
        feat = None
        if yr is not None:
            yb = yr if yr.shape[0] == 1 else yr[start:stop]
            feat = flow.tile_features(flow.features(p, g.const(yb)), stop - start)
        out[start:stop] = flow.inverse_nodes(p, g.const(zr[start:stop]), feat).value
    return out[0] if single else out


def gaussian_log_density(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.sum(z * z, axis=1)


def log_density(flow, x, y):
    """log p(x | y) = log N(f(x; y) | 0, I) + log|det df/dx|."""
    z, ld = flow_forward(flow, x, y)
    out = gaussian_log_density(z) + ld
    return float(out[0]) if np.ndim(ld) == 0 else out
