"""Amortized (forward-KL) training of the conditional flow and checkpoint I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .flows import ConditionalFlow, FlowArch, expected_shapes
from .prior import stack

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AVIF"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged in epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 200
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    val_batch: int = 64
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    @classmethod
    def long_schedule(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 1000, "lr_initial": 1e-4, "lr_final": 1e-6, **kw})

    def stepsize(self, epoch: int) -> float:
        """Geometric per-epoch decay from lr_initial to lr_final."""
        if self.epochs <= 1:
            return self.lr_initial
        frac = epoch / (self.epochs - 1)
        return float(self.lr_initial * (self.lr_final / self.lr_initial) ** frac)


@dataclass
class TrainingCurves:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float | None = None

    def rows(self):
        return [(e + 1, t, v) for e, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, t, v in self.rows():
                w.writerow([e, repr(t), repr(v)])


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return np.asarray(data[0], np.float64), np.asarray(data[1], np.float64)
    return stack(list(data))


def loss_node(flow: ConditionalFlow, p: dict, X: np.ndarray, Y: np.ndarray) -> ad.Node:
    """Mean over rows of 0.5 ||f(x; y)||^2 - log|det|."""
    g = next(iter(p.values())).graph
    feat = flow.features(p, g.const(Y))
    z, logdet = flow.forward_nodes(p, g.const(X), feat)
    per_row = ad.sub(ad.scale(ad.sqnorm(z, axis=1), 0.5), logdet)
    return ad.scale(ad.sum(per_row), 1.0 / X.shape[0])


def amortized_loss(flow: ConditionalFlow, batch) -> float:
    X, Y = _as_arrays(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    g = ad.Graph(record=False, check_finite=False)
    p = flow.bind(g)
    feat = flow.features(p, g.const(Y))
    z, logdet = flow.forward_nodes(p, g.const(X), feat)
    per_row = 0.5 * np.sum(z.value**2, axis=1) - logdet.value
    bad = np.flatnonzero(~np.isfinite(per_row))
    if bad.size:
        raise ad.NonFiniteError(f"pair {int(bad[0])}", "non-finite amortized loss")
    return float(np.mean(per_row))


def loss_and_grad(flow: ConditionalFlow, X: np.ndarray, Y: np.ndarray) -> tuple[float, dict]:
    g = ad.Graph()
    p = flow.bind(g, trainable=True)
    loss = loss_node(flow, p, X, Y)
    return float(loss.value), g.backward(loss)


def train_amortized(flow: ConditionalFlow, train, val, cfg: TrainConfig, progress=None):
    """Minibatch Adam on the amortized objective; mutates and returns ``flow``.

    Validation loss is evaluated after each epoch on a random subset of
    ``cfg.val_batch`` validation pairs.  With ``cfg.jitter > 0`` every
    training batch gets fresh Gaussian noise of that std added to the
    models, which keeps the learned density from collapsing onto the exact
    zeros of the prior.  On a non-finite loss the flow is
    restored to the end of the last good epoch and :class:`TrainingDiverged`
    is raised.
    """
    X, Y = _as_arrays(train)
    Xv, Yv = _as_arrays(val)
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(lr=cfg.lr_initial)
    curves = TrainingCurves()
    if cfg.epochs == 0:
        return flow, curves
    curves.initial_val_loss = amortized_loss(flow, (Xv, Yv))
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.stepsize(epoch)
        snapshot = {k: v.copy() for k, v in flow.params.items()}
        perm = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                xb = X[idx]
                if cfg.jitter > 0:
                    xb = xb + cfg.jitter * rng.standard_normal(xb.shape)
                loss, grads = loss_and_grad(flow, xb, Y[idx])
                ad.adam_step(flow.params, grads, state, lr=lr)
                total += loss * idx.size
            sub = rng.choice(Xv.shape[0], size=min(cfg.val_batch, Xv.shape[0]), replace=False)
            sub.sort()
            val_loss = amortized_loss(flow, (Xv[sub], Yv[sub]))
        except ad.NonFiniteError as exc:
            flow.params.update(snapshot)
            raise TrainingDiverged(epoch + 1, str(exc)) from exc
        curves.train_loss.append(total / n)
        curves.val_loss.append(val_loss)
        if progress is not None:
            progress(epoch + 1, curves.train_loss[-1], val_loss)
        logger.debug("epoch %d lr %.2e train %.5f val %.5f", epoch + 1, lr, total / n, val_loss)
    return flow, curves


# checkpoints -----------------------------------------------------------

def _blocks(flow: ConditionalFlow) -> list[tuple[str, np.ndarray]]:
    items = list(flow.params.items())
    items.append(("cond_shift", flow.cond_shift))
    items.append(("cond_scale", flow.cond_scale))
    return items


def save_checkpoint(flow: ConditionalFlow, path, summary: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of the file."""
    blocks = _blocks(flow)
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in blocks)
    header = {
        "arch": flow.arch.to_dict(),
        "blocks": [[name, list(v.shape)] for name, v in blocks],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "summary": summary or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorrupt("missing AVIF magic")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointCorrupt("truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen])
    except ValueError as exc:
        raise CheckpointCorrupt(f"unreadable header: {exc}") from None
    return header, 12 + hlen


def load_checkpoint(path, expect: FlowArch | None = None) -> ConditionalFlow:
    data = Path(path).read_bytes()
    header, offset = read_checkpoint_header(data)
    try:
        arch = FlowArch(**header["arch"])
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointCorrupt(f"bad architecture descriptor: {exc}") from None
    if expect is not None and expect != arch:
        raise ArchitectureMismatch(f"checkpoint architecture {arch} != expected {expect}")
    payload = data[offset:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointCorrupt("payload checksum mismatch (truncated or modified file)")
    shapes = expected_shapes(arch)
    arrays = {}
    pos = 0
    for name, shape in header["blocks"]:
        count = int(np.prod(shape, dtype=np.int64))
        chunk = payload[pos : pos + 8 * count]
        if len(chunk) != 8 * count:
            raise CheckpointCorrupt("truncated parameter block")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(payload):
        raise CheckpointCorrupt("trailing bytes after parameter blocks")
    cond_shift = arrays.pop("cond_shift", None)
    cond_scale = arrays.pop("cond_scale", None)
    if set(arrays) != set(shapes) or any(arrays[k].shape != tuple(s) for k, s in shapes.items()):
        raise ArchitectureMismatch("parameter blocks do not match the declared architecture")
    params = {k: arrays[k] for k in shapes}
    return ConditionalFlow(arch, params, cond_shift, cond_scale)


def checkpoint_summary(curves: TrainingCurves, cfg: TrainConfig) -> dict:
    return {
        "epochs": len(curves.train_loss),
        "train_loss": curves.train_loss,
        "val_loss": curves.val_loss,
        "initial_val_loss": curves.initial_val_loss,
        "config": asdict(cfg),
    }
