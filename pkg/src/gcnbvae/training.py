"""Mini-batch Adam training of the graph VAE with optional augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .analysis import metric_E, metric_rcd
from .losses import total_loss, target_normals
from .model import (ModelParams, decode, decode_graph, encode, encode_graph,
                    reparameterize_graph, to_node_major)
from .procaug import AugmentPolicy, augment
from .rng import stream

TERMS = ("vertex", "chamfer", "edge", "normal", "kl")
METRIC_FIELDS = ("epoch", "train_loss") + TERMS + ("val_E", "val_RCD")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    """Adam without weight decay over a dict of arrays, updated in place."""

    def __init__(self, shapes: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, values: dict, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            values[k] -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _coords(m) -> np.ndarray:
    return np.asarray(getattr(m, "vertices", m), dtype=np.float64)


def evaluate(params: ModelParams, meshes: Sequence) -> tuple[float, float]:
    """Mean E (%) and mean RCD (cm) of deterministic reconstructions."""
    if not meshes:
        return float("nan"), float("nan")
    x = np.stack([_coords(m) for m in meshes])
    mu, _ = encode(params, x)
    rec = decode(params, np.atleast_2d(mu))
    es = [metric_E(r, t) for r, t in zip(rec, x)]
    rs = [metric_rcd(r, t) for r, t in zip(rec, x)]
    return float(np.mean(es)), float(np.mean(rs))


def train_step(params: ModelParams, batch: np.ndarray, faces: np.ndarray,
               eps: np.ndarray | None):
    """Loss value, term report and gradients for one (B, N, 3) batch."""
    leaves = {k: ad.Value(v) for k, v in params.values.items()}
    b = batch.shape[0]
    x = to_node_major(batch)
    mu, log_var = encode_graph(params, leaves, x, b)
    z = reparameterize_graph(mu, log_var, eps)
    out = decode_graph(params, leaves, z)
    loss, report = total_loss(params.config, out, x, mu, log_var, faces,
                              target_normals(x, faces, b), batch=b)
    ad.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
    return report, grads


def train(params: ModelParams, corpus: Sequence, policy: AugmentPolicy | None,
          cfg: TrainConfig, seed: int, val: Sequence = (), log=None):
    """Train a copy of ``params`` and return it with one metrics dict per epoch.

    Batches are reshuffled each epoch from the ``shuffle`` stream. Item ``i``
    of epoch ``e`` is augmented with ``stream(seed, "augment", e, i)`` and the
    reparameterization noise of batch ``j`` comes from ``stream(seed,
    "sampling", e, j)``, so a run is fully determined by ``seed``.
    ``log`` is called with each epoch's record as it completes.
    """
    params = params.copy()
    if cfg.epochs == 0:
        return params, []
    data = [_coords(m) for m in corpus]
    if not data:
        raise ValueError("training corpus is empty")
    faces = params.hierarchy.meshes[0].faces
    opt = Adam({k: v.shape for k, v in params.values.items()}, cfg)
    history = []
    d = params.config.latent_dim
    for epoch in range(1, cfg.epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(len(data))
        sums = dict.fromkeys(("total",) + TERMS, 0.0)
        n_batches = 0
        for j, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            items = []
            for i in idx:
                m = data[i]
                if policy is not None:
                    m = augment(m, policy, stream(seed, "augment", epoch, int(i)))
                items.append(m)
            batch = np.stack(items)
            eps = stream(seed, "sampling", epoch, j).standard_normal((len(idx), d))
            report, grads = train_step(params, batch, faces, eps)
            opt.step(params.values, grads)
            for k, v in report.as_dict().items():
                sums[k] += v
            n_batches += 1
        val_e, val_rcd = evaluate(params, val)
        rec = {"epoch": epoch, "train_loss": sums["total"] / n_batches}
        rec.update({k: sums[k] / n_batches for k in TERMS})
        rec.update({"val_E": val_e, "val_RCD": val_rcd})
        history.append(rec)
        if log is not None:
            log(rec)
    return params, history
