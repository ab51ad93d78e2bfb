"""k-fold experiments, latent-space sampling and the configuration they run from."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import (correlation_det, metric_chamfer, metric_E, metric_l2_rms, metric_rcd,
                       pca_fit, pca_reconstruct, per_vertex_rcd, write_csv)
from .mesh import Mesh, validate_shared_topology
from .model import ModelConfig, ModelParams, build_model, decode, encode
from .pooling import PoolingHierarchy, build_hierarchy
from .procaug import BRANCHES, choose_reference, fit_policy
from .rng import stream
from .synthetic import SyntheticSpec
from .training import METRIC_FIELDS, TrainConfig, train

NUM_LEVELS = 4
FOLD_FIELDS = ("latent", "beta", "arm", "fold", "n_train", "n_test",
               "L2", "RCD", "chamfer", "E", "det100", "train_loss")
METRICS = ("L2", "RCD", "chamfer", "E", "det100")


class ExperimentError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=150))
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    folds: int = 10
    arms: tuple[str, ...] = ("procaug",)
    latents: tuple[int, ...] = (8,)
    betas: tuple[float, ...] = (1e-3,)
    seed: int = 0
    proper: bool = False
    center: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        for name in ("arms", "latents", "betas"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.arms) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown augmentation arms {sorted(unknown)}; choose from {sorted(BRANCHES)}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "train": self.train.to_dict(),
            "synthetic": self.synthetic.to_dict(), "folds": self.folds, "arms": list(self.arms),
            "latents": list(self.latents), "betas": list(self.betas), "seed": self.seed,
            "proper": self.proper, "center": self.center,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown configuration keys {sorted(extra)}")
        kw = {}
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        if "synthetic" in d:
            kw["synthetic"] = SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v
                                               for k, v in d.pop("synthetic").items()})
        kw.update(d)
        return cls(**kw)


def load_config(path) -> ExperimentConfig:
    """Read a JSON configuration; missing sections and keys keep their defaults."""
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# folds


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``0..n-1`` cut into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = stream(seed, "folds").permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def _coords(m) -> np.ndarray:
    return np.asarray(getattr(m, "vertices", m), dtype=np.float64)


def hierarchy_for(meshes: Sequence[Mesh], factor: float = 4.0) -> PoolingHierarchy:
    """Pooling hierarchy built on the median-norm member of ``meshes``."""
    return build_hierarchy(meshes[choose_reference(meshes)], NUM_LEVELS, factor)


@dataclass
class FoldModel:
    params: ModelParams
    history: list[dict]
    train_idx: np.ndarray
    test_idx: np.ndarray


def fit_fold(config: ExperimentConfig, corpus: Sequence[Mesh], train_idx, test_idx,
             arm: str, hierarchy: PoolingHierarchy | None = None, log=None) -> FoldModel:
    """Train one model on ``train_idx`` with augmentation ``arm``; ``test_idx`` is the validation set."""
    train_set = [corpus[i] for i in train_idx]
    test_set = [corpus[i] for i in test_idx]
    if hierarchy is None:
        hierarchy = hierarchy_for(train_set, config.model.pool_factor)
    policy = None
    if arm != "none":
        ref = train_set[choose_reference(train_set)]
        policy = fit_policy(train_set, ref, proper=config.proper, center=config.center).with_mode(arm)
    template = np.mean([_coords(m) for m in train_set], axis=0)
    params = build_model(config.model, hierarchy, config.seed, template=template)
    params, history = train(params, train_set, policy, config.train, config.seed, val=test_set, log=log)
    return FoldModel(params, history, np.asarray(train_idx), np.asarray(test_idx))


def evaluate_fold(params: ModelParams, meshes: Sequence) -> dict[str, float]:
    """Held-out means of L2 (RMS, cm), RCD, Chamfer and E, plus 100*det(R) of the means."""
    x = np.stack([_coords(m) for m in meshes])
    mu, _ = encode(params, x)
    mu = np.atleast_2d(mu)
    rec = decode(params, mu)
    out = {
        "L2": float(np.mean([metric_l2_rms(r, t) for r, t in zip(rec, x)])),
        "RCD": float(np.mean([metric_rcd(r, t) for r, t in zip(rec, x)])),
        "chamfer": float(np.mean([metric_chamfer(r, t) for r, t in zip(rec, x)])),
        "E": float(np.mean([metric_E(r, t) for r, t in zip(rec, x)])),
    }
    try:
        out["det100"] = correlation_det(mu)[1] if len(mu) >= 2 else float("nan")
    except ValueError:
        out["det100"] = float("nan")
    return out


@dataclass
class ExperimentReport:
    fold_rows: list[dict]
    aggregate_rows: list[dict]
    models: dict = field(default_factory=dict)  # (latent, beta, arm, fold) -> FoldModel


def _cell_name(latent: int, beta: float, arm: str) -> str:
    return f"d{latent}_b{beta!r}_{arm}"


def aggregate(rows: Sequence[dict]) -> dict:
    out = {k: rows[0][k] for k in ("latent", "beta", "arm")}
    out["folds"] = len(rows)
    for m in METRICS:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        out[f"{m}_mean"] = float(np.mean(vals))
        out[f"{m}_std"] = float(np.std(vals))
    return out


def run_experiment(config: ExperimentConfig, corpus: Sequence[Mesh], out_dir=None,
                   progress=None, keep_models: bool = False) -> ExperimentReport:
    """Train and evaluate every (latent, beta, arm) cell on every fold.

    One hierarchy per fold is shared by all cells. With ``out_dir`` set, writes
    ``folds.csv``, ``aggregate.csv``, one ``cell_<name>.csv`` per cell and the
    per-epoch log of every run under ``epochs/``. ``keep_models`` retains every
    trained :class:`FoldModel` in ``report.models``.
    """
    validate_shared_topology(corpus)
    folds = kfold_split(len(corpus), config.folds, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    hierarchies: dict[int, PoolingHierarchy] = {}
    fold_rows, agg_rows = [], []
    models = {}
    for latent in config.latents:
        for beta in config.betas:
            mcfg = replace(config.model, latent_dim=int(latent), beta=float(beta))
            cfg = replace(config, model=mcfg)
            for arm in config.arms:
                cell = []
                for f, test_idx in enumerate(folds):
                    train_idx = np.concatenate([folds[g] for g in range(len(folds)) if g != f])
                    try:
                        if f not in hierarchies:
                            hierarchies[f] = hierarchy_for([corpus[i] for i in train_idx],
                                                           mcfg.pool_factor)
                        fm = fit_fold(cfg, corpus, train_idx, test_idx, arm, hierarchies[f])
                        metrics = evaluate_fold(fm.params, [corpus[i] for i in test_idx])
                    except Exception as exc:  # noqa: BLE001 - reported with the fold id
                        raise ExperimentError(f, exc) from exc
                    row = {"latent": int(latent), "beta": float(beta), "arm": arm, "fold": f,
                           "n_train": len(train_idx), "n_test": len(test_idx), **metrics,
                           "train_loss": fm.history[-1]["train_loss"] if fm.history else float("nan")}
                    cell.append(row)
                    if keep_models:
                        models[(int(latent), float(beta), arm, f)] = fm
                    if out is not None:
                        write_csv(out / "epochs" / f"{_cell_name(latent, beta, arm)}_fold{f}.csv",
                                  METRIC_FIELDS, [[h[k] for k in METRIC_FIELDS] for h in fm.history])
                    if progress is not None:
                        progress(row)
                fold_rows.extend(cell)
                agg_rows.append(aggregate(cell))
                if out is not None:
                    write_csv(out / f"cell_{_cell_name(latent, beta, arm)}.csv", FOLD_FIELDS,
                              [[r[k] for k in FOLD_FIELDS] for r in cell])
    if out is not None:
        write_csv(out / "folds.csv", FOLD_FIELDS, [[r[k] for k in FOLD_FIELDS] for r in fold_rows])
        agg_fields = list(agg_rows[0])
        write_csv(out / "aggregate.csv", agg_fields, [[r[k] for k in agg_fields] for r in agg_rows])
    return ExperimentReport(fold_rows, agg_rows, models)


def pca_baseline(corpus: Sequence, dims: Sequence[int], folds: int, seed: int) -> list[dict]:
    """Held-out PCA metrics per latent size over the same folds as :func:`run_experiment`."""
    x = np.stack([_coords(m) for m in corpus])
    split = kfold_split(len(corpus), folds, seed)
    rows = []
    for d in dims:
        for f, test_idx in enumerate(split):
            train_idx = np.concatenate([split[g] for g in range(len(split)) if g != f])
            model = pca_fit(x[train_idx].reshape(len(train_idx), -1), int(d))
            rec = [pca_reconstruct(model, x[i]) for i in test_idx]
            tgt = [x[i] for i in test_idx]
            rows.append({
                "latent": int(d), "fold": f,
                "L2": float(np.mean([metric_l2_rms(r, t) for r, t in zip(rec, tgt)])),
                "RCD": float(np.mean([metric_rcd(r, t) for r, t in zip(rec, tgt)])),
                "chamfer": float(np.mean([metric_chamfer(r, t) for r, t in zip(rec, tgt)])),
                "E": float(np.mean([metric_E(r, t) for r, t in zip(rec, tgt)])),
            })
    return rows


# ---------------------------------------------------------------------------
# generation


def extrapolate(params: ModelParams, mesh, noise_scale: float, count: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``count`` decodes of ``mu + S * noise`` and their per-vertex RCD maps against ``mesh``.

    Each sample is decoded on its own so that ``S = 0`` reproduces ``decode(mu)`` bit for bit.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    target = _coords(mesh)
    mu, _ = encode(params, target)
    noise = rng.standard_normal((count, mu.size))
    meshes = np.stack([decode(params, mu + noise_scale * n) for n in noise]) if count else \
        np.zeros((0,) + target.shape)
    maps = np.stack([per_vertex_rcd(m, target) for m in meshes]) if count else np.zeros((0, len(target)))
    return meshes, maps


def interpolate(params: ModelParams, mesh_a, mesh_b, steps: int) -> np.ndarray:
    """Decodes of ``mu_a + (i/steps)(mu_b - mu_a)`` for ``i = 0..steps``; endpoints use the means exactly."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mu_a, _ = encode(params, mesh_a)
    mu_b, _ = encode(params, mesh_b)
    out = []
    for i in range(steps + 1):
        if i == 0:
            z = mu_a
        elif i == steps:
            z = mu_b
        else:
            z = mu_a + (i / steps) * (mu_b - mu_a)
        out.append(decode(params, z))
    return np.stack(out)


def generation_summary(params: ModelParams, mesh, scales: Sequence[float], count: int,
                       seed: int) -> list[dict]:
    """Mean and max RCD to ``mesh`` per noise scale.

    Every scale reuses the same ``count`` noise draws from ``stream(seed,
    "sampling")``, so differences between rows come from the scale alone.
    """
    rows = []
    for s in scales:
        meshes, maps = extrapolate(params, mesh, float(s), count, stream(seed, "sampling"))
        rcd = [metric_rcd(m, _coords(mesh)) for m in meshes]
        rows.append({"S": float(s), "count": count, "mean_RCD": float(np.mean(rcd)),
                     "max_vertex_RCD": float(maps.max()) if maps.size else 0.0})
    return rows


__all__ = [
    "ExperimentConfig", "ExperimentError", "ExperimentReport", "kfold_split", "run_experiment",
    "fit_fold", "evaluate_fold", "aggregate", "pca_baseline", "extrapolate", "interpolate",
    "generation_summary", "load_config", "save_config", "hierarchy_for",
]
