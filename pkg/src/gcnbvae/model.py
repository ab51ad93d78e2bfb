"""Graph-convolutional beta-VAE on a fixed mesh topology.

Batched signals are node-major: a batch of ``B`` meshes with ``F`` features
per vertex is an ``(N, B*F)`` array, so one sparse product applies a graph
operator to the whole batch. Dense layers work on the batch-major
``(B, N*F)`` view obtained with :func:`~gcnbvae.autodiff.swap_blocks`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .pooling import PoolingHierarchy, apply_down, apply_up
from .rng import stream
from .spectral import ChebLayer, cheb_forward

NUM_STAGES = 4
LOGVAR_CLAMP = 10.0


class ContractError(ValueError):
    """Inputs violate a model precondition (shape, level count, configuration)."""


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 8
    beta: float = 1e-3
    cheb_order: int = 6
    channels: tuple[int, ...] = (3, 32, 32, 32, 64)
    pool_factor: float = 4.0
    hidden: int = 64
    alpha_vertex: float = 1.0
    alpha_chamfer: float = 1.0
    alpha_edge: float = 0.1
    alpha_normal: float = 0.1
    normal_abs: bool = True
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.channels[0] != 3:
            raise ContractError(f"channels must start at 3, got {self.channels}")
        if len(self.channels) != NUM_STAGES + 1:
            raise ContractError(f"need {NUM_STAGES + 1} channel widths, got {len(self.channels)}")
        if min(self.channels) < 1 or self.latent_dim < 1 or self.hidden < 1 or self.cheb_order < 1:
            raise ContractError("widths, latent_dim and cheb_order must be positive")
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.pool_factor <= 1:
            raise ContractError("pool_factor must exceed 1")

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        # 64 -> 32 -> 32 -> 32 -> 32; a per-vertex linear map then gives 3 coordinates
        rev = self.channels[::-1]
        return rev[:-1] + (rev[-2],)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


def param_shapes(config: ModelConfig, sizes) -> dict[str, tuple[int, int]]:
    """Name -> shape for every trainable array, in canonical order."""
    k, ch, h, d = config.cheb_order, config.channels, config.hidden, config.latent_dim
    coarse = sizes[NUM_STAGES] * ch[-1]
    shapes = {}
    for i in range(NUM_STAGES):
        shapes[f"enc{i}.theta"] = (k * ch[i], ch[i + 1])
        if config.use_bias:
            shapes[f"enc{i}.bias"] = (1, ch[i + 1])
    shapes.update({
        "enc_dense.w": (coarse, h), "enc_dense.b": (1, h),
        "mu.w": (h, d), "mu.b": (1, d),
        "logvar.w": (h, d), "logvar.b": (1, d),
        "dec_dense1.w": (d, h), "dec_dense1.b": (1, h),
        "dec_dense2.w": (h, coarse), "dec_dense2.b": (1, coarse),
    })
    dch = config.decoder_channels
    for j in range(NUM_STAGES):
        shapes[f"dec{j}.theta"] = (k * dch[j], dch[j + 1])
        if config.use_bias:
            shapes[f"dec{j}.bias"] = (1, dch[j + 1])
    shapes["out.w"] = (dch[-1], 3)
    shapes["out.b"] = (sizes[0], 3)  # per-vertex offset, initialized to a template shape
    return shapes


@dataclass
class ModelParams:
    """Trainable arrays plus the fixed configuration and hierarchy they belong to."""

    config: ModelConfig
    hierarchy: PoolingHierarchy
    values: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.hierarchy.sizes[0]

    def names(self) -> list[str]:
        return list(self.values)

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def offsets(self) -> list[tuple[str, int, tuple[int, int]]]:
        out, pos = [], 0
        for name, v in self.values.items():
            out.append((name, pos, v.shape))
            pos += v.size
        return out

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.count():
            raise ContractError(f"flat vector has {flat.size} entries, expected {self.count()}")
        values = {name: flat[pos:pos + int(np.prod(shape))].reshape(shape).copy()
                  for name, pos, shape in self.offsets()}
        return ModelParams(self.config, self.hierarchy, values)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.hierarchy, {k: v.copy() for k, v in self.values.items()})


@dataclass(frozen=True)
class LatentCode:
    z: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray


def build_model(config: ModelConfig, hierarchy: PoolingHierarchy, seed: int,
                template=None) -> ModelParams:
    """Glorot-uniform weights and zero biases drawn from the ``init`` stream of ``seed``.

    The per-vertex output offset starts at ``template`` (an (N, 3) shape,
    typically the training mean), defaulting to the hierarchy's root mesh.
    """
    if len(hierarchy.levels) != NUM_STAGES:
        raise ContractError(f"hierarchy has {len(hierarchy.levels)} levels, model needs {NUM_STAGES}")
    rng = stream(seed, "init")
    values = {}
    for name, shape in param_shapes(config, hierarchy.sizes).items():
        if name.endswith((".b", ".bias")):
            values[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            values[name] = rng.uniform(-limit, limit, size=shape)
    if template is None:
        template = hierarchy.meshes[0].vertices
    template = np.asarray(getattr(template, "vertices", template), dtype=np.float64)
    if template.shape != values["out.b"].shape:
        raise ContractError(f"template shape {template.shape}, expected {values['out.b'].shape}")
    values["out.b"] = template.copy()
    return ModelParams(config, hierarchy, values)


# ---------------------------------------------------------------------------
# graph construction (differentiable)


def _dense(x: ad.Value, p: dict, name: str) -> ad.Value:
    return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _cheb(params: ModelParams, p: dict, name: str, level: int, x, batch: int) -> ad.Value:
    layer = ChebLayer(p[f"{name}.theta"], p.get(f"{name}.bias"),
                      params.hierarchy.laplacians[level], params.config.cheb_order)
    return cheb_forward(layer, x, batch=batch)


def to_node_major(batch: np.ndarray) -> np.ndarray:
    """(B, N, 3) -> (N, B*3)."""
    b, n, c = batch.shape
    return batch.transpose(1, 0, 2).reshape(n, b * c)


def from_node_major(x: np.ndarray, batch: int) -> np.ndarray:
    """(N, B*3) -> (B, N, 3)."""
    n = x.shape[0]
    return x.reshape(n, batch, -1).transpose(1, 0, 2)


def _as_batch(vertices) -> np.ndarray:
    v = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    return v[None] if v.ndim == 2 else v


def encode_graph(params: ModelParams, p: dict, x, batch: int) -> tuple[ad.Value, ad.Value]:
    """Encoder on a node-major ``(N, batch*3)`` input; returns ``(mu, log_var)`` of shape (batch, d)."""
    h = ad.as_value(x)
    if h.shape[0] != params.n_vertices:
        raise ContractError(f"input has {h.shape[0]} vertices, model expects {params.n_vertices}")
    for i, level in enumerate(params.hierarchy.levels):
        h = apply_down(level, ad.elu(_cheb(params, p, f"enc{i}", i, h, batch)))
    h = ad.swap_blocks(h, h.shape[0], batch)
    h = ad.elu(_dense(h, p, "enc_dense"))
    mu = _dense(h, p, "mu")
    log_var = ad.clip(_dense(h, p, "logvar"), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, log_var


def decode_graph(params: ModelParams, p: dict, z) -> ad.Value:
    """Decoder from a (batch, d) latent to a node-major ``(N, batch*3)`` output."""
    z = ad.as_value(z)
    batch = z.shape[0]
    if z.data.ndim != 2 or z.shape[1] != params.config.latent_dim:
        raise ContractError(f"latent has shape {z.shape}, expected (B, {params.config.latent_dim})")
    h = ad.elu(_dense(z, p, "dec_dense1"))
    h = ad.elu(_dense(h, p, "dec_dense2"))
    h = ad.swap_blocks(h, batch, params.hierarchy.sizes[NUM_STAGES])
    for j in range(NUM_STAGES):
        lvl = NUM_STAGES - 1 - j
        h = apply_up(params.hierarchy.levels[lvl], h)
        h = ad.elu(_cheb(params, p, f"dec{j}", lvl, h, batch))
    n, width = h.shape[0], params.config.decoder_channels[-1]
    out = ad.matmul(ad.reshape(h, (n * batch, width)), p["out.w"])
    out = out + ad.gather_rows(p["out.b"], np.repeat(np.arange(n), batch))
    return ad.reshape(out, (n, batch * 3))


def reparameterize_graph(mu: ad.Value, log_var: ad.Value, eps: np.ndarray | None) -> ad.Value:
    if eps is None:
        return mu
    return mu + ad.mul(ad.exp(ad.scale(log_var, 0.5)), eps)


# ---------------------------------------------------------------------------
# numpy-level API


def encode(params: ModelParams, vertices) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, log_var)`` for one mesh (vectors of length d) or a (B, N, 3) batch ((B, d) arrays)."""
    batch = _as_batch(vertices)
    if batch.shape[1:] != (params.n_vertices, 3):
        raise ContractError(f"expected (N={params.n_vertices}, 3) vertices, got {batch.shape[1:]}")
    mu, log_var = encode_graph(params, params.values, to_node_major(batch), batch.shape[0])
    if np.ndim(getattr(vertices, "vertices", vertices)) == 2:
        return mu.data[0].copy(), log_var.data[0].copy()
    return mu.data.copy(), log_var.data.copy()


def reparameterize(mu, log_var, rng: np.random.Generator | None = None,
                   deterministic: bool = False) -> LatentCode:
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise ContractError(f"mu {mu.shape} and log_var {log_var.shape} differ")
    if deterministic:
        return LatentCode(mu.copy(), mu, log_var)
    if rng is None:
        raise ContractError("a generator is required for stochastic sampling")
    # only the upper end can overflow; very negative log-variances collapse to z = mu
    sigma = np.exp(0.5 * np.minimum(log_var, LOGVAR_CLAMP))
    return LatentCode(mu + sigma * rng.standard_normal(mu.shape), mu, log_var)


def decode(params: ModelParams, z) -> np.ndarray:
    """Vertices (N, 3) for a length-d latent, or (B, N, 3) for a (B, d) batch."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.ndim != 2 or zb.shape[1] != params.config.latent_dim:
        raise ContractError(f"latent has shape {z.shape}, expected length {params.config.latent_dim}")
    out = from_node_major(decode_graph(params, params.values, zb).data, zb.shape[0])
    return out[0].copy() if single else out.copy()


def reconstruct(params: ModelParams, vertices) -> np.ndarray:
    """Deterministic round trip ``decode(encode(x))`` with ``z = mu``."""
    mu, _ = encode(params, vertices)
    return decode(params, mu)
