"""Normalized graph Laplacians and Chebyshev spectral convolution."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from . import autodiff as ad


class LambdaMaxWarning(RuntimeWarning):
    """Power iteration hit ``max_iter``; the safe bound 2.0 was used instead."""


def normalized_laplacian(adjacency) -> sp.csr_matrix:
    """``I - D^{+1/2} A D^{+1/2}`` with the Moore-Penrose inverse for zero degrees."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if abs(a - a.T).max() > 0:
        raise ValueError("adjacency must be symmetric")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    lap = sp.identity(a.shape[0], format="csr") - d @ a @ d
    lap = sp.csr_matrix(lap)
    lap.eliminate_zeros()
    return lap


def estimate_lambda_max(lap, tol: float = 1e-6, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    Falls back to 2.0 (the normalized-Laplacian bound) with a
    :class:`LambdaMaxWarning` if it does not converge.
    """
    lap = sp.csr_matrix(lap)
    n = lap.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(max_iter):
        w = lap @ v
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if prev is not None and abs(lam - prev) <= tol * max(abs(lam), 1e-300):
            return lam
        prev = lam
    warnings.warn(f"power iteration did not converge in {max_iter} steps; using 2.0",
                  LambdaMaxWarning, stacklevel=2)
    return 2.0


def exact_lambda_max(lap, dense_below: int = 2000) -> float:
    """Largest eigenvalue from a symmetric eigensolver (dense for small graphs, Lanczos otherwise)."""
    lap = sp.csr_matrix(lap, dtype=np.float64)
    n = lap.shape[0]
    if n < dense_below:
        return float(np.linalg.eigvalsh(lap.toarray())[-1])
    return float(eigsh(lap, k=1, which="LA", return_eigenvectors=False)[0])


def scale_laplacian(lap, lambda_max: float) -> sp.csr_matrix:
    """``2 L / lambda_max - I``; the result always stores the full diagonal."""
    if not lambda_max > 0:
        raise ValueError(f"lambda_max must be positive, got {lambda_max}")
    lap = sp.csr_matrix(lap, dtype=np.float64)
    n = lap.shape[0]
    out = (2.0 / lambda_max) * lap - sp.identity(n, format="csr")
    out = sp.csr_matrix(out)
    out.sum_duplicates()
    return out


@dataclass
class ChebLayer:
    """One Chebyshev filter bank.

    ``theta`` has shape ``(K * F_in, F_out)``: block ``k`` (rows
    ``k*F_in:(k+1)*F_in``) mixes the order-``k`` basis signal into the
    outputs. ``bias`` is ``(1, F_out)`` or ``None``.
    """

    theta: object
    bias: object
    scaled_laplacian: sp.csr_matrix
    order: int

    @property
    def f_in(self) -> int:
        return ad.as_value(self.theta).shape[0] // self.order

    @property
    def f_out(self) -> int:
        return ad.as_value(self.theta).shape[1]


def chebyshev_basis(lbar, signal, order: int) -> list:
    """``[T_0(L) x, ..., T_{K-1}(L) x]`` via the three-term recursion (``lbar`` symmetric)."""
    basis = [signal]
    if order > 1:
        basis.append(ad.spmm(lbar, signal, lbar))
    for _ in range(2, order):
        basis.append(ad.scale(ad.spmm(lbar, basis[-1], lbar), 2.0) - basis[-2])
    return basis


def cheb_forward(layer: ChebLayer, signal, batch: int = 1) -> ad.Value:
    """Apply the filter bank to a node-major ``(N, batch * F_in)`` signal.

    Returns a node-major ``(N, batch * F_out)`` value.
    """
    signal = ad.as_value(signal)
    theta = ad.as_value(layer.theta)
    k, f_in, f_out = layer.order, layer.f_in, layer.f_out
    n = signal.shape[0]
    if signal.data.ndim != 2 or signal.shape[1] != batch * f_in:
        raise ad.ShapeError(f"signal shape {signal.shape} does not match F_in={f_in}, batch={batch}")
    if layer.scaled_laplacian.shape != (n, n):
        raise ad.ShapeError(f"laplacian {layer.scaled_laplacian.shape} vs {n} nodes")
    basis = [ad.reshape(t, (n * batch, f_in)) for t in chebyshev_basis(layer.scaled_laplacian, signal, k)]
    # columns of block k line up with rows k*F_in:(k+1)*F_in of theta
    out = ad.matmul(ad.hstack(basis) if k > 1 else basis[0], theta)
    if layer.bias is not None:
        out = out + ad.as_value(layer.bias)
    return ad.reshape(out, (n, batch * f_out))
