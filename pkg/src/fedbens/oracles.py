"""Closed-form and brute-force references for checking the structured code paths.

Nothing here is used by the federation pipeline; these exist so tests can compare
the fast implementations against independent dense computations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .curvature import Diagonal, DiagPlusLastFull, Kronecker, Precision, PriorSpec
from .nn import Activation, ModelSpec

MAX_DENSE_DIM = 200


class OracleScaleError(ValueError):
    """The dense oracle was asked for a problem larger than it is meant to handle."""


class CombinationError(ValueError):
    pass


def _guard(d: int) -> None:
    if d > MAX_DENSE_DIM:
        raise OracleScaleError(f"dense oracles are limited to d <= {MAX_DENSE_DIM}, got {d}")


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    precision: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def blr_local_posterior(X: np.ndarray, y: np.ndarray, noise_var: float, prior: PriorSpec) -> GaussianPosterior:
    """Exact posterior of Bayesian linear regression ``y = X w + eps`` under ``N(0, sigma^2 I)``."""
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    prec = X.T @ X / noise_var + prior.precision * np.eye(X.shape[1])
    mean = linalg.solve(prec, X.T @ y / noise_var, assume_a="pos")
    return GaussianPosterior(mean, prec)


def blr_pooled_posterior(
    client_data: Sequence[tuple[np.ndarray, np.ndarray]], noise_var: float, prior: PriorSpec
) -> GaussianPosterior:
    X = np.concatenate([np.asarray(x) for x, _ in client_data])
    y = np.concatenate([np.asarray(t) for _, t in client_data])
    return blr_local_posterior(X, y, noise_var, prior)


def combine_gaussians_prop1(
    locals_: Sequence[GaussianPosterior], prior: PriorSpec, correct_prior: bool = True
) -> GaussianPosterior:
    """Product of local Gaussian posteriors divided by the zero-mean prior ``C - 1`` times.

    ``correct_prior=False`` skips the division and exists only as a negative control.
    """
    C = len(locals_)
    d = locals_[0].dim
    prec = sum(p.precision for p in locals_)
    if correct_prior:
        prec = prec - (C - 1) * prior.precision * np.eye(d)
    rhs = sum(p.precision @ p.mean for p in locals_)
    try:
        linalg.cholesky(prec)
    except linalg.LinAlgError as exc:
        raise CombinationError("combined precision is not positive definite") from exc
    return GaussianPosterior(linalg.solve(prec, rhs, assume_a="pos"), prec)


def dense_gaussian_log_pdf(mean: np.ndarray, precision: np.ndarray, w: np.ndarray) -> float:
    d = mean.shape[0]
    _guard(d)
    c = linalg.cholesky(precision, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    z = c.T @ (w - mean)
    return float(0.5 * logdet - 0.5 * d * math.log(2 * math.pi) - 0.5 * z @ z)


def dense_expand(p: Precision) -> np.ndarray:
    """Materialize a structured precision as a dense ``d x d`` matrix."""
    _guard(p.dim)
    if isinstance(p, Diagonal):
        return np.diag(p.diag)
    if isinstance(p, DiagPlusLastFull):
        return linalg.block_diag(np.diag(p.diag), p.block)
    if isinstance(p, Kronecker):
        # row-major vec(G dW A) = (G kron A^T) vec(dW); A is symmetric
        return linalg.block_diag(*[np.kron(g, a.T) for a, g in p.factors])
    raise TypeError(type(p).__name__)


def _complex_logits(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Forward pass that tolerates complex parameters, written independently of ``nn``."""
    a = np.asarray(x, dtype=np.complex128)
    n_layers = len(spec.layer_dims) - 1
    offset = 0
    for l in range(n_layers):
        fan_in, fan_out = spec.layer_dims[l], spec.layer_dims[l + 1]
        w = params[offset:offset + fan_out * (fan_in + 1)].reshape(fan_out, fan_in + 1)
        offset += fan_out * (fan_in + 1)
        z = w[:, :fan_in] @ a + w[:, fan_in]
        if l < n_layers - 1:
            if spec.activation is Activation.RELU:
                z = np.where(z.real > 0, z, 0.0)
            else:
                z = np.tanh(z)
        a = z
    return a


def logit_jacobian(params: np.ndarray, spec: ModelSpec, x: np.ndarray, h: float = 1e-30) -> np.ndarray:
    """(K, d) Jacobian of the logits at one input, by complex-step differentiation."""
    d = params.shape[0]
    _guard(d)
    J = np.empty((spec.n_classes, d))
    base = params.astype(np.complex128)
    for j in range(d):
        p = base.copy()
        p[j] += 1j * h
        J[:, j] = _complex_logits(p, spec, x).imag / h
    return J


def dense_ggn(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Sum over samples of ``J_i^T (diag(pi_i) - pi_i pi_i^T) J_i`` (no temperature, no prior)."""
    _guard(params.shape[0])
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total = np.zeros((params.shape[0], params.shape[0]))
    for xi in x:
        z = _complex_logits(params.astype(np.complex128), spec, xi).real
        e = np.exp(z - z.max())
        pi = e / e.sum()
        H = np.diag(pi) - np.outer(pi, pi)
        J = logit_jacobian(params, spec, xi)
        total += J.T @ H @ J
    return total


def grid_search_2d(
    objective: Callable[[np.ndarray], float],
    bounds: tuple[tuple[float, float], tuple[float, float]],
    resolution: int,
) -> tuple[np.ndarray, float]:
    """Exhaustive minimization over a ``resolution x resolution`` grid including both endpoints.

    Ties resolve to the lowest linear index (first axis major).
    """
    if resolution < 10:
        raise ValueError("resolution must be at least 10")
    (x0, x1), (y0, y1) = bounds
    if not all(np.isfinite([x0, x1, y0, y1])):
        raise ValueError("bounds must be finite")
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    values = np.array([[objective(np.array([a, b])) for b in ys] for a in xs])
    i, j = np.unravel_index(int(np.argmin(values)), values.shape)
    return np.array([xs[i], ys[j]]), float(values[i, j])
