"""Mixture-of-Laplace client posteriors and the server's global objective.

The global log-posterior (up to a constant) is

    sum_c log( (1/M) sum_m N(w | w_hat[c, m], Lambda[c, m]) ) - (C - 1) log p(w)

with ``p(w) = N(0, sigma^2 I)``; dividing by the prior ``C - 1`` times keeps it
from being counted once per client.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .curvature import Precision, PriorSpec

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LaplaceComponent:
    mean: np.ndarray
    precision: Precision
    log_norm: float = field(init=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.precision.dim != self.mean.shape[0]:
            raise ValueError(f"mean has {self.mean.shape[0]} entries but precision acts on {self.precision.dim}")
        self.log_norm = 0.5 * self.precision.log_det - 0.5 * self.dim * LOG_2PI

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class ClientPosterior:
    components: list[LaplaceComponent]
    client_id: int = 0

    def __post_init__(self):
        if not self.components:
            raise ValueError("a client posterior needs at least one component")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)


def _check_dim(expected: int, w: np.ndarray) -> None:
    if w.shape != (expected,):
        raise ValueError(f"expected a parameter vector of length {expected}, got shape {w.shape}")


def component_log_density(comp: LaplaceComponent, w: np.ndarray) -> float:
    _check_dim(comp.dim, w)
    diff = w - comp.mean
    return comp.log_norm - 0.5 * float(diff @ comp.precision.mat_vec(diff))


def _component_terms(cp: ClientPosterior, w: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-component log-densities and the products ``Lambda_m (w - mean_m)``."""
    _check_dim(cp.dim, w)
    logs = np.empty(cp.n_components)
    pulls = []
    for m, comp in enumerate(cp.components):
        diff = w - comp.mean
        pd = comp.precision.mat_vec(diff)
        logs[m] = comp.log_norm - 0.5 * float(diff @ pd)
        pulls.append(pd)
    return logs, pulls


def mixture_log_density(cp: ClientPosterior, w: np.ndarray) -> float:
    logs, _ = _component_terms(cp, w)
    return float(logsumexp(logs) - math.log(cp.n_components))


def responsibilities(cp: ClientPosterior, w: np.ndarray) -> np.ndarray:
    logs, _ = _component_terms(cp, w)
    return softmax(logs)


def mixture_grad(cp: ClientPosterior, w: np.ndarray) -> np.ndarray:
    """Gradient of :func:`mixture_log_density` with respect to ``w``."""
    logs, pulls = _component_terms(cp, w)
    r = softmax(logs)
    g = np.zeros_like(w)
    for rm, pd in zip(r, pulls):
        g -= rm * pd
    return g


def mixture_value_and_grad(cp: ClientPosterior, w: np.ndarray) -> tuple[float, np.ndarray]:
    logs, pulls = _component_terms(cp, w)
    r = softmax(logs)
    g = np.zeros_like(w)
    for rm, pd in zip(r, pulls):
        g -= rm * pd
    return float(logsumexp(logs) - math.log(cp.n_components)), g


@dataclass
class GlobalObjective:
    """Negative global log-posterior over ``C`` client mixtures.

    Clients are kept sorted by ``client_id`` so the arrival order of messages
    never changes the summation order.
    """

    clients: list[ClientPosterior]
    prior: PriorSpec

    def __post_init__(self):
        if not self.clients:
            raise ValueError("need at least one client posterior")
        self.clients = sorted(self.clients, key=lambda cp: cp.client_id)
        dims = {cp.dim for cp in self.clients}
        if len(dims) != 1:
            raise ValueError(f"clients disagree on dimension: {sorted(dims)}")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def dim(self) -> int:
        return self.clients[0].dim

    def value(self, w: np.ndarray) -> float:
        return global_neg_log_posterior(self, w)

    def grad(self, w: np.ndarray) -> np.ndarray:
        return global_grad(self, w)

    def value_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        _check_dim(self.dim, w)
        total, g = 0.0, np.zeros_like(w)
        for cp in self.clients:
            v, gc = mixture_value_and_grad(cp, w)
            total -= v
            g -= gc
        k = self.n_clients - 1
        total += k * log_prior(self.prior, w)
        g += k * grad_log_prior(self.prior, w)
        return total, g


def log_prior(prior: PriorSpec, w: np.ndarray) -> float:
    """Unnormalized log N(w | 0, sigma^2 I)."""
    return -0.5 * float(w @ w) / prior.variance


def grad_log_prior(prior: PriorSpec, w: np.ndarray) -> np.ndarray:
    return -w / prior.variance


def global_neg_log_posterior(g: GlobalObjective, w: np.ndarray) -> float:
    _check_dim(g.dim, w)
    total = 0.0
    for cp in g.clients:
        total -= mixture_log_density(cp, w)
    return total + (g.n_clients - 1) * log_prior(g.prior, w)


def global_grad(g: GlobalObjective, w: np.ndarray) -> np.ndarray:
    _check_dim(g.dim, w)
    out = np.zeros_like(w)
    for cp in g.clients:
        out -= mixture_grad(cp, w)
    return out + (g.n_clients - 1) * grad_log_prior(g.prior, w)
