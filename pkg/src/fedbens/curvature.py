"""Laplace precisions at a MAP estimate.

Three structures are supported:

* :class:`Diagonal` -- diagonal of the generalized Gauss-Newton (GGN) matrix.
* :class:`DiagPlusLastFull` -- diagonal everywhere except a dense last-layer block.
* :class:`Kronecker` -- per-layer K-FAC factors ``(A_l, G_l)`` acting on a layer
  perturbation ``dW`` (shape ``out x (in+1)``) as ``G_l @ dW @ A_l``.

All of them include the tempered likelihood (curvature summed over samples and
divided by ``T``) plus the isotropic prior precision ``tau = 1/sigma^2``.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np
from scipy import linalg

from .nn import ModelSpec, backward, forward_cache, softmax


class CurvatureError(ValueError):
    """A precision (or one of its factors) is not positive definite."""


@dataclass(frozen=True)
class PriorSpec:
    variance: float = 0.1

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"prior variance must be positive, got {self.variance}")

    @property
    def precision(self) -> float:
        return 1.0 / self.variance


def _check_temperature(T: float) -> float:
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return float(T)


def _chol_logdet(m: np.ndarray, what: str) -> float:
    try:
        c = linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise CurvatureError(f"{what} is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(c))))


@dataclass
class Diagonal:
    diag: np.ndarray
    temperature: float = 1.0
    prior_precision: float = 1.0
    n_samples: int = 0
    log_det: float = field(init=False)

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=np.float64)
        if np.any(self.diag <= 0):
            raise CurvatureError("diagonal precision has non-positive entries")
        self.log_det = float(np.sum(np.log(self.diag)))

    @property
    def dim(self) -> int:
        return self.diag.shape[0]

    def mat_vec(self, v: np.ndarray) -> np.ndarray:
        return self.diag * v


@dataclass
class DiagPlusLastFull:
    diag: np.ndarray  # every parameter before the last layer
    block: np.ndarray  # dense precision of the last layer, row-major layer order
    temperature: float = 1.0
    prior_precision: float = 1.0
    n_samples: int = 0
    log_det: float = field(init=False)

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=np.float64)
        self.block = np.asarray(self.block, dtype=np.float64)
        if np.any(self.diag <= 0):
            raise CurvatureError("diagonal part has non-positive entries")
        self.log_det = float(np.sum(np.log(self.diag))) + _chol_logdet(self.block, "last-layer block")

    @property
    def dim(self) -> int:
        return self.diag.shape[0] + self.block.shape[0]

    def mat_vec(self, v: np.ndarray) -> np.ndarray:
        k = self.diag.shape[0]
        return np.concatenate([self.diag * v[:k], self.block @ v[k:]])


@dataclass
class Kronecker:
    factors: list[tuple[np.ndarray, np.ndarray]]  # (A_l, G_l) per layer
    temperature: float = 1.0
    prior_precision: float = 1.0
    n_samples: int = 0
    log_det: float = field(init=False)

    def __post_init__(self):
        self.factors = [(np.asarray(a, dtype=np.float64), np.asarray(g, dtype=np.float64)) for a, g in self.factors]
        total = 0.0
        for l, (a, g) in enumerate(self.factors):
            total += g.shape[0] * _chol_logdet(a, f"layer {l} input factor")
            total += a.shape[0] * _chol_logdet(g, f"layer {l} output factor")
        self.log_det = total

    @property
    def dim(self) -> int:
        return sum(a.shape[0] * g.shape[0] for a, g in self.factors)

    def mat_vec(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        offset = 0
        for a, g in self.factors:
            n = g.shape[0] * a.shape[0]
            dw = v[offset:offset + n].reshape(g.shape[0], a.shape[0])
            out[offset:offset + n] = (g @ dw @ a).ravel()
            offset += n
        return out


Precision = Union[Diagonal, DiagPlusLastFull, Kronecker]


def log_det(p: Precision) -> float:
    return p.log_det


def mat_vec(p: Precision, v: np.ndarray) -> np.ndarray:
    return p.mat_vec(v)


def quadratic_form(p: Precision, v: np.ndarray) -> float:
    return float(v @ p.mat_vec(v))


# -- curvature from data -------------------------------------------------------


class _ClassBackprop(NamedTuple):
    probs: np.ndarray  # (N, K)
    inputs: list[np.ndarray]  # bias-augmented layer inputs, (N, in_l + 1)
    deltas: list[list[np.ndarray]]  # deltas[c][l]: d(-log p(c))/d(pre-activation_l), (N, out_l)


def _per_class_backprop(params: np.ndarray, spec: ModelSpec, x: np.ndarray) -> _ClassBackprop:
    """One backward pass per class label; the GGN is sum_c pi_c g_c g_c^T."""
    cache = forward_cache(params, spec, x)
    probs = softmax(cache.logits)
    deltas = []
    for c in range(spec.n_classes):
        d_out = probs.copy()
        d_out[:, c] -= 1.0
        deltas.append(backward(params, spec, cache, d_out))
    return _ClassBackprop(probs, cache.inputs, deltas)


def _ggn_diag_likelihood(bp: _ClassBackprop, spec: ModelSpec) -> np.ndarray:
    out = np.empty(spec.n_params)
    for l, slot in enumerate(spec.layout):
        a2 = bp.inputs[l] ** 2
        acc = np.zeros((slot.out, slot.in_aug))
        for c, per_layer in enumerate(bp.deltas):
            acc += (bp.probs[:, c:c + 1] * per_layer[l] ** 2).T @ a2
        out[slot.offset:slot.offset + slot.size] = acc.ravel()
    return out


def ggn_diagonal(params: np.ndarray, spec: ModelSpec, x: np.ndarray, T: float, prior: PriorSpec) -> Diagonal:
    T = _check_temperature(T)
    bp = _per_class_backprop(params, spec, x)
    lik = _ggn_diag_likelihood(bp, spec)
    tau = prior.precision
    return Diagonal(lik / T + tau, temperature=T, prior_precision=tau, n_samples=len(bp.probs))


def last_layer_ggn(probs: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Sum over samples of ``H_i (x) a_i a_i^T`` with ``H_i = diag(pi_i) - pi_i pi_i^T``."""
    n, k = probs.shape
    h = -probs[:, :, None] * probs[:, None, :]
    h[:, np.arange(k), np.arange(k)] += probs
    block = np.einsum("ikq,ij,ir->kjqr", h, a, a, optimize=True)
    m = k * a.shape[1]
    return block.reshape(m, m)


def ggn_last_layer_full(params: np.ndarray, spec: ModelSpec, x: np.ndarray, T: float, prior: PriorSpec) -> DiagPlusLastFull:
    T = _check_temperature(T)
    bp = _per_class_backprop(params, spec, x)
    lik = _ggn_diag_likelihood(bp, spec)
    tau = prior.precision
    last = spec.layout[-1]
    block = last_layer_ggn(bp.probs, bp.inputs[-1]) / T
    block = 0.5 * (block + block.T)
    block[np.diag_indices_from(block)] += tau
    return DiagPlusLastFull(
        lik[:last.offset] / T + tau, block, temperature=T, prior_precision=tau, n_samples=len(bp.probs)
    )


@dataclass
class KFACFactors:
    """Raw per-sample-mean K-FAC factors ``(A_hat_l, G_hat_l)`` before damping."""

    factors: list[tuple[np.ndarray, np.ndarray]]
    n_samples: int


def kfac_factors(
    params: np.ndarray,
    spec: ModelSpec,
    x: np.ndarray,
    mode: str = "exact_classes",
    n_draws: int = 1,
    seed: int = 0,
) -> KFACFactors:
    """True-Fisher K-FAC factors.

    ``exact_classes`` sums over every label weighted by the model's predictive
    probabilities; ``sampled`` draws ``n_draws`` labels per input instead.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    cache = forward_cache(params, spec, x)
    probs = softmax(cache.logits)
    g_acc = [np.zeros((s.out, s.out)) for s in spec.layout]
    if mode == "exact_classes":
        for c in range(spec.n_classes):
            d_out = probs.copy()
            d_out[:, c] -= 1.0
            w = probs[:, c:c + 1]
            for l, d in enumerate(backward(params, spec, cache, d_out)):
                g_acc[l] += (w * d).T @ d
    elif mode == "sampled":
        rng = np.random.default_rng(seed)
        cum = np.cumsum(probs, axis=1)
        for _ in range(n_draws):
            u = rng.random((n, 1))
            ys = np.minimum((u > cum).sum(axis=1), spec.n_classes - 1)
            d_out = probs.copy()
            d_out[np.arange(n), ys] -= 1.0
            for l, d in enumerate(backward(params, spec, cache, d_out)):
                g_acc[l] += d.T @ d
        g_acc = [g / n_draws for g in g_acc]
    else:
        raise ValueError(f"unknown K-FAC mode {mode!r}")
    factors = []
    for l in range(spec.n_layers):
        a = cache.inputs[l]
        a_hat = a.T @ a / n
        g_hat = g_acc[l] / n
        factors.append((0.5 * (a_hat + a_hat.T), 0.5 * (g_hat + g_hat.T)))
    return KFACFactors(factors, n)


def assemble_kronecker(
    raw: KFACFactors,
    n_samples: int | None,
    T: float,
    prior: PriorSpec,
    pi_correction: bool = False,
) -> Kronecker:
    """Damped factors ``A = sqrt(N/T) A_hat + sqrt(tau) I`` and ``G = sqrt(N/T) G_hat + sqrt(tau) I``.

    With ``pi_correction`` the damping is split unevenly between the two factors
    by ``pi = sqrt((tr A_hat / dim A) / (tr G_hat / dim G))``, which keeps the
    ``tau`` lower bound on the implied precision.
    """
    T = _check_temperature(T)
    n = raw.n_samples if n_samples is None else n_samples
    tau = prior.precision
    scale = math.sqrt(n / T)
    root_tau = math.sqrt(tau)
    out = []
    for a_hat, g_hat in raw.factors:
        pi = 1.0
        if pi_correction:
            ta = np.trace(a_hat) / a_hat.shape[0]
            tg = np.trace(g_hat) / g_hat.shape[0]
            if ta > 0 and tg > 0:
                pi = math.sqrt(ta / tg)
        a = scale * a_hat + pi * root_tau * np.eye(a_hat.shape[0])
        g = scale * g_hat + (root_tau / pi) * np.eye(g_hat.shape[0])
        out.append((a, g))
    return Kronecker(out, temperature=T, prior_precision=tau, n_samples=n)


def fit_precision(
    kind: str,
    params: np.ndarray,
    spec: ModelSpec,
    x: np.ndarray,
    T: float,
    prior: PriorSpec,
    kfac_mode: str = "exact_classes",
    kfac_draws: int = 1,
    seed: int = 0,
) -> Precision:
    """Dispatch on ``kind`` in {"diagonal", "diag_last_full", "kronecker"}."""
    if kind == "diagonal":
        return ggn_diagonal(params, spec, x, T, prior)
    if kind == "diag_last_full":
        return ggn_last_layer_full(params, spec, x, T, prior)
    if kind == "kronecker":
        mode = kfac_mode if spec.n_classes <= 16 or kfac_mode == "sampled" else "sampled"
        raw = kfac_factors(params, spec, x, mode=mode, n_draws=kfac_draws, seed=seed)
        return assemble_kronecker(raw, None, T, prior)
    raise ValueError(f"unknown hessian kind {kind!r}")


# -- serialization -------------------------------------------------------------
#
# structure := u8 kind | f64 T | f64 tau | u64 N | f64 log_det | u32 n_sections | section*
# section   := u8 tag (0 vector, 1 matrix) | u32 rows | u32 cols | u64 nbytes | f64[rows*cols]
# All little-endian. Diagonal: [vector]; DiagPlusLastFull: [vector, matrix];
# Kronecker: [A_0, G_0, A_1, G_1, ...].

KIND_DIAGONAL = 1
KIND_DIAG_LAST_FULL = 2
KIND_KRONECKER = 3

_STRUCT_HEAD = struct.Struct("<BddQdI")
_SECTION_HEAD = struct.Struct("<BIIQ")
STRUCT_HEADER_BYTES = _STRUCT_HEAD.size
SECTION_HEADER_BYTES = _SECTION_HEAD.size


def write_section(f: io.BufferedIOBase, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim == 1:
        tag, rows, cols = 0, arr.shape[0], 1
    else:
        tag, (rows, cols) = 1, arr.shape
    f.write(_SECTION_HEAD.pack(tag, rows, cols, arr.nbytes))
    f.write(arr.tobytes())


def read_section(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    if pos + SECTION_HEADER_BYTES > len(buf):
        raise ValueError("truncated section header")
    tag, rows, cols, nbytes = _SECTION_HEAD.unpack_from(buf, pos)
    pos += SECTION_HEADER_BYTES
    if nbytes != 8 * rows * cols or pos + nbytes > len(buf):
        raise ValueError("section length does not match its dimensions or the buffer")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype="<f8").astype(np.float64)
    arr = arr if tag == 0 else arr.reshape(rows, cols)
    return arr, pos + nbytes


def write_precision(f: io.BufferedIOBase, p: Precision) -> None:
    if isinstance(p, Diagonal):
        kind, sections = KIND_DIAGONAL, [p.diag]
    elif isinstance(p, DiagPlusLastFull):
        kind, sections = KIND_DIAG_LAST_FULL, [p.diag, p.block]
    elif isinstance(p, Kronecker):
        kind, sections = KIND_KRONECKER, [m for pair in p.factors for m in pair]
    else:
        raise TypeError(f"not a precision structure: {type(p).__name__}")
    f.write(_STRUCT_HEAD.pack(kind, p.temperature, p.prior_precision, p.n_samples, p.log_det, len(sections)))
    for s in sections:
        write_section(f, s)


def read_precision(buf: memoryview, pos: int = 0) -> tuple[Precision, int]:
    if pos + STRUCT_HEADER_BYTES > len(buf):
        raise ValueError("truncated precision header")
    kind, T, tau, n, _, n_sections = _STRUCT_HEAD.unpack_from(buf, pos)
    pos += STRUCT_HEADER_BYTES
    sections = []
    for _ in range(n_sections):
        arr, pos = read_section(buf, pos)
        sections.append(arr)
    meta = dict(temperature=T, prior_precision=tau, n_samples=n)
    if kind == KIND_DIAGONAL:
        return Diagonal(sections[0], **meta), pos
    if kind == KIND_DIAG_LAST_FULL:
        return DiagPlusLastFull(sections[0], sections[1], **meta), pos
    if kind == KIND_KRONECKER:
        return Kronecker(list(zip(sections[0::2], sections[1::2])), **meta), pos
    raise ValueError(f"unknown precision kind tag {kind}")


def precision_to_bytes(p: Precision) -> bytes:
    f = io.BytesIO()
    write_precision(f, p)
    return f.getvalue()


def precision_from_bytes(data: bytes) -> Precision:
    p, _ = read_precision(memoryview(data), 0)
    return p
