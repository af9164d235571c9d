"""One-shot FedBEns: local mixtures of Laplace approximations, server-side
multi-start optimization of the combined posterior, and ensemble prediction.
"""
from __future__ import annotations

import io
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import curvature as cv
from .baselines import fisher_merge_diag, one_shot_fedavg
from .data import Dataset, dirichlet_partition, holdout_server_validation
from .nn import Adam, ModelSpec, accuracy, forward, init_params, train_sgd
from .posterior import ClientPosterior, GlobalObjective, LaplaceComponent

log = logging.getLogger(__name__)

HESSIAN_KINDS = ("diagonal", "diag_last_full", "kronecker")

# RNG stream tags; every random draw in a run hangs off (seed, tag, ...).
_STREAM_INIT = 0
_STREAM_CLIENT = 1
_STREAM_PARTITION = 2
_STREAM_HOLDOUT = 3
_STREAM_KFAC = 4


def stream(seed: int, *keys: int) -> np.random.SeedSequence:
    """Counter-style child seed: independent of execution order."""
    return np.random.SeedSequence(seed, spawn_key=tuple(keys))


def stream_int(seed: int, *keys: int) -> int:
    return int(stream(seed, *keys).generate_state(1)[0])


@dataclass
class FedConfig:
    n_mixtures: int = 3
    n_clients: int = 5
    alpha: float = 0.1
    client_epochs: int = 20
    client_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    server_steps: int = 300
    server_lr: float = 1e-3
    eval_every: int = 30
    temperature: float = 0.1
    prior_var: float = 0.1
    hessian: str = "kronecker"
    kfac_mode: str = "exact_classes"
    kfac_draws: int = 1
    n_val: int = 500
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_mixtures < 1 or self.n_clients < 1:
            raise ValueError("need n_mixtures >= 1 and n_clients >= 1")
        if self.server_steps > 0 and not 1 <= self.eval_every <= self.server_steps:
            raise ValueError("eval_every must lie in [1, server_steps]")
        if self.hessian not in HESSIAN_KINDS:
            raise ValueError(f"hessian must be one of {HESSIAN_KINDS}")

    @property
    def prior(self) -> cv.PriorSpec:
        return cv.PriorSpec(self.prior_var)


# -- wire format ---------------------------------------------------------------
#
# header := "FBEN" | u16 version | u32 client_id | u16 M | u64 d | u64 N_c
# then M records of (mean section, precision structure), see curvature.

MAGIC = b"FBEN"
VERSION = 1
_HEADER = struct.Struct("<4sHIHQQ")
HEADER_BYTES = _HEADER.size


@dataclass
class ClientMessage:
    client_id: int
    means: list[np.ndarray]
    precisions: list[cv.Precision]
    n_samples: int

    def __post_init__(self):
        if len(self.means) != len(self.precisions) or not self.means:
            raise ValueError("a message carries one precision per mean, at least one of each")
        d = self.dim
        if any(m.shape != (d,) for m in self.means) or any(p.dim != d for p in self.precisions):
            raise ValueError("all components must share the parameter dimension")

    @property
    def n_components(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means[0].shape[0]

    def posterior(self) -> ClientPosterior:
        comps = [LaplaceComponent(m, p) for m, p in zip(self.means, self.precisions)]
        return ClientPosterior(comps, client_id=self.client_id)

    def to_bytes(self) -> bytes:
        f = io.BytesIO()
        f.write(_HEADER.pack(MAGIC, VERSION, self.client_id, self.n_components, self.dim, self.n_samples))
        for mean, prec in zip(self.means, self.precisions):
            cv.write_section(f, mean)
            cv.write_precision(f, prec)
        return f.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> ClientMessage:
        buf = memoryview(data)
        if len(buf) < HEADER_BYTES:
            raise ValueError("truncated message header")
        magic, version, cid, M, d, n = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ValueError(f"bad message magic {bytes(magic)!r}")
        if version != VERSION:
            raise ValueError(f"unsupported message version {version}")
        pos = HEADER_BYTES
        means, precs = [], []
        for _ in range(M):
            mean, pos = cv.read_section(buf, pos)
            prec, pos = cv.read_precision(buf, pos)
            means.append(mean)
            precs.append(prec)
        if pos != len(buf):
            raise ValueError(f"{len(buf) - pos} trailing bytes after the last record")
        msg = cls(cid, means, precs, n)
        if msg.dim != d:
            raise ValueError(f"header says d={d} but records have d={msg.dim}")
        return msg


def kronecker_message_bytes(spec: ModelSpec, n_mixtures: int) -> int:
    """Closed-form size of a serialized Kronecker message."""
    per_layer = sum(s.in_aug ** 2 + s.out ** 2 for s in spec.layout) * 8
    framing = cv.SECTION_HEADER_BYTES + cv.STRUCT_HEADER_BYTES + 2 * spec.n_layers * cv.SECTION_HEADER_BYTES
    return HEADER_BYTES + n_mixtures * (spec.n_params * 8 + per_layer + framing)


# -- client and server training ------------------------------------------------


def broadcast_inits(spec: ModelSpec, n_mixtures: int, seed: int) -> list[np.ndarray]:
    """The M random starting points every client receives."""
    return [init_params(spec, stream(seed, _STREAM_INIT, m)) for m in range(n_mixtures)]


def client_training(
    inits: Sequence[np.ndarray],
    data: Dataset,
    cfg: FedConfig,
    spec: ModelSpec,
    client_id: int = 0,
) -> ClientMessage:
    if len(data) == 0:
        raise ValueError(f"client {client_id} has no data")
    means, precs = [], []
    for m, w0 in enumerate(inits):
        w = train_sgd(
            w0, spec, data.features, data.labels,
            epochs=cfg.client_epochs, lr=cfg.client_lr, momentum=cfg.momentum,
            batch_size=cfg.batch_size, seed=stream(cfg.seed, _STREAM_CLIENT, client_id, m),
        )
        prec = cv.fit_precision(
            cfg.hessian, w, spec, data.features, cfg.temperature, cfg.prior,
            kfac_mode=cfg.kfac_mode, kfac_draws=cfg.kfac_draws,
            seed=stream_int(cfg.seed, _STREAM_KFAC, client_id, m),
        )
        means.append(w)
        precs.append(prec)
    return ClientMessage(client_id, means, precs, len(data))


def median_init(messages: Sequence[ClientMessage]) -> list[np.ndarray]:
    """Coordinate-wise median across clients of each mixture index's MAP estimate."""
    M = messages[0].n_components
    if any(msg.n_components != M for msg in messages):
        raise ValueError("all messages must carry the same number of components")
    return [np.median(np.stack([msg.means[m] for msg in messages]), axis=0) for m in range(M)]


def optimize_mode(
    objective: GlobalObjective,
    w0: np.ndarray,
    steps: int,
    lr: float,
    eval_every: int,
    evaluate: Callable[[np.ndarray], float] | None = None,
) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Adam on the global objective from ``w0``.

    With ``evaluate`` the iterate is scored at step 0, every ``eval_every`` steps
    and at the last step; the best score wins, ties going to the earliest step.
    Without it the last iterate is returned.
    """
    opt = Adam(lr=lr)
    w = w0.copy()
    history: list[tuple[int, float]] = []
    best_w, best_score = w.copy(), -np.inf
    if evaluate is not None:
        best_score = evaluate(w)
        history.append((0, best_score))
    for k in range(1, steps + 1):
        w = opt.step(w, objective.grad(w))
        if evaluate is not None and (k % eval_every == 0 or k == steps):
            score = evaluate(w)
            history.append((k, score))
            if score > best_score:
                best_w, best_score = w.copy(), score
    if evaluate is None:
        return w, history
    return best_w, history


def build_objective(messages: Sequence[ClientMessage], prior: cv.PriorSpec) -> GlobalObjective:
    return GlobalObjective([msg.posterior() for msg in messages], prior)


def server_training(
    messages: Sequence[ClientMessage],
    prior: cv.PriorSpec,
    val_set: Dataset | None,
    cfg: FedConfig,
    spec: ModelSpec | None = None,
) -> list[np.ndarray]:
    """One Adam run per mixture index, each started at the clients' median.

    ``val_set=None`` disables checkpoint selection and returns final iterates.
    """
    return [w for w, _ in server_training_history(messages, prior, val_set, cfg, spec)]


def server_training_history(messages, prior, val_set, cfg, spec=None):
    objective = build_objective(messages, prior)
    evaluate = None
    if val_set is not None:
        if len(val_set) == 0:
            raise ValueError("validation set is empty")
        if spec is None:
            raise ValueError("checkpoint selection needs the model spec")

        def evaluate(w):
            return accuracy(w, spec, val_set.features, val_set.labels)

    starts = median_init(messages)
    return [
        optimize_mode(objective, w0, cfg.server_steps, cfg.server_lr, cfg.eval_every, evaluate)
        for w0 in starts
    ]


def ensemble_predict(models: Sequence[np.ndarray], spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Mean of the members' predictive probabilities."""
    if len(models) == 0:
        raise ValueError("empty ensemble")
    return sum(forward(w, spec, x) for w in models) / len(models)


def ensemble_accuracy(models: Sequence[np.ndarray], spec: ModelSpec, ds: Dataset) -> float:
    pred = ensemble_predict(models, spec, ds.features).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


# -- end-to-end run ------------------------------------------------------------


@dataclass
class RunReport:
    seed: int
    ensemble_accuracy: float
    component_accuracies: list[float]
    baseline_accuracies: dict[str, float]
    bytes_sent: dict[str, int]
    seconds: dict[str, float] = field(compare=False)
    client_sizes: list[int] = field(default_factory=list)

    @property
    def component_min(self) -> float:
        return min(self.component_accuracies)

    @property
    def component_max(self) -> float:
        return max(self.component_accuracies)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["component_min"] = self.component_min
        d["component_max"] = self.component_max
        return d


def split_clients(train: Dataset, cfg: FedConfig) -> list[Dataset]:
    if cfg.n_clients == 1:
        return [train]
    plan = dirichlet_partition(train, cfg.n_clients, cfg.alpha, stream_int(cfg.seed, _STREAM_PARTITION))
    return [train.subset(plan.client_indices(c)) for c in range(cfg.n_clients)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_fedbens(
    dataset: Dataset,
    test_set: Dataset,
    spec: ModelSpec,
    cfg: FedConfig,
    baselines: Sequence[str] = ("fedavg", "fisher_merge"),
) -> RunReport:
    """Holdout, partition, local training, one message per client, server fusion, evaluation.

    ``dataset`` is expected to be normalized already. The server validation set
    is drawn before partitioning, so clients never see it.
    """
    t0 = time.perf_counter()
    train, val = holdout_server_validation(dataset, cfg.n_val, stream_int(cfg.seed, _STREAM_HOLDOUT))
    clients = split_clients(train, cfg)
    inits = broadcast_inits(spec, cfg.n_mixtures, cfg.seed)

    t1 = time.perf_counter()
    messages = _map(
        lambda c: client_training(inits, clients[c], cfg, spec, client_id=c),
        range(cfg.n_clients), cfg.threads,
    )
    payloads = [msg.to_bytes() for msg in messages]
    # the server only ever sees what went over the wire
    received = [ClientMessage.from_bytes(p) for p in payloads]

    t2 = time.perf_counter()
    globals_ = server_training(received, cfg.prior, val, cfg, spec)
    t3 = time.perf_counter()

    comp_acc = [accuracy(w, spec, test_set.features, test_set.labels) for w in globals_]
    ens_acc = ensemble_accuracy(globals_, spec, test_set)
    d = spec.n_params
    bytes_sent = {"fedbens": sum(len(p) for p in payloads)}
    base_acc: dict[str, float] = {}

    sizes = [len(c) for c in clients]
    local_models = [msg.means[0] for msg in messages]
    if "fedavg" in baselines:
        w = one_shot_fedavg(local_models, sizes)
        base_acc["fedavg"] = accuracy(w, spec, test_set.features, test_set.labels)
        bytes_sent["fedavg"] = cfg.n_clients * d * 8
    if "fisher_merge" in baselines:
        fishers = _map(
            lambda c: cv.ggn_diagonal(local_models[c], spec, clients[c].features, cfg.temperature, cfg.prior).diag,
            range(cfg.n_clients), cfg.threads,
        )
        w = fisher_merge_diag(local_models, fishers)
        base_acc["fisher_merge"] = accuracy(w, spec, test_set.features, test_set.labels)
        bytes_sent["fisher_merge"] = cfg.n_clients * 2 * d * 8
    t4 = time.perf_counter()

    log.info("seed %d: ensemble %.4f, components %s, baselines %s", cfg.seed, ens_acc, comp_acc, base_acc)
    return RunReport(
        seed=cfg.seed,
        ensemble_accuracy=ens_acc,
        component_accuracies=comp_acc,
        baseline_accuracies=base_acc,
        bytes_sent=bytes_sent,
        seconds={"setup": t1 - t0, "clients": t2 - t1, "server": t3 - t2, "evaluation": t4 - t3, "total": t4 - t0},
        client_sizes=sizes,
    )
