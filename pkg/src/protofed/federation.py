"""Round-based training orchestration for all six algorithms.

Each round broadcasts parameters, runs every client's local update (possibly
on worker threads), aggregates at the barrier, rebuilds the prototype pool
for prototype algorithms, and evaluates per client.  Per-client RNG streams
are derived from (master seed, client id, round), so the worker count cannot
change any result.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import inference
from .config import RunConfig
from .data import ClientShard, Dataset
from .diagnostics import ConvergenceReport, estimate_embedding_lipschitz, estimate_round_constants, lr_bound
from .nn import (
    DTYPES,
    GradientVector,
    ModelParams,
    ShapeError,
    backward,
    forward_encoder,
    init_params,
    sgd_step,
)
from .prototypes import GlobalPrototypePool, LocalPrototypes, aggregate_pool, compute_local_prototypes
from .rng import STREAM_CLIENT, STREAM_INIT, STREAM_KMEANS, derive_seed, rng_from

PARAM_AVERAGING = frozenset({"fedavg", "fedprox", "sp_fedcl", "mp_fedcl"})
PROTOTYPE_ALGOS = frozenset({"fedproto", "sp_fedcl", "mp_fedcl"})
DEFAULT_EVAL_MODE = {
    "local": "classifier",
    "fedavg": "classifier",
    "fedprox": "classifier",
    "fedproto": "prototype",
    "sp_fedcl": "prototype",
    "mp_fedcl": "prototype",
}


class TrainingDiverged(RuntimeError):
    """The training loss went non-finite."""

    def __init__(self, round_idx: int, client_id: int, batch_idx: int):
        super().__init__(
            f"non-finite loss at round {round_idx}, client {client_id}, batch {batch_idx}"
        )
        self.round_idx = round_idx
        self.client_id = client_id
        self.batch_idx = batch_idx


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    prototypes: LocalPrototypes | None
    data_size: int
    train_loss: float
    diag_grad: GradientVector | None = None
    diag_emb_norm: float | None = None


@dataclass
class RoundState:
    round: int
    global_params: ModelParams
    pool: GlobalPrototypePool
    client_params: list[ModelParams] | None  # retained models for non-averaging algorithms
    per_client_metrics: list[dict] = field(default_factory=list)
    train_loss: float | None = None
    client_prototypes: list[LocalPrototypes | None] | None = None  # for k-means warm starts


@dataclass
class RunArtifacts:
    config: RunConfig
    metrics: list[dict]
    convergence: list[ConvergenceReport]
    global_params: ModelParams
    client_params: list[ModelParams] | None
    pool: GlobalPrototypePool
    summary: dict


def _fedproto_targets(pool: GlobalPrototypePool) -> dict[int, np.ndarray] | None:
    if not pool.per_class:
        return None
    return {j: pool.per_class[j].mean(axis=0) for j in pool.classes()}


def local_update(
    client: ClientShard,
    params_in: ModelParams,
    pool: GlobalPrototypePool,
    config: RunConfig,
    round_idx: int,
    client_seed: int,
    prev_protos: LocalPrototypes | None = None,
) -> ClientUpdate:
    """E epochs of mini-batch SGD, then per-class prototype clustering.

    The shuffle stream comes from client_seed alone; the per-round learning
    rate is lr * lr_decay ** round_idx.  A non-finite loss aborts the run.
    """
    algo = config.algorithm
    features = client.train.features
    labels = client.train.labels
    n = len(features)
    lr_t = config.lr * config.lr_decay**round_idx
    rng = rng_from(client_seed)

    global_ref = params_in if config.loss.mu_prox > 0 else None
    proto_targets = _fedproto_targets(pool) if algo == "fedproto" else None

    want_diag = config.diagnostics and algo in PARAM_AVERAGING and config.N >= 2
    diag_grad = None
    diag_emb_norm = None
    if want_diag:
        _, diag_grad = backward(
            params_in, features, labels, config.loss, pool, global_ref, proto_targets
        )
        diag_emb_norm = float(np.linalg.norm(forward_encoder(params_in, features), axis=1).mean())

    params = params_in
    batch_losses = []
    for _ in range(config.E):
        order = rng.permutation(n)
        for batch_idx, start in enumerate(range(0, n, config.B)):
            take = order[start : start + config.B]
            loss, grads = backward(
                params, features[take], labels[take], config.loss, pool, global_ref, proto_targets
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(round_idx, client.client_id, batch_idx)
            params = sgd_step(params, grads, lr_t, config.momentum)
            batch_losses.append(loss)

    prototypes = None
    if algo in PROTOTYPE_ALGOS:
        emb = forward_encoder(params, features)
        by_class = {int(j): emb[labels == j] for j in np.unique(labels)}
        warm = None
        if config.kmeans_warm_start and prev_protos is not None:
            warm = prev_protos.per_class
        prototypes = compute_local_prototypes(
            by_class,
            config.K,
            derive_seed(client_seed, STREAM_KMEANS),
            client.client_id,
            warm_start=warm,
        )

    return ClientUpdate(
        client_id=client.client_id,
        params=params,
        prototypes=prototypes,
        data_size=n,
        train_loss=float(np.mean(batch_losses)),
        diag_grad=diag_grad,
        diag_emb_norm=diag_emb_norm,
    )


def aggregate_params(updates: list[ClientUpdate]) -> ModelParams:
    """Data-size weighted average of parameters; momentum buffers reset."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    first = updates[0].params
    for u in updates[1:]:
        if u.params.specs != first.specs:
            raise ShapeError("client parameter sets come from different layer chains")
    total = float(sum(u.data_size for u in updates))
    weights = [np.zeros_like(w) for w in first.weights]
    biases = [np.zeros_like(b) for b in first.biases]
    for u in updates:
        share = u.data_size / total
        for acc, w in zip(weights, u.params.weights):
            acc += share * w
        for acc, b in zip(biases, u.params.biases):
            acc += share * b
    return ModelParams(
        first.encoder_specs,
        first.head_specs,
        weights,
        biases,
        [np.zeros_like(w) for w in weights],
        [np.zeros_like(b) for b in biases],
    )


def run_round(
    state: RoundState, shards: list[ClientShard], config: RunConfig
) -> tuple[RoundState, ConvergenceReport | None]:
    """One global round: broadcast, local updates, barrier, aggregate, evaluate."""
    t = state.round
    algo = config.algorithm
    averaging = algo in PARAM_AVERAGING
    n_clients = config.N
    lr_t = config.lr * config.lr_decay**t

    def one(i: int) -> ClientUpdate:
        broadcast = state.global_params if averaging else state.client_params[i]
        seed = derive_seed(config.seeds.master, STREAM_CLIENT, i, t)
        prev = state.client_prototypes[i] if state.client_prototypes else None
        return local_update(shards[i], broadcast, state.pool, config, t, seed, prev)

    workers = config.workers if config.workers is not None else n_clients
    if workers > 1 and n_clients > 1:
        with ThreadPoolExecutor(max_workers=min(workers, n_clients)) as pool_ex:
            updates = list(pool_ex.map(one, range(n_clients)))
    else:
        updates = [one(i) for i in range(n_clients)]
    updates.sort(key=lambda u: u.client_id)

    new_global = aggregate_params(updates) if averaging else state.global_params
    if algo in PROTOTYPE_ALGOS:
        pool = aggregate_pool(
            [u.prototypes for u in updates], n_clients, config.K, config.arch.num_classes, round=t + 1
        )
    else:
        pool = GlobalPrototypePool({}, t + 1)
    client_params = None if averaging else [u.params for u in updates]

    eval_params = [new_global] * n_clients if averaging else client_params
    mode = config.eval_mode or DEFAULT_EVAL_MODE[algo]
    normalize = config.loss.use_contrastive and config.loss.normalize_embeddings
    result = inference.evaluate(eval_params, pool, shards, mode, normalize=normalize)

    total = float(sum(u.data_size for u in updates))
    train_loss = sum(u.train_loss * u.data_size for u in updates) / total
    rows = [
        {
            "round": t,
            "client_id": u.client_id,
            "train_loss": u.train_loss,
            "eval_acc": result.per_client[i],
            "lr": lr_t,
            "algorithm": algo,
            "seed": config.seeds.master,
        }
        for i, u in enumerate(updates)
    ]
    rows.append(
        {
            "round": t,
            "client_id": -1,
            "train_loss": train_loss,
            "eval_acc": result.mean,
            "lr": lr_t,
            "algorithm": algo,
            "seed": config.seeds.master,
        }
    )

    report = None
    if all(u.diag_grad is not None for u in updates) and n_clients >= 2:
        report = estimate_round_constants(
            [u.diag_grad for u in updates], [u.data_size for u in updates]
        )
        report.round = t
        report.A_p = config.arch.num_classes - 1
        probe = shards[0].train.features[:128]
        report.L2_hat = estimate_embedding_lipschitz(state.global_params, new_global, probe)
        gv_sum = report.G_hat * float(np.mean([u.diag_emb_norm for u in updates])) * n_clients
        report.eta_bound = lr_bound(report, config.loss.tau, gv_sum, n_clients, config.l1_smooth)
        report.eta_used = lr_t
        if (
            state.train_loss is not None
            and math.isfinite(report.eta_bound)
            and report.eta_bound > 0
            and lr_t <= report.eta_bound
        ):
            report.decreasing_ok = bool(train_loss < state.train_loss)

    new_state = RoundState(
        t + 1,
        new_global,
        pool,
        client_params,
        rows,
        train_loss,
        client_prototypes=[u.prototypes for u in updates] if algo in PROTOTYPE_ALGOS else None,
    )
    return new_state, report


def _cast_shard(shard: ClientShard, dtype) -> ClientShard:
    def cast(ds: Dataset) -> Dataset:
        return Dataset(ds.features.astype(dtype), ds.labels, ds.num_classes)

    return ClientShard(shard.client_id, cast(shard.train), cast(shard.test), shard.label_histogram)


def run_training(config: RunConfig, shards: list[ClientShard]) -> RunArtifacts:
    """Run T rounds and return metrics, convergence reports, and final models."""
    if len(shards) != config.N:
        raise ValueError(f"config.N is {config.N} but {len(shards)} shards were given")
    dtype = DTYPES[config.precision]
    shards = [_cast_shard(s, dtype) for s in shards]
    params0 = init_params(
        config.arch.encoder_specs(),
        config.arch.head_specs(),
        derive_seed(config.seeds.master, STREAM_INIT),
        config.precision,
    )
    averaging = config.algorithm in PARAM_AVERAGING
    state = RoundState(
        round=0,
        global_params=params0,
        pool=GlobalPrototypePool({}, 0),
        client_params=None if averaging else [params0] * config.N,
    )
    metrics: list[dict] = []
    convergence: list[ConvergenceReport] = []
    for _ in range(config.T):
        state, report = run_round(state, shards, config)
        metrics.extend(state.per_client_metrics)
        if report is not None:
            convergence.append(report)
    final_rows = [r for r in state.per_client_metrics if r["client_id"] >= 0]
    accs = [r["eval_acc"] for r in final_rows]
    summary = {
        "algorithm": config.algorithm,
        "seed": config.seeds.master,
        "rounds": config.T,
        "mean_acc": float(np.mean(accs)),
        "std_acc": float(np.std(accs)),
        "per_client_acc": accs,
        "final_train_loss": state.train_loss,
    }
    return RunArtifacts(
        config=config,
        metrics=metrics,
        convergence=convergence,
        global_params=state.global_params,
        client_params=state.client_params,
        pool=state.pool,
        summary=summary,
    )
