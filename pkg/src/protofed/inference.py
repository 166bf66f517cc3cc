"""Nearest-prototype and classifier-head prediction, plus accuracy evaluation.

Prototype prediction embeds a sample, takes the smallest l2 distance to each
class's pooled rows, and returns the class with the smallest such candidate
distance; ties break toward the smaller class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClientShard
from .losses import _unit_rows
from .nn import ModelParams, forward_encoder, forward_head
from .prototypes import GlobalPrototypePool


@dataclass
class EvalResult:
    per_client: list[float]
    mean: float
    std: float  # population std across clients


def classifier_predictions(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Argmax over head logits; ties go to the smallest class id."""
    logits = forward_head(params, forward_encoder(params, batch))
    return logits.argmax(axis=1)


def prototype_predictions(
    params: ModelParams,
    pool: GlobalPrototypePool,
    batch: np.ndarray,
    normalize: bool = True,
) -> np.ndarray:
    """Per class the min distance over its pooled rows, then argmin over classes.

    Embeddings and pool rows are l2-normalized first iff the training loss
    normalized them, so train and inference geometry agree.
    """
    classes = pool.classes()
    if not classes:
        raise ValueError("empty prototype pool")
    emb = forward_encoder(params, batch)
    rows = np.vstack([pool.per_class[j] for j in classes])
    sizes = [len(pool.per_class[j]) for j in classes]
    if normalize:
        emb, _ = _unit_rows(emb)
        rows, _ = _unit_rows(rows)
    d2 = np.maximum(
        (emb * emb).sum(axis=1)[:, None] - 2.0 * emb @ rows.T + (rows * rows).sum(axis=1)[None, :],
        0.0,
    )
    per_class = np.empty((len(emb), len(classes)))
    start = 0
    for k, size in enumerate(sizes):
        per_class[:, k] = d2[:, start : start + size].min(axis=1)
        start += size
    return np.asarray(classes, dtype=np.int64)[per_class.argmin(axis=1)]


def predict_classifier(params: ModelParams, sample: np.ndarray) -> int:
    return int(classifier_predictions(params, np.atleast_2d(sample))[0])


def predict_prototype(
    params: ModelParams, pool: GlobalPrototypePool, sample: np.ndarray, normalize: bool = True
) -> int:
    return int(prototype_predictions(params, pool, np.atleast_2d(sample), normalize)[0])


def evaluate(
    params_per_client: list[ModelParams],
    pool: GlobalPrototypePool | None,
    shards: list[ClientShard],
    mode: str,
    normalize: bool = True,
) -> EvalResult:
    """Top-1 accuracy on every client's test split, with mean and std."""
    if mode not in ("prototype", "classifier"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if len(params_per_client) != len(shards):
        raise ValueError("need one parameter set per client")
    accs = []
    for params, shard in zip(params_per_client, shards):
        if shard.test.rows == 0:
            raise ValueError(f"client {shard.client_id} has an empty test split")
        if mode == "classifier":
            preds = classifier_predictions(params, shard.test.features)
        else:
            preds = prototype_predictions(params, pool, shard.test.features, normalize)
        accs.append(float((preds == shard.test.labels).mean()))
    return EvalResult(accs, float(np.mean(accs)), float(np.std(accs)))
