"""Per-class multi-prototype computation and the server-side prototype pool.

Clients cluster their class embeddings into at most K centroids; the server
stacks all received centroids per class and pads each class to N*K rows with
the class mean so every class set has the same size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .kmeans import kmeans
from .rng import derive_seed


@dataclass
class LocalPrototypes:
    client_id: int
    per_class: dict[int, np.ndarray]  # class id -> (k_j, embed_dim)


@dataclass
class GlobalPrototypePool:
    per_class: dict[int, np.ndarray] = field(default_factory=dict)  # class id -> (m_j, embed_dim)
    round: int = 0

    def classes(self) -> list[int]:
        return sorted(self.per_class)


def compute_local_prototypes(
    embeddings_by_class: Mapping[int, np.ndarray],
    K: int,
    seed: int,
    client_id: int = -1,
    restarts: int = 1,
    warm_start: Mapping[int, np.ndarray] | None = None,
) -> LocalPrototypes:
    """Cluster each class's embeddings into min(K, class size) prototypes.

    Classes the client does not own are simply absent from the result.  When
    `warm_start` supplies a previous centroid set of the right size for a
    class, clustering starts from it instead of random points.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    per_class: dict[int, np.ndarray] = {}
    for j in sorted(embeddings_by_class):
        rows = np.asarray(embeddings_by_class[j])
        if rows.ndim != 2 or len(rows) == 0:
            raise ValueError(f"class {j}: need a nonempty 2-D embedding matrix")
        k = min(K, len(rows))
        init = None
        if warm_start is not None and j in warm_start and len(warm_start[j]) == k:
            init = warm_start[j]
        res = kmeans(rows, k, seed=derive_seed(seed, int(j)), restarts=restarts, init_centroids=init)
        per_class[int(j)] = res.centroids
    return LocalPrototypes(client_id, per_class)


def pad_class(rows: np.ndarray, target_count: int) -> np.ndarray:
    """Append copies of the row mean until the set has `target_count` rows."""
    rows = np.asarray(rows)
    if rows.ndim != 2 or len(rows) == 0:
        raise ValueError("cannot pad an empty prototype set")
    if target_count < len(rows):
        raise ValueError(f"target_count {target_count} below current row count {len(rows)}")
    if target_count == len(rows):
        return rows
    mean = rows.mean(axis=0, keepdims=True)
    return np.vstack([rows, np.repeat(mean, target_count - len(rows), axis=0)])


def aggregate_pool(
    updates: list[LocalPrototypes],
    N: int,
    K: int,
    C: int,
    round: int = 0,
) -> GlobalPrototypePool:
    """Stack all clients' prototypes per class and pad each class to N*K rows.

    Classes owned by no client are absent from the pool; consumers must
    tolerate missing classes.
    """
    if len({u.client_id for u in updates}) > N:
        raise ValueError("more distinct clients than N")
    stacks: dict[int, list[np.ndarray]] = {}
    for up in sorted(updates, key=lambda u: u.client_id):
        for j in sorted(up.per_class):
            if not 0 <= j < C:
                raise ValueError(f"class id {j} outside [0, {C})")
            stacks.setdefault(j, []).append(up.per_class[j])
    per_class = {j: pad_class(np.vstack(stacks[j]), N * K) for j in sorted(stacks)}
    return GlobalPrototypePool(per_class, round)


def pool_to_dict(pool: GlobalPrototypePool) -> dict:
    """JSON-ready snapshot: {round, classes: {class id: [[...]]}}."""
    return {
        "round": pool.round,
        "classes": {str(j): pool.per_class[j].tolist() for j in pool.classes()},
    }


def pool_from_dict(doc: Mapping) -> GlobalPrototypePool:
    per_class = {int(j): np.asarray(rows, dtype=np.float64) for j, rows in doc["classes"].items()}
    return GlobalPrototypePool(per_class, int(doc["round"]))
