"""Scalar training objectives and their exact input gradients.

All functions are pure and operate on plain arrays; gradients returned here
are with respect to the function's own inputs (logits, embeddings, or class
means), never the prototype pool, whose rows are constants from the previous
round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .prototypes import GlobalPrototypePool


@dataclass
class LossConfig:
    tau: float = 0.07
    use_contrastive: bool = False
    normalize_embeddings: bool = True
    mu_prox: float = 0.0
    lambda_proto: float = 0.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.mu_prox < 0:
            raise ValueError("mu_prox must be >= 0")
        if self.lambda_proto < 0:
            raise ValueError("lambda_proto must be >= 0")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class; returns (loss, dlogits).

    The max is subtracted inside the softmax for stability; dlogits is
    (softmax - onehot) / batch_size.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one id per logits row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -float(logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return m / safe, norms


def _logsumexp_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1)
    finite = np.isfinite(m)
    safe_m = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe_m + np.log(np.exp(s - safe_m[:, None]).sum(axis=1))
    return np.where(finite, out, -np.inf)


def contrastive_reg(
    embeddings: np.ndarray,
    labels: np.ndarray,
    pool: "GlobalPrototypePool",
    tau: float,
    normalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Prototype-pool supervised contrastive term; returns (loss, dembeddings).

    Per sample the positives are every pooled row of its own class and the
    denominator runs over every pooled row of every class:

        loss_i = -log( sum_{p in pool[y_i]} exp(v_i . u_p / tau)
                       / sum_{a in pool} exp(v_i . u_a / tau) )

    which is identically zero when the pool holds a single class.  Samples
    whose label is absent from the pool contribute zero loss and gradient.
    Embeddings and pool rows are l2-normalized first when `normalize` is set;
    the gradient flows through the normalization but never into pool rows.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(embeddings)
    classes = sorted(pool.per_class)
    if not classes or n == 0:
        return 0.0, np.zeros_like(embeddings)
    u = np.vstack([pool.per_class[j] for j in classes]).astype(embeddings.dtype, copy=False)
    row_class = np.concatenate([np.full(len(pool.per_class[j]), j) for j in classes])
    if normalize:
        v_hat, v_norms = _unit_rows(embeddings)
        u_hat, _ = _unit_rows(u)
    else:
        v_hat, v_norms = embeddings, None
        u_hat = u

    s = (v_hat @ u_hat.T) / tau  # (n, total pool rows)
    pos_mask = row_class[None, :] == labels[:, None]
    has_pos = pos_mask.any(axis=1)
    lse_all = _logsumexp_rows(s)
    lse_pos = _logsumexp_rows(np.where(pos_mask, s, -np.inf))
    per_sample = np.where(has_pos, lse_all - lse_pos, 0.0)
    loss = float(per_sample.sum() / n)

    p_all = np.exp(s - lse_all[:, None])
    lse_pos_safe = np.where(has_pos, lse_pos, 0.0)
    p_pos = np.where(pos_mask, np.exp(s - lse_pos_safe[:, None]), 0.0)
    ds = (p_all - p_pos) * has_pos[:, None].astype(s.dtype) / n
    dv = (ds @ u_hat) / tau
    if normalize:
        # Back through v_hat = v / ||v||; zero-norm rows get zero gradient.
        inner = (dv * v_hat).sum(axis=1, keepdims=True)
        dv = np.where(v_norms > 0, (dv - inner * v_hat) / np.where(v_norms > 0, v_norms, 1.0), 0.0)
    return loss, dv


def fedproto_reg(
    local_class_means: Mapping[int, np.ndarray],
    global_single_protos: Mapping[int, np.ndarray],
    lam: float,
) -> tuple[float, dict[int, np.ndarray]]:
    """Mean squared distance between local class means and global prototypes.

    Returns (loss, gradient per shared class w.r.t. the local mean).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    shared = sorted(set(local_class_means) & set(global_single_protos))
    if not shared:
        raise ValueError("no shared classes between local means and global prototypes")
    loss = 0.0
    grads: dict[int, np.ndarray] = {}
    for j in shared:
        diff = np.asarray(local_class_means[j]) - np.asarray(global_single_protos[j])
        loss += float((diff * diff).sum())
        grads[j] = (2.0 * lam / len(shared)) * diff
    return lam * loss / len(shared), grads
