"""Dense feed-forward model with exact analytic gradients.

The full model is head(encoder(x)): affine layers with optional ReLU, the
final head layer left linear because softmax lives inside the cross-entropy
loss.  Everything here is a pure function over value types, so concurrent
client workers can share inputs without locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .losses import LossConfig, contrastive_reg, cross_entropy, fedproto_reg
from .prototypes import GlobalPrototypePool

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """A tensor does not match the configured layer chain."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # "relu" | "none"


@dataclass
class ModelParams:
    encoder_specs: tuple[LayerSpec, ...]
    head_specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]  # encoder layers first, then head layers
    biases: list[np.ndarray]
    vel_weights: list[np.ndarray]  # SGD momentum buffers, same shapes
    vel_biases: list[np.ndarray]

    @property
    def n_encoder(self) -> int:
        return len(self.encoder_specs)

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return self.encoder_specs + self.head_specs

    @property
    def embed_dim(self) -> int:
        return self.encoder_specs[-1].out_dim

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype


@dataclass
class GradientVector:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]


def _validate_chain(encoder: Sequence[LayerSpec], head: Sequence[LayerSpec]) -> None:
    if not encoder or not head:
        raise ShapeError("need at least one encoder layer and one head layer")
    chain = list(encoder) + list(head)
    for spec in chain:
        if spec.in_dim <= 0 or spec.out_dim <= 0:
            raise ShapeError(f"layer dims must be positive, got {spec}")
        if spec.activation not in ("relu", "none"):
            raise ShapeError(f"unknown activation {spec.activation!r}")
    for prev, cur in zip(chain, chain[1:]):
        if prev.out_dim != cur.in_dim:
            raise ShapeError(f"layer boundary mismatch: {prev.out_dim} -> {cur.in_dim}")


def init_params(
    encoder: Sequence[LayerSpec],
    head: Sequence[LayerSpec],
    seed: int,
    precision: str = "f64",
) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases and momentum buffers.

    Weights are drawn from U(-1/sqrt(in_dim), +1/sqrt(in_dim)) with the given
    seed; identical seeds give bit-identical parameters.
    """
    _validate_chain(encoder, head)
    dtype = DTYPES[precision]
    rng = np.random.default_rng(seed)
    weights, biases, vw, vb = [], [], [], []
    for spec in tuple(encoder) + tuple(head):
        bound = 1.0 / np.sqrt(spec.in_dim)
        weights.append(rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)).astype(dtype))
        biases.append(np.zeros(spec.out_dim, dtype=dtype))
        vw.append(np.zeros((spec.in_dim, spec.out_dim), dtype=dtype))
        vb.append(np.zeros(spec.out_dim, dtype=dtype))
    return ModelParams(tuple(encoder), tuple(head), weights, biases, vw, vb)


def _check_batch(x: np.ndarray, in_dim: int, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"{what} must be 2-D with {in_dim} columns, got shape {x.shape}")
    return x


def _run_layers(x, weights, biases, specs):
    for w, b, spec in zip(weights, biases, specs):
        z = x @ w + b
        x = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return x


def forward_encoder(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Embeddings for a (batch, in_dim) matrix."""
    ne = params.n_encoder
    batch = _check_batch(batch, params.encoder_specs[0].in_dim, "batch")
    return _run_layers(batch, params.weights[:ne], params.biases[:ne], params.encoder_specs)


def forward_head(params: ModelParams, embeddings: np.ndarray) -> np.ndarray:
    """Logits for a (batch, embed_dim) matrix."""
    ne = params.n_encoder
    embeddings = _check_batch(embeddings, params.head_specs[0].in_dim, "embeddings")
    return _run_layers(embeddings, params.weights[ne:], params.biases[ne:], params.head_specs)


def _forward_trace(params: ModelParams, batch: np.ndarray):
    acts = [batch]
    pres = []
    for w, b, spec in zip(params.weights, params.biases, params.specs):
        z = acts[-1] @ w + b
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if spec.activation == "relu" else z)
    return acts, pres


def _backprop_range(params, acts, pres, dout, lo, hi, d_w, d_b):
    for layer in reversed(range(lo, hi)):
        dz = dout * (pres[layer] > 0) if params.specs[layer].activation == "relu" else dout
        d_w[layer] = acts[layer].T @ dz
        d_b[layer] = dz.sum(axis=0)
        dout = dz @ params.weights[layer].T
    return dout


def backward(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    pool: GlobalPrototypePool | None = None,
    global_ref: ModelParams | None = None,
    proto_targets: dict[int, np.ndarray] | None = None,
) -> tuple[float, GradientVector]:
    """Total training loss and its exact gradient for one mini-batch.

    The total is cross-entropy plus, when configured, the contrastive term
    (pool required; pool rows are constants), the proximal term against
    `global_ref`, and the prototype-distance term against `proto_targets`.
    """
    batch = _check_batch(batch, params.encoder_specs[0].in_dim, "batch")
    labels = np.asarray(labels, dtype=np.int64)
    acts, pres = _forward_trace(params, batch)
    ne, nl = params.n_encoder, len(params.weights)
    embeddings = acts[ne]
    logits = acts[-1]

    loss, dlogits = cross_entropy(logits, labels)
    d_w: list = [None] * nl
    d_b: list = [None] * nl
    demb = _backprop_range(params, acts, pres, dlogits, ne, nl, d_w, d_b)

    if loss_cfg.use_contrastive:
        if pool is None:
            raise ValueError("contrastive term enabled but no prototype pool supplied")
        reg_loss, dv = contrastive_reg(
            embeddings, labels, pool, loss_cfg.tau, loss_cfg.normalize_embeddings
        )
        loss += reg_loss
        demb = demb + dv

    if loss_cfg.lambda_proto > 0 and proto_targets:
        present = [j for j in np.unique(labels) if int(j) in proto_targets]
        if present:
            means = {int(j): embeddings[labels == j].mean(axis=0) for j in present}
            proto_loss, dmeans = fedproto_reg(means, proto_targets, loss_cfg.lambda_proto)
            loss += proto_loss
            demb = demb.copy()
            for j, g in dmeans.items():
                mask = labels == j
                demb[mask] += g / mask.sum()

    _backprop_range(params, acts, pres, demb, 0, ne, d_w, d_b)
    grads = GradientVector(d_w, d_b)

    if loss_cfg.mu_prox > 0:
        if global_ref is None:
            raise ValueError("proximal term enabled but no global reference supplied")
        prox_loss, prox = proximal_term(params, global_ref, loss_cfg.mu_prox)
        loss += prox_loss
        for layer in range(nl):
            grads.d_weights[layer] += prox.d_weights[layer]
            grads.d_biases[layer] += prox.d_biases[layer]

    return float(loss), grads


def proximal_term(
    local: ModelParams, global_ref: ModelParams, mu: float
) -> tuple[float, GradientVector]:
    """(mu/2) * squared l2 distance between parameter sets, and its gradient."""
    if local.specs != global_ref.specs:
        raise ShapeError("parameter sets come from different layer chains")
    loss = 0.0
    d_w, d_b = [], []
    for wl, wg in zip(local.weights, global_ref.weights):
        diff = wl - wg
        loss += float((diff * diff).sum())
        d_w.append(mu * diff)
    for bl, bg in zip(local.biases, global_ref.biases):
        diff = bl - bg
        loss += float((diff * diff).sum())
        d_b.append(mu * diff)
    return 0.5 * mu * loss, GradientVector(d_w, d_b)


def sgd_step(params: ModelParams, grads: GradientVector, lr: float, momentum: float) -> ModelParams:
    """One momentum SGD update: buf <- momentum*buf + grad; w <- w - lr*buf."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(grads.d_weights) != len(params.weights):
        raise ShapeError("gradient layer count does not match parameters")
    new_w, new_b, new_vw, new_vb = [], [], [], []
    for w, vw, dw in zip(params.weights, params.vel_weights, grads.d_weights):
        if dw.shape != w.shape:
            raise ShapeError(f"gradient shape {dw.shape} does not match weight {w.shape}")
        buf = momentum * vw + dw
        new_vw.append(buf)
        new_w.append(w - lr * buf)
    for b, vb, db in zip(params.biases, params.vel_biases, grads.d_biases):
        if db.shape != b.shape:
            raise ShapeError(f"gradient shape {db.shape} does not match bias {b.shape}")
        buf = momentum * vb + db
        new_vb.append(buf)
        new_b.append(b - lr * buf)
    return ModelParams(params.encoder_specs, params.head_specs, new_w, new_b, new_vw, new_vb)


def flatten_arrays(arrays: Iterable[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def flatten_grad(grads: GradientVector) -> np.ndarray:
    return flatten_arrays(grads.d_weights + grads.d_biases)


def encoder_param_vector(params: ModelParams) -> np.ndarray:
    ne = params.n_encoder
    return flatten_arrays(params.weights[:ne] + params.biases[:ne])
