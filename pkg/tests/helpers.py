"""Shared test utilities: finite-difference oracles and fixture builders."""

import numpy as np

from protofed.losses import LossConfig
from protofed.nn import LayerSpec, ModelParams, backward, init_params
from protofed.prototypes import GlobalPrototypePool

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        params.encoder_specs,
        params.head_specs,
        [w.copy() for w in params.weights],
        [b.copy() for b in params.biases],
        [v.copy() for v in params.vel_weights],
        [v.copy() for v in params.vel_biases],
    )


def fd_param_grads(params, loss_fn, h=FD_STEP):
    """Central finite differences of loss_fn over every weight/bias coordinate."""
    d_weights, d_biases = [], []
    work = clone_params(params)
    for arrays, grads in ((work.weights, d_weights), (work.biases, d_biases)):
        for arr in arrays:
            grad = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn(work)
                flat[i] = orig - h
                down = loss_fn(work)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(grad)
    return d_weights, d_biases


def fd_array_grad(x, loss_fn, h=FD_STEP):
    """Central finite differences of loss_fn over one input array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, atol=FD_ATOL):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / FD_RTOL)
    return float((np.abs(analytic - numeric) / scale).max()) if analytic.size else 0.0


def grads_match(grads, fd_w, fd_b):
    worst = 0.0
    for a, n in zip(grads.d_weights, fd_w):
        worst = max(worst, max_rel_err(a, n))
    for a, n in zip(grads.d_biases, fd_b):
        worst = max(worst, max_rel_err(a, n))
    return worst


def random_pool(rng, num_classes, rows_per_class, dim) -> GlobalPrototypePool:
    per_class = {j: rng.standard_normal((rows_per_class, dim)) for j in range(num_classes)}
    return GlobalPrototypePool(per_class, 0)


def min_preactivation(params, batch):
    """Smallest |pre-activation| across the whole forward pass."""
    x = batch
    worst = np.inf
    for w, b, spec in zip(params.weights, params.biases, params.specs):
        z = x @ w + b
        worst = min(worst, float(np.abs(z).min()))
        x = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return worst


def make_fixture(rng, in_dim=5, hidden=7, embed=6, classes=3, batch=4, seed=None, margin=1e-3):
    """Small random model + batch with all pre-activations clear of ReLU kinks."""
    for attempt in range(200):
        s = int(rng.integers(2**31)) if seed is None else seed + attempt
        params = init_params(
            (LayerSpec(in_dim, hidden), LayerSpec(hidden, embed)),
            (LayerSpec(embed, hidden), LayerSpec(hidden, classes, "none")),
            seed=s,
        )
        batch_x = rng.standard_normal((batch, in_dim))
        labels = rng.integers(0, classes, size=batch)
        if min_preactivation(params, batch_x) > margin:
            return params, batch_x, labels
    raise AssertionError("could not build a kink-free fixture")


def total_loss_fn(batch, labels, cfg: LossConfig, pool=None, global_ref=None, proto_targets=None):
    def f(params):
        return backward(params, batch, labels, cfg, pool, global_ref, proto_targets)[0]

    return f


def exhaustive_kmeans_optimum(points, k):
    """Global optimum inertia over every assignment into at most k clusters.

    Uses sum_c ||p_i - mean_c||^2 = sum ||p_i||^2 - sum_c ||sum_c||^2 / n_c,
    vectorized over all k**n assignments.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    grids = np.meshgrid(*([np.arange(k)] * n), indexing="ij")
    assigns = np.stack([g.reshape(-1) for g in grids], axis=1)  # (k**n, n)
    total_sq = float((points * points).sum())
    reduction = np.zeros(len(assigns))
    for c in range(k):
        mask = (assigns == c).astype(np.float64)
        counts = mask.sum(axis=1)
        sums = mask @ points
        with np.errstate(invalid="ignore", divide="ignore"):
            contrib = (sums * sums).sum(axis=1) / counts
        reduction += np.where(counts > 0, contrib, 0.0)
    return float(total_sq - reduction.max())
