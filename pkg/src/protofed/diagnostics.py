"""Per-round convergence health numbers.

These estimate the dissimilarity, variance, and gradient-bound constants from
the clients' full-shard gradients at the broadcast parameters, and evaluate
the learning-rate bound that would guarantee a per-round loss decrease.  They
are diagnostics, not guarantees: smoothness is a config input, and the bound
may come out negative (then no positive learning rate satisfies it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import GradientVector, ModelParams, encoder_param_vector, flatten_grad, forward_encoder

UNDEFINED = math.nan
GRAD_NORM_FLOOR = 1e-12


@dataclass
class ConvergenceReport:
    round: int = -1
    global_grad_norm: float = UNDEFINED
    delta_hat: float = UNDEFINED  # >= 1 whenever defined
    sigma2_hat: float = UNDEFINED
    G_hat: float = UNDEFINED
    A_p: int = -1  # count of negative classes, C - 1
    L2_hat: float = UNDEFINED
    eta_bound: float = UNDEFINED
    eta_used: float = UNDEFINED
    decreasing_ok: bool | None = None


def estimate_round_constants(
    client_grads: list[GradientVector], weights: list[float]
) -> ConvergenceReport:
    """Dissimilarity, variance, and max-norm of client gradients.

    The global gradient is the weighted mean of the client gradients; the
    dissimilarity ratio is reported as NaN when its norm is below 1e-12.
    """
    if len(client_grads) < 2:
        raise ValueError("need at least 2 client gradients")
    if len(weights) != len(client_grads):
        raise ValueError("need one weight per gradient")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    g = np.stack([flatten_grad(cg).astype(np.float64) for cg in client_grads])
    g_bar = w @ g
    norms2 = (g * g).sum(axis=1)
    second_moment = float(w @ norms2)
    g_bar_norm = float(np.linalg.norm(g_bar))
    delta = math.sqrt(second_moment) / g_bar_norm if g_bar_norm >= GRAD_NORM_FLOOR else UNDEFINED
    sigma2 = float(w @ ((g - g_bar) ** 2).sum(axis=1))
    return ConvergenceReport(
        global_grad_norm=g_bar_norm,
        delta_hat=delta,
        sigma2_hat=sigma2,
        G_hat=float(np.sqrt(norms2.max())),
    )


def lr_bound(
    report: ConvergenceReport,
    tau: float,
    gv_sum: float,
    n_clients: int,
    l1: float = 10.0,
) -> float:
    """Right-hand side of the monotone-decrease learning-rate condition.

    gv_sum stands in for the gradient-weighted sum of embedding norms; l1 is
    the (unvalidated) smoothness constant from the run config.  The raw value
    is returned, negative or not.
    """
    numerator = 2.0 * (report.sigma2_hat * tau * n_clients - report.A_p * report.L2_hat * gv_sum)
    denominator = l1 * report.global_grad_norm**2 * tau * report.delta_hat**2 * n_clients
    if not math.isfinite(denominator) or denominator == 0.0:
        return UNDEFINED
    return numerator / denominator


def estimate_embedding_lipschitz(
    params_before: ModelParams, params_after: ModelParams, probe: np.ndarray
) -> float:
    """Max over probe samples of |embedding change| / |encoder change|.

    A lower bound on the embedding Lipschitz constant; NaN when the encoder
    parameters did not move.
    """
    dparams = float(
        np.linalg.norm(encoder_param_vector(params_after) - encoder_param_vector(params_before))
    )
    if dparams == 0.0:
        return UNDEFINED
    before = forward_encoder(params_before, probe)
    after = forward_encoder(params_after, probe)
    ratios = np.linalg.norm(after - before, axis=1) / dparams
    return float(ratios.max())
