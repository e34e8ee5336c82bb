"""Cluster-robust loss weighting.

Per-cluster losses are combined with two weight vectors: difficulty weights
``alpha_i = loss_i**beta / sum_j loss_j**beta`` and robust weights ``omega``
living on the simplex. ``omega`` follows a closed-form multiplicative update
driven by the loss/gradient similarity matrix

    r[i, j] = (loss_i * loss_j)**beta * dot(grad_i, grad_j)

so clusters whose gradients agree with the others gain weight, anchored to the
previous step by a KL term of strength ``tau``. An independent numerical
minimizer of the underlying simplex objective validates the closed form. A
baseline that simply upweights high-loss groups is also provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvariantError, OracleConvergenceError

_SIMPLEX_ATOL = 1e-9


def _check_simplex(omega: np.ndarray, name: str = "omega") -> None:
    if np.any(omega <= 0.0) or abs(float(omega.sum()) - 1.0) > _SIMPLEX_ATOL:
        raise ValueError(f"{name} must be strictly positive and sum to 1")


def alpha_weights(losses: np.ndarray, beta: float) -> np.ndarray:
    """Difficulty weights proportional to loss**beta, normalized to sum to 1.

    beta = 0 or an all-zero loss vector gives uniform weights.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if np.any(losses < 0):
        raise ValueError("per-cluster losses must be >= 0")
    powered = losses**beta
    total = float(powered.sum())
    if total == 0.0:
        return np.full(losses.shape[0], 1.0 / losses.shape[0])
    return powered / total


def r_matrix(losses: np.ndarray, grads: np.ndarray, beta: float) -> np.ndarray:
    """Pairwise loss/gradient similarity: (loss_i*loss_j)**beta * dot(g_i, g_j)."""
    losses = np.asarray(losses, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] != losses.shape[0]:
        raise ValueError("grads must be a [n_clusters, n_params] matrix")
    return np.outer(losses, losses) ** beta * (grads @ grads.T)


def omega_update(omega_prev: np.ndarray, r: np.ndarray, tau: float) -> np.ndarray:
    """Closed-form robust-weight update.

    omega_i ~ omega_prev_i * exp(sum_j r[i, j] / tau), renormalized on the
    simplex, computed with max-subtraction. tau = inf is the frozen limit.
    """
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    if not tau > 0:
        raise ValueError("tau must be > 0")
    _check_simplex(omega_prev, "omega_prev")
    if math.isinf(tau):
        return omega_prev.copy()
    z = r.sum(axis=1) / tau
    z -= z.max()
    # The 1e-300 floor keeps weights strictly positive under extreme
    # concentration; it is far below any tolerance used downstream.
    w = np.maximum(omega_prev * np.exp(z), 1e-300)
    return w / w.sum()


def omega_update_masked(
    omega_prev: np.ndarray, r: np.ndarray, tau: float, present: np.ndarray
) -> np.ndarray:
    """Update only the clusters marked present, freezing the rest exactly.

    The present coordinates are renormalized so their total mass is preserved,
    which keeps the full vector on the simplex.
    """
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if not tau > 0:
        raise ValueError("tau must be > 0")
    if math.isinf(tau) or not present.any():
        return omega_prev.copy()
    idx = np.flatnonzero(present)
    z = r.sum(axis=1)[idx] / tau
    z -= z.max()
    e = np.exp(z)
    mass = omega_prev[idx].sum()
    scale = mass / float((omega_prev[idx] * e).sum())
    out = omega_prev.copy()
    out[idx] = np.maximum(omega_prev[idx] * e * scale, 1e-300)
    return out


def omega_oracle(
    omega_prev: np.ndarray,
    losses: np.ndarray,
    grads: np.ndarray,
    tau: float,
    beta: float,
    eta: float = 1.0,
    tol: float = 1e-8,
    max_iters: int = 10_000,
) -> np.ndarray:
    """Numerically minimize the robust-weight objective on the simplex.

    Minimizes  -eta * sum_i omega_i * s_i  +  tau * KL(omega || omega_prev)
    with s_i = sum_j r[i, j], via exponentiated-gradient descent, independent
    of the closed form in `omega_update` (which it matches for eta = 1; other
    eta values only rescale the effective tau).
    """
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    if not tau > 0:
        raise ValueError("tau must be > 0")
    _check_simplex(omega_prev, "omega_prev")
    k = omega_prev.shape[0]
    if k == 1:
        return np.ones(1)
    if math.isinf(tau):
        return omega_prev.copy()

    s = r_matrix(losses, grads, beta).sum(axis=1)
    w = omega_prev.copy()
    lr = 0.5 / tau
    for _ in range(max_iters):
        grad_obj = -eta * s + tau * (np.log(w / omega_prev) + 1.0)
        z = -lr * grad_obj
        z -= z.max()
        w_new = w * np.exp(z)
        w_new = np.maximum(w_new / w_new.sum(), 1e-300)
        if float(np.max(np.abs(w_new - w))) < tol:
            return w_new
        w = w_new
    raise OracleConvergenceError(
        f"simplex minimization did not converge within {max_iters} iterations"
    )


def groupdro_update(
    omega_prev: np.ndarray, losses: np.ndarray, step_size: float
) -> np.ndarray:
    """Baseline weighting: omega_i ~ omega_prev_i * exp(step_size * loss_i)."""
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    _check_simplex(omega_prev, "omega_prev")
    z = step_size * losses
    z = z - z.max()
    w = np.maximum(omega_prev * np.exp(z), 1e-300)
    return w / w.sum()


def groupdro_update_masked(
    omega_prev: np.ndarray, losses: np.ndarray, step_size: float, present: np.ndarray
) -> np.ndarray:
    """Baseline update restricted to present clusters; absent weights are frozen."""
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if not present.any():
        return omega_prev.copy()
    idx = np.flatnonzero(present)
    z = step_size * np.asarray(losses, dtype=np.float64)[idx]
    z = z - z.max()
    e = np.exp(z)
    mass = omega_prev[idx].sum()
    scale = mass / float((omega_prev[idx] * e).sum())
    out = omega_prev.copy()
    out[idx] = np.maximum(omega_prev[idx] * e * scale, 1e-300)
    return out


@dataclass
class GroupState:
    """Per-cluster bookkeeping: losses, difficulty weights, robust weights."""

    n_clusters: int
    beta: float
    tau: float
    losses: np.ndarray
    alpha: np.ndarray
    omega: np.ndarray
    step: int = 0

    @classmethod
    def initial(cls, n_clusters: int, beta: float, tau: float) -> "GroupState":
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        uniform = np.full(n_clusters, 1.0 / n_clusters)
        return cls(
            n_clusters=n_clusters,
            beta=beta,
            tau=tau,
            losses=np.zeros(n_clusters),
            alpha=uniform.copy(),
            omega=uniform.copy(),
            step=0,
        )

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "beta": self.beta,
            "tau": self.tau,
            "losses": self.losses.tolist(),
            "alpha": self.alpha.tolist(),
            "omega": self.omega.tolist(),
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupState":
        return cls(
            n_clusters=int(d["n_clusters"]),
            beta=float(d["beta"]),
            tau=float(d["tau"]),
            losses=np.asarray(d["losses"], dtype=np.float64),
            alpha=np.asarray(d["alpha"], dtype=np.float64),
            omega=np.asarray(d["omega"], dtype=np.float64),
            step=int(d["step"]),
        )


def idro_loss(
    item_losses: np.ndarray, item_clusters: np.ndarray, state: GroupState
) -> tuple[float, GroupState]:
    """Combine per-item losses into the cluster-weighted scalar objective.

    Cluster losses are means over the cluster's batch members. Clusters absent
    from the batch contribute nothing and keep their previous bookkeeping.
    Difficulty weights alpha are recomputed from the present clusters, and the
    scalar is  sum_i alpha_i*omega_i*loss_i / sum_i alpha_i*omega_i  over the
    present clusters, so its scale does not depend on batch composition.
    """
    item_losses = np.asarray(item_losses, dtype=np.float64)
    item_clusters = np.asarray(item_clusters, dtype=np.int64)
    if item_losses.shape != item_clusters.shape:
        raise ValueError("item_losses and item_clusters must align")
    if item_losses.size == 0:
        raise ValueError("cannot weight an empty batch")
    if np.any(item_clusters < 0) or np.any(item_clusters >= state.n_clusters):
        raise InvariantError("batch item mapped to an unknown cluster")

    counts = np.bincount(item_clusters, minlength=state.n_clusters)
    sums = np.bincount(item_clusters, weights=item_losses, minlength=state.n_clusters)
    present = counts > 0
    means = np.zeros(state.n_clusters)
    means[present] = sums[present] / counts[present]

    alpha_present = alpha_weights(means[present], state.beta)
    alpha = np.zeros(state.n_clusters)
    alpha[present] = alpha_present

    weights = alpha[present] * state.omega[present]
    scalar = float((weights * means[present]).sum() / weights.sum())

    new_losses = state.losses.copy()
    new_losses[present] = means[present]
    new_state = replace(state, losses=new_losses, alpha=alpha)
    return scalar, new_state


def combine_cluster_grads(
    grads: np.ndarray, alpha: np.ndarray, omega: np.ndarray, present: np.ndarray
) -> np.ndarray:
    """Gradient of the weighted scalar objective with the weights held fixed.

    Returns  sum_i alpha_i*omega_i*g_i / sum_i alpha_i*omega_i  over present
    clusters.
    """
    present = np.asarray(present, dtype=bool)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        raise ValueError("no present clusters to combine")
    weights = (np.asarray(alpha, dtype=np.float64) * np.asarray(omega, dtype=np.float64))[idx]
    combined = weights @ np.asarray(grads, dtype=np.float64)[idx]
    return combined / float(weights.sum())
