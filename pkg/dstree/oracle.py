"""Exact reference computations for small models."""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import math
from typing import Dict, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .const import DEFAULT_MAX_DISCRETE_PATHS, DEFAULT_MAX_JOINT_GAUSSIAN_DIM, LOGGER
from .errors import CovarianceError, OracleLimitError, ShapeError
from .helpers import LOG_2PI, LOG_2PIE, symmetrize
from .inference import ContinuousChainStats, GaussianChainParams
from .model import LeafParams, Model, ObservationSet, check_observations
from .topology import NodeId


@dataclass(frozen=True)
class TinyLimits:
    max_total_discrete_paths: int = DEFAULT_MAX_DISCRETE_PATHS
    max_joint_gaussian_dim: int = DEFAULT_MAX_JOINT_GAUSSIAN_DIM

    def __post_init__(self):
        if self.max_total_discrete_paths < 1 or self.max_joint_gaussian_dim < 1:
            raise ValueError("oracle limits must be positive")


def _filter_loglik(
    mu0: np.ndarray,
    q0: np.ndarray,
    A: np.ndarray,
    Q: np.ndarray,
    C: np.ndarray,
    R: np.ndarray,
    y: np.ndarray,
    observed: np.ndarray,
) -> float:
    """Kalman filter with per-step dynamics A[t-1], Q[t-1]; masked steps only predict."""
    y_dim = C.shape[0]
    mean, covariance = mu0.copy(), q0.copy()
    total = 0.0
    for t in range(len(y)):
        if t > 0:
            mean = A[t - 1] @ mean
            covariance = symmetrize(A[t - 1] @ covariance @ A[t - 1].T + Q[t - 1])
        if not observed[t]:
            continue

        innovation_cov = symmetrize(C @ covariance @ C.T + R)
        try:
            factor = cho_factor(innovation_cov, lower=True)
        except LinAlgError as err:
            raise CovarianceError(
                f"innovation covariance at t={t} is not positive definite"
            ) from err
        residual = y[t] - C @ mean
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        total -= 0.5 * (
            y_dim * LOG_2PI + logdet + float(residual @ cho_solve(factor, residual))
        )

        gain = cho_solve(factor, C @ covariance).T
        mean = mean + gain @ residual
        covariance = symmetrize(covariance - gain @ C @ covariance)
    return total


def kalman_loglik(
    leaf: LeafParams, y: np.ndarray, mask: np.ndarray | None = None
) -> float:
    """Exact log P(y) of a single-state leaf."""
    if leaf.num_switch_states != 1:
        raise ShapeError(f"kalman_loglik needs K=1, got K={leaf.num_switch_states}")
    y = np.asarray(y, dtype=float)
    observed = np.ones(len(y), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    num_steps = len(y) - 1
    return _filter_loglik(
        leaf.mu0[0],
        leaf.q0[0],
        np.broadcast_to(leaf.A[0], (num_steps, *leaf.A.shape[1:])),
        np.broadcast_to(leaf.Q[0], (num_steps, *leaf.Q.shape[1:])),
        leaf.C,
        leaf.R,
        y,
        observed,
    )


def _path_log_prob(
    initial_table: np.ndarray,
    transition_table: np.ndarray,
    path: Tuple[int, ...],
    parent_path: Tuple[int, ...],
) -> float:
    probabilities = [initial_table[path[0], parent_path[0]]] + [
        transition_table[path[t], path[t - 1], parent_path[t]] for t in range(1, len(path))
    ]
    if min(probabilities) <= 0:
        return -math.inf
    return float(sum(math.log(p) for p in probabilities))


def exact_loglik_enumerate(
    model: Model, obs: ObservationSet, limits: TinyLimits = TinyLimits()
) -> float:
    """
    log P(Y) by summing over every joint switch path; each leaf's continuous
    part is a time-varying Kalman filter along its own path.
    """
    check_observations(model, obs)
    topology = model.topology
    num_steps = obs.num_steps
    order = topology.preorder

    count = 1
    for node_id in order:
        count *= topology.num_states(node_id) ** (num_steps + 1)
    if count > limits.max_total_discrete_paths:
        raise OracleLimitError(
            f"{count} discrete paths exceed the limit of {limits.max_total_discrete_paths}"
        )
    LOGGER.debug("Enumerating %d discrete paths", count)

    root_path = (0,) * (num_steps + 1)
    leaf_cache: Dict[Tuple[NodeId, Tuple[int, ...]], float] = {}

    def leaf_loglik(leaf_id: NodeId, path: Tuple[int, ...]) -> float:
        key = (leaf_id, path)
        if key not in leaf_cache:
            params = model.leaf(leaf_id)
            steps = np.asarray(path[1:], dtype=int)
            leaf_cache[key] = _filter_loglik(
                params.mu0[path[0]],
                params.q0[path[0]],
                params.A[steps],
                params.Q[steps],
                params.C,
                params.R,
                obs.y[leaf_id],
                obs.observed[leaf_id],
            )
        return leaf_cache[key]

    per_node_paths = [
        itertools.product(range(topology.num_states(node_id)), repeat=num_steps + 1)
        for node_id in order
    ]
    total = -math.inf
    for joint in itertools.product(*per_node_paths):
        paths = dict(zip(order, joint))
        log_prob = 0.0
        for node_id in order:
            params = model.params[node_id]
            parent = topology[node_id].parent
            log_prob += _path_log_prob(
                params.initial_table,
                params.transition_table,
                paths[node_id],
                root_path if parent is None else paths[parent],
            )
            if log_prob == -math.inf:
                break
        if log_prob == -math.inf:
            continue
        for leaf_id in topology.leaves:
            log_prob += leaf_loglik(leaf_id, paths[leaf_id])
        total = float(np.logaddexp(total, log_prob))
    return total


def gaussian_chain_moments_naive(
    params: GaussianChainParams, limits: TinyLimits = TinyLimits()
) -> ContinuousChainStats:
    """Moments and entropy from the explicit joint Gaussian over x_0..x_T."""
    num_steps = params.A_hat.shape[0]
    dim = params.mu_init.shape[0]
    size = (num_steps + 1) * dim
    if size > limits.max_joint_gaussian_dim:
        raise OracleLimitError(
            f"joint Gaussian dimension {size} exceeds the limit of "
            f"{limits.max_joint_gaussian_dim}"
        )

    def block(t: int) -> slice:
        return slice(t * dim, (t + 1) * dim)

    precision = np.zeros((size, size))
    shift = np.zeros(size)
    q_inv = np.linalg.inv(params.q_init)
    precision[block(0), block(0)] += q_inv
    shift[block(0)] += q_inv @ params.mu_init
    for t in range(1, num_steps + 1):
        A, B = params.A_hat[t - 1], params.B_hat[t - 1]
        Q_inv = np.linalg.inv(params.Q_hat[t - 1])
        precision[block(t), block(t)] += Q_inv
        precision[block(t - 1), block(t - 1)] += A.T @ Q_inv @ A
        precision[block(t), block(t - 1)] -= Q_inv @ A
        precision[block(t - 1), block(t)] -= A.T @ Q_inv
        shift[block(t)] += Q_inv @ B
        shift[block(t - 1)] -= A.T @ Q_inv @ B

    covariance = np.linalg.inv(precision)
    joint_mean = covariance @ shift

    mean = joint_mean.reshape(num_steps + 1, dim)
    second = np.stack(
        [covariance[block(t), block(t)] + np.outer(mean[t], mean[t]) for t in range(num_steps + 1)]
    )
    cross = np.zeros((num_steps, dim, dim))
    for t in range(1, num_steps + 1):
        cross[t - 1] = covariance[block(t), block(t - 1)] + np.outer(mean[t], mean[t - 1])
    entropy = 0.5 * (size * LOG_2PIE - np.linalg.slogdet(precision)[1])
    return ContinuousChainStats(mean=mean, second=second, cross=cross, entropy=float(entropy))
