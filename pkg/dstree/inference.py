"""Structured mean field inference for Dynamical Systems Trees."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.special import logsumexp

from .const import (
    DEFAULT_INNER_ITERATIONS,
    DEFAULT_JITTER,
    LOGGER,
    MONOTONICITY_SLACK,
)
from .errors import (
    CovarianceError,
    DeadChainError,
    MonotonicityError,
    NumericalError,
    StaleStatisticsError,
)
from .helpers import (
    LOG_2PI,
    Seed,
    expected_gaussian_loglik,
    expected_log_table,
    expected_transition_loglik,
    gaussian_entropy,
    make_rng,
    masked_product_sum,
    spd_inverse,
    symmetrize,
)
from .model import LeafParams, Model, ObservationSet, check_observations
from .topology import NodeId, Topology


@dataclass
class DiscreteChainPotentials:
    """Unnormalized chain potentials, stored as logs."""

    log_init: np.ndarray
    """[K]"""
    log_trans: np.ndarray
    """[T, K, K], entry [t-1, j, k] weights s_t = j after s_{t-1} = k"""


@dataclass
class DiscreteChainStats:
    singleton: np.ndarray
    """[T+1, K]"""
    pairwise: np.ndarray
    """[T, K, K], entry [t-1, j, k] is <s_t(j) s_{t-1}(k)>"""
    entropy: float
    log_partition: float


@dataclass
class GaussianChainParams:
    """Q(x_0) = N(mu_init, q_init), Q(x_t | x_{t-1}) = N(A_hat x_{t-1} + B_hat, Q_hat)."""

    mu_init: np.ndarray
    q_init: np.ndarray
    A_hat: np.ndarray
    """[T, d, d], index t-1 holds step t"""
    B_hat: np.ndarray
    """[T, d]"""
    Q_hat: np.ndarray
    """[T, d, d]"""


@dataclass
class ContinuousChainStats:
    mean: np.ndarray
    """[T+1, d]"""
    second: np.ndarray
    """[T+1, d, d], E[x_t x_t']"""
    cross: np.ndarray
    """[T, d, d], index t-1 holds E[x_t x_{t-1}']"""
    entropy: float

    @property
    def covariance(self) -> np.ndarray:
        return self.second - np.einsum("ta,tb->tab", self.mean, self.mean)


@dataclass
class DiscreteChain:
    potentials: DiscreteChainPotentials
    stats: DiscreteChainStats
    stale: bool = False

    @classmethod
    def create(cls, potentials: DiscreteChainPotentials) -> DiscreteChain:
        return cls(potentials=potentials, stats=forward_backward(potentials))

    def update(self, potentials: DiscreteChainPotentials):
        self.potentials = potentials
        self.stale = True
        self.stats = forward_backward(potentials)
        self.stale = False


@dataclass
class GaussianChain:
    params: GaussianChainParams
    stats: ContinuousChainStats
    stale: bool = False

    @classmethod
    def create(cls, params: GaussianChainParams) -> GaussianChain:
        return cls(params=params, stats=continuous_moments(params))

    def update(self, params: GaussianChainParams):
        self.params = params
        self.stale = True
        self.stats = continuous_moments(params)
        self.stale = False


@dataclass
class VariationalState:
    """
    The factorized Q distribution: one discrete chain per node
    (aggregator chain or leaf switch chain) and one Gaussian chain per leaf.
    """

    num_steps: int
    discrete: Dict[NodeId, DiscreteChain]
    continuous: Dict[NodeId, GaussianChain]
    bound: float = -np.inf

    @property
    def stale(self) -> bool:
        return any(chain.stale for chain in self.discrete.values()) or any(
            chain.stale for chain in self.continuous.values()
        )


def forward_backward(potentials: DiscreteChainPotentials) -> DiscreteChainStats:
    """Exact marginals, entropy and log partition of a single discrete chain, in log space."""
    log_init = np.asarray(potentials.log_init, dtype=float)
    log_trans = np.asarray(potentials.log_trans, dtype=float)
    if np.any(np.isnan(log_init)) or np.any(np.isnan(log_trans)):
        raise NumericalError("chain potentials contain NaN")
    if np.any(np.isposinf(log_init)) or np.any(np.isposinf(log_trans)):
        raise NumericalError("chain potentials contain +inf")

    num_steps, num_states = log_trans.shape[0], log_init.shape[0]

    # One scalar shift per slice keeps the chain distribution unchanged
    init_shift = log_init.max()
    trans_shift = (
        log_trans.reshape(num_steps, -1).max(axis=1) if num_steps else np.zeros(0)
    )
    if not np.isfinite(init_shift) or not np.all(np.isfinite(trans_shift)):
        raise DeadChainError("dead chain state: a time slice has no mass")
    log_init = log_init - init_shift
    log_trans = log_trans - trans_shift[:, None, None]

    with np.errstate(divide="ignore", invalid="ignore"):
        log_alpha = np.empty((num_steps + 1, num_states))
        log_alpha[0] = log_init
        for t in range(1, num_steps + 1):
            previous = log_alpha[t - 1]
            dead = np.all(np.isneginf(log_trans[t - 1]), axis=0) & np.isfinite(previous)
            if np.any(dead):
                raise DeadChainError(
                    f"dead chain state {int(np.flatnonzero(dead)[0])} at t={t}"
                )
            log_alpha[t] = logsumexp(log_trans[t - 1] + previous[None, :], axis=1)

        log_z = float(logsumexp(log_alpha[num_steps]))
        if not np.isfinite(log_z):
            raise DeadChainError("dead chain state: chain has no probability mass")

        log_beta = np.zeros((num_steps + 1, num_states))
        for t in range(num_steps, 0, -1):
            log_beta[t - 1] = logsumexp(log_trans[t - 1] + log_beta[t][:, None], axis=0)

        singleton = np.exp(log_alpha + log_beta - log_z)
        pairwise = np.exp(
            log_alpha[:-1, None, :] + log_trans + log_beta[1:, :, None] - log_z
        )

    entropy = (
        log_z
        - masked_product_sum(singleton[0], log_init)
        - masked_product_sum(pairwise, log_trans)
    )
    return DiscreteChainStats(
        singleton=singleton,
        pairwise=pairwise,
        entropy=float(entropy),
        log_partition=log_z + float(init_shift) + float(trans_shift.sum()),
    )


def continuous_moments(params: GaussianChainParams) -> ContinuousChainStats:
    """Forward recursion for the moments of a conditioned Gaussian chain."""
    num_steps = params.A_hat.shape[0]
    dim = params.mu_init.shape[0]

    mean = np.empty((num_steps + 1, dim))
    covariance = np.empty((num_steps + 1, dim, dim))
    second = np.empty((num_steps + 1, dim, dim))
    cross = np.empty((num_steps, dim, dim))

    mean[0] = params.mu_init
    covariance[0] = symmetrize(params.q_init)
    second[0] = covariance[0] + np.outer(mean[0], mean[0])
    for t in range(1, num_steps + 1):
        A, B = params.A_hat[t - 1], params.B_hat[t - 1]
        mean[t] = A @ mean[t - 1] + B
        covariance[t] = symmetrize(A @ covariance[t - 1] @ A.T + params.Q_hat[t - 1])
        second[t] = covariance[t] + np.outer(mean[t], mean[t])
        cross[t - 1] = A @ second[t - 1] + np.outer(B, mean[t - 1])

    entropy = gaussian_entropy(np.linalg.slogdet(params.q_init)[1], dim)
    if num_steps:
        logdets = np.linalg.slogdet(params.Q_hat)[1]
        entropy += float(np.sum(0.5 * (dim * np.log(2.0 * np.pi * np.e) + logdets)))

    return ContinuousChainStats(mean=mean, second=second, cross=cross, entropy=entropy)


@dataclass
class _LeafPrecisions:
    q0: np.ndarray
    q0_logdet: np.ndarray
    Q: np.ndarray
    Q_logdet: np.ndarray
    R: np.ndarray
    R_logdet: float


def _leaf_precisions(leaf_id: NodeId, params: LeafParams) -> _LeafPrecisions:
    q0, q0_logdet, Q, Q_logdet = [], [], [], []
    for j in range(params.num_switch_states):
        inverse, logdet = spd_inverse(
            params.q0[j], f"node {leaf_id} q0 state {j}", CovarianceError
        )
        q0.append(inverse)
        q0_logdet.append(logdet)
        inverse, logdet = spd_inverse(
            params.Q[j], f"node {leaf_id} Q state {j}", CovarianceError
        )
        Q.append(inverse)
        Q_logdet.append(logdet)
    R, R_logdet = spd_inverse(params.R, f"node {leaf_id} R", CovarianceError)
    return _LeafPrecisions(
        q0=np.array(q0),
        q0_logdet=np.array(q0_logdet),
        Q=np.array(Q),
        Q_logdet=np.array(Q_logdet),
        R=R,
        R_logdet=R_logdet,
    )


def _parent_singleton(state: VariationalState, topology: Topology, node_id: NodeId):
    parent = topology[node_id].parent
    if parent is None:
        return np.ones((state.num_steps + 1, 1))
    return state.discrete[parent].stats.singleton


def _own_table_terms(
    initial_table: np.ndarray, transition_table: np.ndarray, parent_singleton: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Parent weighted log tables: [K] for t=0 and [T, K, K] for t=1..T."""
    log_init = expected_log_table(parent_singleton[0][None, :], initial_table).sum(axis=1)
    log_trans = expected_log_table(
        parent_singleton[1:, None, None, :], transition_table[None]
    ).sum(axis=-1)
    return log_init, log_trans


def switch_chain_evidence(
    leaf_id: NodeId, params: LeafParams, stats: ContinuousChainStats
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Expected continuous log densities per switch state:
    [K] for x_0 and [T, K] for the transitions into x_1..x_T.
    """
    precisions = _leaf_precisions(leaf_id, params)
    k = params.num_switch_states
    initial = np.array(
        [
            expected_gaussian_loglik(
                stats.mean[0],
                stats.second[0],
                params.mu0[j],
                precisions.q0[j],
                precisions.q0_logdet[j],
            )
            for j in range(k)
        ]
    )
    transition = np.stack(
        [
            expected_transition_loglik(
                stats.second,
                stats.cross,
                params.A[j],
                precisions.Q[j],
                precisions.Q_logdet[j],
            )
            for j in range(k)
        ],
        axis=-1,
    ).reshape(len(stats.cross), k)
    return initial, transition


def _expected_emission_loglik(
    params: LeafParams,
    precision: np.ndarray,
    logdet: float,
    stats: ContinuousChainStats,
    y: np.ndarray,
    observed: np.ndarray,
) -> float:
    steps = np.flatnonzero(observed)
    if not len(steps):
        return 0.0
    y, mean, second = y[steps], stats.mean[steps], stats.second[steps]
    projected = mean @ params.C.T
    C_prec_C = params.C.T @ precision @ params.C
    quadratic = (
        np.einsum("ta,ab,tb->t", y, precision, y)
        - 2.0 * np.einsum("ta,ab,tb->t", y, precision, projected)
        + np.einsum("ab,tba->t", C_prec_C, second)
    )
    return float(
        -0.5 * np.sum(params.C.shape[0] * LOG_2PI + logdet + quadratic)
    )


def update_aggregator_potentials(
    state: VariationalState, model: Model, a: NodeId
) -> DiscreteChainPotentials:
    """Mean field update of an aggregator chain, followed by forward-backward."""
    topology = model.topology
    params = model.params[a]
    log_init, log_trans = _own_table_terms(
        params.initial_table,
        params.transition_table,
        _parent_singleton(state, topology, a),
    )

    # Each child's own conditional table, Phi for aggregators and Psi for leaves
    for c in topology.children[a]:
        child_params = model.params[c]
        child_stats = state.discrete[c].stats
        log_init = log_init + expected_log_table(
            child_stats.singleton[0][:, None], child_params.initial_table
        ).sum(axis=0)
        log_trans = log_trans + expected_log_table(
            child_stats.pairwise[:, :, :, None], child_params.transition_table[None]
        ).sum(axis=(1, 2))[:, :, None]

    potentials = DiscreteChainPotentials(log_init=log_init, log_trans=log_trans)
    state.discrete[a].update(potentials)
    return potentials


def update_leaf_switch_potentials(
    state: VariationalState, model: Model, i: NodeId
) -> DiscreteChainPotentials:
    """Mean field update of a leaf's switch chain, followed by forward-backward."""
    topology = model.topology
    params = model.leaf(i)
    log_init, log_trans = _own_table_terms(
        params.psi0, params.psi, _parent_singleton(state, topology, i)
    )
    initial, transition = switch_chain_evidence(i, params, state.continuous[i].stats)

    potentials = DiscreteChainPotentials(
        log_init=log_init + initial,
        log_trans=log_trans + transition[:, :, None],
    )
    state.discrete[i].update(potentials)
    return potentials


def update_leaf_continuous(
    state: VariationalState, model: Model, i: NodeId, obs: ObservationSet
) -> GaussianChainParams:
    """
    Backward recursion forming Q(x) for leaf i given its switch marginals,
    then the forward moment recursion.
    """
    params = model.leaf(i)
    precisions = _leaf_precisions(i, params)
    weights = state.discrete[i].stats.singleton
    num_steps = state.num_steps
    dim = params.A.shape[1]

    observed = obs.observed[i]
    C_prec = params.C.T @ precisions.R
    C_prec_C = C_prec @ params.C
    Q_prec_A = precisions.Q @ params.A
    A_Q_prec_A = np.swapaxes(params.A, -1, -2) @ Q_prec_A

    # Node and edge terms of the chain's log density
    J = np.empty((num_steps + 1, dim, dim))
    J[0] = np.einsum("j,jab->ab", weights[0], precisions.q0)
    J[1:] = np.einsum("tj,jab->tab", weights[1:], precisions.Q)
    J[:-1] += np.einsum("tj,jab->tab", weights[1:], A_Q_prec_A)
    J[observed] += C_prec_C

    h = np.zeros((num_steps + 1, dim))
    h[observed] = obs.y[i][observed] @ C_prec.T
    h[0] += np.einsum("j,jab,jb->a", weights[0], precisions.q0, params.mu0)

    L = np.einsum("tj,jab->tab", weights[1:], Q_prec_A)

    A_hat = np.empty((num_steps, dim, dim))
    B_hat = np.empty((num_steps, dim))
    Q_hat = np.empty((num_steps, dim, dim))
    look_ahead_precision = np.zeros((dim, dim))
    look_ahead_shift = np.zeros(dim)
    for t in range(num_steps, 0, -1):
        Q_hat[t - 1], _ = spd_inverse(
            J[t] - look_ahead_precision, f"precision of leaf {i} at t={t}"
        )
        A_hat[t - 1] = Q_hat[t - 1] @ L[t - 1]
        B_hat[t - 1] = Q_hat[t - 1] @ (h[t] + look_ahead_shift)
        look_ahead_precision = symmetrize(L[t - 1].T @ A_hat[t - 1])
        look_ahead_shift = L[t - 1].T @ B_hat[t - 1]

    q_init, _ = spd_inverse(J[0] - look_ahead_precision, f"precision of leaf {i} at t=0")
    mu_init = q_init @ (h[0] + look_ahead_shift)

    chain_params = GaussianChainParams(
        mu_init=mu_init, q_init=q_init, A_hat=A_hat, B_hat=B_hat, Q_hat=Q_hat
    )
    state.continuous[i].update(chain_params)
    return chain_params


def evidence_bound(model: Model, state: VariationalState, obs: ObservationSet) -> float:
    """B(Q, Theta) = E_Q[log P(S, X, Y)] + H[Q], assembled chain by chain."""
    if state.stale:
        raise StaleStatisticsError("chain statistics are stale, refresh before bounding")

    topology = model.topology
    total = 0.0
    for node_id in topology.preorder:
        params = model.params[node_id]
        stats = state.discrete[node_id].stats
        parent_singleton = _parent_singleton(state, topology, node_id)

        total += float(
            np.sum(
                expected_log_table(
                    stats.singleton[0][:, None] * parent_singleton[0][None, :],
                    params.initial_table,
                )
            )
        )
        if state.num_steps:
            total += float(
                np.sum(
                    expected_log_table(
                        stats.pairwise[:, :, :, None]
                        * parent_singleton[1:, None, None, :],
                        params.transition_table[None],
                    )
                )
            )
        total += stats.entropy

        if not isinstance(params, LeafParams):
            continue

        continuous = state.continuous[node_id].stats
        initial, transition = switch_chain_evidence(node_id, params, continuous)
        total += float(stats.singleton[0] @ initial)
        total += float(np.sum(stats.singleton[1:] * transition))

        precisions = _leaf_precisions(node_id, params)
        total += _expected_emission_loglik(
            params,
            precisions.R,
            precisions.R_logdet,
            continuous,
            obs.y[node_id],
            obs.observed[node_id],
        )
        total += continuous.entropy

    return total


def _prior_gaussian_chain(
    leaf_id: NodeId, params: LeafParams, weights: np.ndarray
) -> GaussianChainParams:
    """Prior dynamics averaged under the switch marginals, no evidence."""
    precisions = _leaf_precisions(leaf_id, params)
    q_init, _ = spd_inverse(
        np.einsum("j,jab->ab", weights[0], precisions.q0), f"prior precision of leaf {leaf_id}"
    )
    mu_init = q_init @ np.einsum("j,jab,jb->a", weights[0], precisions.q0, params.mu0)

    num_steps = len(weights) - 1
    dim = params.A.shape[1]
    A_hat = np.empty((num_steps, dim, dim))
    Q_hat = np.empty((num_steps, dim, dim))
    Q_prec_A = precisions.Q @ params.A
    for t in range(1, num_steps + 1):
        Q_hat[t - 1], _ = spd_inverse(
            np.einsum("j,jab->ab", weights[t], precisions.Q),
            f"prior precision of leaf {leaf_id} at t={t}",
        )
        A_hat[t - 1] = Q_hat[t - 1] @ np.einsum("j,jab->ab", weights[t], Q_prec_A)

    return GaussianChainParams(
        mu_init=mu_init,
        q_init=q_init,
        A_hat=A_hat,
        B_hat=np.zeros((num_steps, dim)),
        Q_hat=Q_hat,
    )


def init_variational(
    model: Model, obs: ObservationSet, seed: Seed, jitter: float = DEFAULT_JITTER
) -> VariationalState:
    """
    Discrete chains start from the model tables averaged over a uniform parent,
    multiplied by exp(u) with u uniform in [-jitter, jitter].
    """
    check_observations(model, obs)
    topology = model.topology
    num_steps = obs.num_steps
    rng = make_rng(seed)

    discrete = {}
    with np.errstate(divide="ignore"):
        for node_id in topology.preorder:
            params = model.params[node_id]
            k = topology.num_states(node_id)
            log_init = np.log(params.initial_table.mean(axis=-1)) + rng.uniform(
                -jitter, jitter, k
            )
            log_trans = np.log(params.transition_table.mean(axis=-1))[None] + rng.uniform(
                -jitter, jitter, (num_steps, k, k)
            )
            discrete[node_id] = DiscreteChain.create(
                DiscreteChainPotentials(log_init=log_init, log_trans=log_trans)
            )

    continuous = {
        leaf_id: GaussianChain.create(
            _prior_gaussian_chain(
                leaf_id, model.leaf(leaf_id), discrete[leaf_id].stats.singleton
            )
        )
        for leaf_id in topology.leaves
    }

    state = VariationalState(num_steps=num_steps, discrete=discrete, continuous=continuous)
    state.bound = evidence_bound(model, state, obs)
    return state


def run_sweep(
    state: VariationalState,
    model: Model,
    obs: ObservationSet,
    inner_iterations: int = DEFAULT_INNER_ITERATIONS,
):
    """Leaves first (continuous then switch), then aggregators deepest first."""
    topology = model.topology
    for leaf_id in topology.leaves:
        for _ in range(inner_iterations):
            update_leaf_continuous(state, model, leaf_id, obs)
            update_leaf_switch_potentials(state, model, leaf_id)
    for aggregator_id in topology.aggregators_deepest_first:
        update_aggregator_potentials(state, model, aggregator_id)


def fit_variational(
    model: Model,
    obs: ObservationSet,
    tol: float,
    max_sweeps: int,
    seed: Seed,
    state: VariationalState | None = None,
    inner_iterations: int = DEFAULT_INNER_ITERATIONS,
    jitter: float = DEFAULT_JITTER,
) -> Tuple[VariationalState, List[float]]:
    """
    Coordinate ascent on the bound until it improves by less than `tol`.
    A given `state` is warm-started instead of initialized.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")

    if state is None:
        state = init_variational(model, obs, seed, jitter)
    else:
        check_observations(model, obs)
        state.bound = evidence_bound(model, state, obs)

    trace = [state.bound]
    for sweep in range(1, max_sweeps + 1):
        run_sweep(state, model, obs, inner_iterations)
        bound = evidence_bound(model, state, obs)
        previous = trace[-1]
        if bound < previous - MONOTONICITY_SLACK * (1.0 + abs(previous)):
            raise MonotonicityError(
                f"mean-field monotonicity violated: bound {previous:.12g} -> {bound:.12g} "
                f"in sweep {sweep}"
            )
        state.bound = bound
        trace.append(bound)
        LOGGER.debug("Sweep %d bound %.9g (change %.3g)", sweep, bound, bound - previous)
        if np.isfinite(previous) and bound - previous < tol:
            break
    else:
        LOGGER.warning("Mean field stopped after max_sweeps=%d", max_sweeps)

    return state, trace
