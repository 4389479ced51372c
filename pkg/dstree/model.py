"""Generative parameters of a Dynamical Systems Tree."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np
from scipy.stats import multivariate_normal

from .const import LOGGER, NORMALIZATION_TOLERANCE
from .errors import CovarianceError, DocumentError, ShapeError
from .helpers import Seed, draw_categorical, make_rng
from .topology import NodeId, Topology, validate


@dataclass(frozen=True)
class AggregatorParams:
    phi0: np.ndarray
    """[K, K_parent], initial state given parent state"""
    phi: np.ndarray
    """[K, K, K_parent], state j given previous state k and parent state l"""

    @property
    def initial_table(self) -> np.ndarray:
        return self.phi0

    @property
    def transition_table(self) -> np.ndarray:
        return self.phi


@dataclass(frozen=True)
class LeafParams:
    psi0: np.ndarray
    psi: np.ndarray
    mu0: np.ndarray
    """[K, x_dim]"""
    q0: np.ndarray
    """[K, x_dim, x_dim]"""
    A: np.ndarray
    """[K, x_dim, x_dim]"""
    Q: np.ndarray
    """[K, x_dim, x_dim]"""
    C: np.ndarray
    """[y_dim, x_dim]"""
    R: np.ndarray
    """[y_dim, y_dim]"""

    @property
    def initial_table(self) -> np.ndarray:
        return self.psi0

    @property
    def transition_table(self) -> np.ndarray:
        return self.psi

    @property
    def num_switch_states(self) -> int:
        return self.psi0.shape[0]


NodeParams = AggregatorParams | LeafParams


@dataclass(frozen=True)
class Model:
    topology: Topology
    params: Mapping[NodeId, NodeParams]

    def leaf(self, node_id: NodeId) -> LeafParams:
        params = self.params[node_id]
        assert isinstance(params, LeafParams)
        return params


@dataclass
class HiddenAssignment:
    s: Dict[NodeId, np.ndarray]
    """Discrete states per node, length T+1"""
    x: Dict[NodeId, np.ndarray]
    """Continuous states per leaf, [T+1, x_dim]"""


@dataclass
class ObservationSet:
    y: Dict[NodeId, np.ndarray]
    """Emissions per leaf, [T+1, y_dim]"""
    observed: Dict[NodeId, np.ndarray] = field(default_factory=dict)
    """Missingness mask per leaf, True = observed; absent leaves are fully observed"""

    def __post_init__(self):
        self.y = {leaf_id: np.asarray(y, dtype=float) for leaf_id, y in self.y.items()}
        self.observed = {
            leaf_id: (
                np.asarray(self.observed[leaf_id], dtype=bool)
                if leaf_id in self.observed
                else np.ones(len(y), dtype=bool)
            )
            for leaf_id, y in self.y.items()
        }

        lengths = {len(y) for y in self.y.values()}
        lengths.update(len(mask) for mask in self.observed.values())
        if len(lengths) > 1:
            raise ShapeError(f"leaves have different sequence lengths {sorted(lengths)}")

    @property
    def num_steps(self) -> int:
        """T, the index of the last time step."""
        return len(next(iter(self.y.values()))) - 1


def check_observations(model: Model, obs: ObservationSet):
    """Raise ShapeError when observations do not fit the model."""
    topology = model.topology
    if set(obs.y) != set(topology.leaves):
        raise ShapeError(
            f"observations cover leaves {sorted(obs.y)}, model has {topology.leaves}"
        )
    for leaf_id in topology.leaves:
        y = obs.y[leaf_id]
        y_dim = topology[leaf_id].y_dim
        if y.ndim != 2 or y.shape[1] != y_dim:
            raise ShapeError(
                f"node {leaf_id} field y: expected [T+1, {y_dim}], got {list(y.shape)}"
            )


def _check_table(path: str, table: np.ndarray, shape: Tuple[int, ...]):
    if table.shape != shape:
        raise DocumentError(path, f"expected shape {list(shape)}, got {list(table.shape)}")
    if not np.all(np.isfinite(table)) or np.any(table < 0):
        raise DocumentError(path, "probabilities must be finite and nonnegative")
    sums = table.sum(axis=0)
    bad = np.argwhere(np.abs(sums - 1.0) > NORMALIZATION_TOLERANCE)
    if len(bad):
        index = ".".join(str(i) for i in bad[0])
        raise DocumentError(
            f"{path}.*.{index}",
            f"slice sums to {sums[tuple(bad[0])]:.12g}, expected 1",
        )


def _check_matrix(path: str, matrix: np.ndarray, shape: Tuple[int, ...]):
    if matrix.shape != shape:
        raise DocumentError(path, f"expected shape {list(shape)}, got {list(matrix.shape)}")
    if not np.all(np.isfinite(matrix)):
        raise DocumentError(path, "entries must be finite")


def _check_covariance(path: str, matrix: np.ndarray, dim: int):
    _check_matrix(path, matrix, (dim, dim))
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * (1 + np.abs(matrix).max())):
        raise DocumentError(path, "covariance is not symmetric")
    if np.linalg.eigvalsh(matrix)[0] <= 0:
        raise DocumentError(path, "covariance is not positive definite")


def check_model(model: Model):
    """Raise DocumentError naming the offending field when a Model invariant fails."""
    topology = model.topology
    if report := validate(topology):
        raise DocumentError("topology", "; ".join(str(v) for v in report))

    if set(model.params) != set(range(len(topology))):
        raise DocumentError("params", "expected parameters for every node")

    for node_id, node in enumerate(topology.nodes):
        params = model.params[node_id]
        path = f"params.{node_id}"
        k = node.num_switch_states
        k_parent = topology.parent_cardinality(node_id)

        if not node.is_leaf:
            if not isinstance(params, AggregatorParams):
                raise DocumentError(path, "aggregator node needs phi0/phi parameters")
            _check_table(f"{path}.phi0", params.phi0, (k, k_parent))
            _check_table(f"{path}.phi", params.phi, (k, k, k_parent))
            continue

        if not isinstance(params, LeafParams):
            raise DocumentError(path, "leaf node needs leaf parameters")
        x_dim, y_dim = node.x_dim, node.y_dim
        assert x_dim is not None and y_dim is not None
        _check_table(f"{path}.psi0", params.psi0, (k, k_parent))
        _check_table(f"{path}.psi", params.psi, (k, k, k_parent))
        _check_matrix(f"{path}.mu0", params.mu0, (k, x_dim))
        _check_matrix(f"{path}.A", params.A, (k, x_dim, x_dim))
        for name in ("q0", "Q"):
            stack = getattr(params, name)
            _check_matrix(f"{path}.{name}", stack, (k, x_dim, x_dim))
            for j in range(k):
                _check_covariance(f"{path}.{name}.{j}", stack[j], x_dim)
        _check_matrix(f"{path}.C", params.C, (y_dim, x_dim))
        _check_covariance(f"{path}.R", params.R, y_dim)


def _check_assignment(model: Model, assignment: HiddenAssignment, num_steps: int):
    topology = model.topology
    for node_id, node in enumerate(topology.nodes):
        s = assignment.s.get(node_id)
        if s is None or s.shape != (num_steps + 1,):
            raise ShapeError(f"node {node_id} field s: expected length {num_steps + 1}")
        if np.any(s < 0) or np.any(s >= node.num_switch_states):
            raise ShapeError(f"node {node_id} field s: state out of range")
        if node.is_leaf:
            x = assignment.x.get(node_id)
            if x is None or x.shape != (num_steps + 1, node.x_dim):
                raise ShapeError(
                    f"node {node_id} field x: expected [{num_steps + 1}, {node.x_dim}]"
                )


def complete_loglik(
    model: Model, assignment: HiddenAssignment, obs: ObservationSet
) -> float:
    """log P(S, X, Y) of a full assignment, masked emissions are skipped."""
    check_observations(model, obs)
    num_steps = obs.num_steps
    _check_assignment(model, assignment, num_steps)
    topology = model.topology

    total = 0.0
    with np.errstate(divide="ignore"):
        for node_id, node in enumerate(topology.nodes):
            params = model.params[node_id]
            s = assignment.s[node_id]
            parent = node.parent
            s_parent = (
                np.zeros(num_steps + 1, dtype=int)
                if parent is None
                else assignment.s[parent]
            )

            total += float(np.log(params.initial_table[s[0], s_parent[0]]))
            if num_steps > 0:
                total += float(
                    np.sum(np.log(params.transition_table[s[1:], s[:-1], s_parent[1:]]))
                )

            if not isinstance(params, LeafParams):
                continue

            x = assignment.x[node_id]
            total += multivariate_normal.logpdf(
                x[0], params.mu0[s[0]], params.q0[s[0]]
            )
            for t in range(1, num_steps + 1):
                j = s[t]
                total += multivariate_normal.logpdf(
                    x[t], params.A[j] @ x[t - 1], params.Q[j]
                )
            y = obs.y[node_id]
            for t in np.flatnonzero(obs.observed[node_id]):
                total += multivariate_normal.logpdf(y[t], params.C @ x[t], params.R)

    return float(total)


def _cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as err:
        raise CovarianceError(f"{what} is not positive definite") from err


def sample_sequence(
    model: Model, num_steps: int, seed: Seed
) -> tuple[HiddenAssignment, ObservationSet]:
    """
    Ancestral sampling: nodes top-down in preorder, each node forward in time.
    """
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")

    topology = model.topology
    rng = make_rng(seed)
    states: Dict[NodeId, np.ndarray] = {}
    xs: Dict[NodeId, np.ndarray] = {}
    ys: Dict[NodeId, np.ndarray] = {}

    for node_id in topology.preorder:
        node = topology[node_id]
        params = model.params[node_id]
        parent = node.parent
        s_parent = (
            np.zeros(num_steps + 1, dtype=int) if parent is None else states[parent]
        )

        s = np.zeros(num_steps + 1, dtype=int)
        s[0] = draw_categorical(rng, params.initial_table[:, s_parent[0]])
        for t in range(1, num_steps + 1):
            s[t] = draw_categorical(
                rng, params.transition_table[:, s[t - 1], s_parent[t]]
            )
        states[node_id] = s

        if not isinstance(params, LeafParams):
            continue

        k = params.num_switch_states
        q0_chol = [_cholesky(params.q0[j], f"node {node_id} q0 state {j}") for j in range(k)]
        Q_chol = [_cholesky(params.Q[j], f"node {node_id} Q state {j}") for j in range(k)]
        R_chol = _cholesky(params.R, f"node {node_id} R")

        x_noise = rng.standard_normal((num_steps + 1, params.A.shape[1]))
        y_noise = rng.standard_normal((num_steps + 1, params.C.shape[0]))

        x = np.zeros((num_steps + 1, params.A.shape[1]))
        x[0] = params.mu0[s[0]] + q0_chol[s[0]] @ x_noise[0]
        for t in range(1, num_steps + 1):
            j = s[t]
            x[t] = params.A[j] @ x[t - 1] + Q_chol[j] @ x_noise[t]
        xs[node_id] = x
        ys[node_id] = x @ params.C.T + y_noise @ R_chol.T

    LOGGER.debug("Sampled %d steps for %d nodes", num_steps + 1, len(topology))
    return HiddenAssignment(s=states, x=xs), ObservationSet(y=ys)


def offset_origin(obs: ObservationSet) -> ObservationSet:
    """Translate each leaf so its first observed point is the origin."""
    shifted = {}
    for leaf_id, y in obs.y.items():
        observed = np.flatnonzero(obs.observed[leaf_id])
        shifted[leaf_id] = y - y[observed[0]] if len(observed) else y.copy()
        shifted[leaf_id][~obs.observed[leaf_id]] = 0.0
    return ObservationSet(
        y=shifted, observed={k: v.copy() for k, v in obs.observed.items()}
    )
