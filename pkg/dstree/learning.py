"""Variational EM for Dynamical Systems Trees."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import voluptuous as vol  # type: ignore

from .const import (
    DEFAULT_COVARIANCE_FLOOR,
    DEFAULT_E_TOL,
    DEFAULT_EM_TOL,
    DEFAULT_ETA_GROW,
    DEFAULT_ETA_INIT,
    DEFAULT_ETA_SHRINK,
    DEFAULT_INNER_ITERATIONS,
    DEFAULT_JITTER,
    DEFAULT_MAX_EM_ITERS,
    DEFAULT_MAX_SWEEPS,
    DEFAULT_SEED,
    INIT_EMISSION_NOISE_FRACTION,
    INIT_TABLE_JITTER,
    LOGGER,
    MIN_STATE_WEIGHT,
    MONOTONICITY_SLACK,
)
from .errors import (
    DstError,
    InitializationError,
    MonotonicityError,
    NumericalError,
    SingularRegressionError,
    UsageError,
)
from .helpers import Seed, floor_eigenvalues, make_rng, spd_inverse, symmetrize
from .inference import VariationalState, fit_variational
from .model import (
    AggregatorParams,
    LeafParams,
    Model,
    NodeParams,
    ObservationSet,
    check_observations,
)
from .topology import NodeId, Topology

POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))

EM_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required("e_tol"): POSITIVE,
        vol.Required("em_tol"): POSITIVE,
        vol.Required("max_em_iters"): vol.All(int, vol.Range(min=0)),
        vol.Required("max_sweeps"): vol.All(int, vol.Range(min=1)),
        vol.Required("overrelax"): bool,
        vol.Required("eta_init"): vol.All(vol.Coerce(float), vol.Range(min=1)),
        vol.Required("eta_grow"): vol.All(
            vol.Coerce(float), vol.Range(min=1, min_included=False)
        ),
        vol.Required("eta_shrink"): vol.All(
            vol.Coerce(float),
            vol.Range(min=0, max=1, min_included=False, max_included=False),
        ),
        vol.Required("seed"): vol.All(int, vol.Range(min=0)),
        vol.Required("covariance_floor"): POSITIVE,
        vol.Required("inner_iterations"): vol.All(int, vol.Range(min=1)),
        vol.Required("jitter"): vol.All(vol.Coerce(float), vol.Range(min=0)),
    }
)


@dataclass(frozen=True)
class EmConfig:
    e_tol: float = DEFAULT_E_TOL
    """Mean field stopping tolerance"""
    em_tol: float = DEFAULT_EM_TOL
    """Relative bound improvement below which EM stops"""
    max_em_iters: int = DEFAULT_MAX_EM_ITERS
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    overrelax: bool = False
    eta_init: float = DEFAULT_ETA_INIT
    eta_grow: float = DEFAULT_ETA_GROW
    eta_shrink: float = DEFAULT_ETA_SHRINK
    seed: int = DEFAULT_SEED
    covariance_floor: float = DEFAULT_COVARIANCE_FLOOR
    """Relative to the mean observed data variance"""
    inner_iterations: int = DEFAULT_INNER_ITERATIONS
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        try:
            EM_CONFIG_SCHEMA(asdict(self))
        except vol.Invalid as err:
            name = ".".join(str(part) for part in err.path)
            raise UsageError(f"invalid setting {name}: {err.msg}") from err


@dataclass
class Dataset:
    sequences: List[ObservationSet]

    def __len__(self) -> int:
        return len(self.sequences)

    def check(self, model: Model):
        if not self.sequences:
            raise InitializationError("dataset has no sequences")
        for obs in self.sequences:
            check_observations(model, obs)

    def without(self, index: int) -> Dataset:
        return Dataset([obs for i, obs in enumerate(self.sequences) if i != index])


@dataclass
class FitReport:
    bound_per_iter: List[float] = field(default_factory=list)
    """Bound summed over sequences after each EM iteration"""
    iters_run: int = 0
    converged: bool = False
    eta_trace: List[float] = field(default_factory=list)
    overrelaxed_accepted: int = 0
    """Iterations that took the over-relaxed candidate instead of the plain EM step"""


@dataclass
class ClassificationResult:
    label: int
    scores: List[float]
    tie: bool = False
    errors: Dict[int, str] = field(default_factory=dict)
    """Failure message per model index, that model scored -inf"""


def _observed_rows(data: Dataset, leaf_id: NodeId) -> List[np.ndarray]:
    return [obs.y[leaf_id][obs.observed[leaf_id]] for obs in data.sequences]


def mean_data_variance(data: Dataset, topology: Topology) -> float:
    """Average per dimension variance of the observed emissions over all leaves."""
    variances = []
    for leaf_id in topology.leaves:
        rows = np.concatenate(_observed_rows(data, leaf_id))
        if len(rows):
            variances.append(float(np.var(rows, axis=0).mean()))
    return float(np.mean(variances)) if variances else 0.0


def _random_table(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    table = np.exp(rng.uniform(-INIT_TABLE_JITTER, INIT_TABLE_JITTER, shape))
    return table / table.sum(axis=0, keepdims=True)


def _proxy_projection(leaf_id: NodeId, rows: np.ndarray, x_dim: int) -> np.ndarray:
    """[y_dim, x_dim] map from emissions to the proxy continuous state."""
    y_dim = rows.shape[1]
    if x_dim > y_dim:
        raise InitializationError(
            f"node {leaf_id}: x_dim {x_dim} > y_dim {y_dim}, can not build a proxy state"
        )
    if x_dim == y_dim:
        return np.eye(y_dim)
    centered = rows - rows.mean(axis=0)
    _, eigenvectors = np.linalg.eigh(centered.T @ centered / len(rows))
    return eigenvectors[:, ::-1][:, :x_dim]


def _initialize_leaf(
    leaf_id: NodeId,
    node_k: int,
    x_dim: int,
    data: Dataset,
    floor: float,
    emission_floor: float,
) -> Dict[str, np.ndarray]:
    # Observed points in concatenation order with (sequence, step) for pairing
    points, positions = [], []
    for seq_index, obs in enumerate(data.sequences):
        steps = np.flatnonzero(obs.observed[leaf_id])
        points.append(obs.y[leaf_id][steps])
        positions.extend((seq_index, int(t)) for t in steps)
    rows = np.concatenate(points)
    if len(rows) < node_k:
        raise InitializationError(
            f"node {leaf_id}: {len(rows)} observed steps for {node_k} switch states"
        )

    V = _proxy_projection(leaf_id, rows, x_dim)
    proxy = rows @ V
    if np.all(np.var(proxy, axis=0) == 0):
        raise InitializationError(f"node {leaf_id}: degenerate regression, zero-variance data")

    mu0, q0, A, Q = [], [], [], []
    for j, chunk in enumerate(np.array_split(np.arange(len(rows)), node_k)):
        pairs = [
            (a, b)
            for a, b in zip(chunk[:-1], chunk[1:])
            if positions[a][0] == positions[b][0] and positions[b][1] == positions[a][1] + 1
        ]
        if len(pairs) < x_dim + 1:
            raise InitializationError(
                f"node {leaf_id} subset {j}: {len(pairs)} transitions, "
                f"need at least {x_dim + 1}"
            )
        previous = proxy[[a for a, _ in pairs]]
        current = proxy[[b for _, b in pairs]]
        solution, _, rank, _ = np.linalg.lstsq(previous, current, rcond=None)
        if rank < x_dim:
            raise InitializationError(
                f"node {leaf_id} subset {j}: degenerate regression (rank {rank})"
            )
        residual = current - previous @ solution
        A.append(solution.T)
        Q.append(floor_eigenvalues(residual.T @ residual / len(pairs), floor))
        mu0.append(proxy[chunk].mean(axis=0))
        centered = proxy[chunk] - mu0[-1]
        q0.append(floor_eigenvalues(centered.T @ centered / len(chunk), floor))

    emission_residual = rows - proxy @ V.T
    R = floor_eigenvalues(
        emission_residual.T @ emission_residual / len(rows), emission_floor
    )
    return {
        "mu0": np.array(mu0),
        "q0": np.array(q0),
        "A": np.array(A),
        "Q": np.array(Q),
        "C": V.copy(),
        "R": R,
    }


def initialize_params(topology: Topology, data: Dataset, seed: Seed) -> Model:
    """
    Tables: uniform perturbed by exp(u), u uniform in [-0.05, 0.05].
    Leaf dynamics: one lag-1 regression per switch state on contiguous subsets
    of a proxy state obtained by projecting the emissions.
    """
    if not data.sequences:
        raise InitializationError("dataset has no sequences")
    rng = make_rng(seed)
    variance = mean_data_variance(data, topology)
    if variance <= 0:
        raise InitializationError("degenerate regression: observed data has zero variance")

    params: Dict[NodeId, NodeParams] = {}
    for node_id in topology.preorder:
        node = topology[node_id]
        k, k_parent = node.num_switch_states, topology.parent_cardinality(node_id)
        initial = _random_table(rng, (k, k_parent))
        transition = _random_table(rng, (k, k, k_parent))
        if not node.is_leaf:
            params[node_id] = AggregatorParams(phi0=initial, phi=transition)
            continue
        assert node.x_dim is not None
        dynamics = _initialize_leaf(
            node_id,
            k,
            node.x_dim,
            data,
            DEFAULT_COVARIANCE_FLOOR * variance,
            INIT_EMISSION_NOISE_FRACTION * variance,
        )
        params[node_id] = LeafParams(psi0=initial, psi=transition, **dynamics)

    LOGGER.debug("Initialized %d nodes from %d sequences", len(topology), len(data))
    return Model(topology=topology, params=dict(sorted(params.items())))


def _parent_singleton(state: VariationalState, topology: Topology, node_id: NodeId):
    parent = topology[node_id].parent
    if parent is None:
        return np.ones((state.num_steps + 1, 1))
    return state.discrete[parent].stats.singleton


def _normalized(counts: np.ndarray, previous: np.ndarray) -> np.ndarray:
    """Normalize over the first axis, columns without weight keep their old values."""
    total = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        table = counts / total
    return np.where(total > 0, table, previous)


def _regression_inverse(matrix: np.ndarray, what: str) -> np.ndarray:
    inverse, _ = spd_inverse(matrix, what, SingularRegressionError)
    return inverse


def _leaf_update(
    leaf_id: NodeId,
    params: LeafParams,
    states: Sequence[VariationalState],
    data: Dataset,
    floor: float,
) -> Dict[str, np.ndarray]:
    k = params.num_switch_states
    x_dim = params.A.shape[1]
    y_dim = params.C.shape[0]

    init_weight = np.zeros(k)
    init_mean = np.zeros((k, x_dim))
    init_second = np.zeros((k, x_dim, x_dim))
    trans_weight = np.zeros(k)
    sum_prev = np.zeros((k, x_dim, x_dim))
    sum_cross = np.zeros((k, x_dim, x_dim))
    sum_curr = np.zeros((k, x_dim, x_dim))
    emission_count = 0
    sum_yy = np.zeros((y_dim, y_dim))
    sum_yx = np.zeros((y_dim, x_dim))
    sum_xx = np.zeros((x_dim, x_dim))

    for state, obs in zip(states, data.sequences):
        w = state.discrete[leaf_id].stats.singleton
        moments = state.continuous[leaf_id].stats
        init_weight += w[0]
        init_mean += np.outer(w[0], moments.mean[0])
        init_second += w[0][:, None, None] * moments.second[0]
        trans_weight += w[1:].sum(axis=0)
        sum_prev += np.einsum("tj,tab->jab", w[1:], moments.second[:-1])
        sum_cross += np.einsum("tj,tab->jab", w[1:], moments.cross)
        sum_curr += np.einsum("tj,tab->jab", w[1:], moments.second[1:])

        observed = obs.observed[leaf_id]
        y = obs.y[leaf_id][observed]
        emission_count += len(y)
        sum_yy += y.T @ y
        sum_yx += y.T @ moments.mean[observed]
        sum_xx += moments.second[observed].sum(axis=0)

    mu0, q0 = params.mu0.copy(), params.q0.copy()
    A, Q = params.A.copy(), params.Q.copy()
    for j in range(k):
        if init_weight[j] < MIN_STATE_WEIGHT:
            LOGGER.warning(
                "Node %d switch state %d has no initial weight, keeping mu0/q0", leaf_id, j
            )
        else:
            mu0[j] = init_mean[j] / init_weight[j]
            q0[j] = floor_eigenvalues(
                init_second[j] / init_weight[j] - np.outer(mu0[j], mu0[j]), floor
            )

        if trans_weight[j] < MIN_STATE_WEIGHT:
            LOGGER.warning(
                "Node %d switch state %d has no transition weight, keeping A/Q", leaf_id, j
            )
            continue
        A[j] = sum_cross[j] @ _regression_inverse(
            sum_prev[j], f"node {leaf_id} state {j} dynamics normal matrix"
        )
        cross_A = sum_cross[j] @ A[j].T
        Q[j] = floor_eigenvalues(
            (sum_curr[j] - cross_A - cross_A.T + A[j] @ sum_prev[j] @ A[j].T)
            / trans_weight[j],
            floor,
        )

    C, R = params.C.copy(), params.R.copy()
    if emission_count:
        C = sum_yx @ _regression_inverse(sum_xx, f"node {leaf_id} emission normal matrix")
        yx_C = sum_yx @ C.T
        R = floor_eigenvalues(
            (sum_yy - yx_C - yx_C.T + C @ sum_xx @ C.T) / emission_count, floor
        )

    return {"mu0": mu0, "q0": q0, "A": A, "Q": symmetrize(Q), "C": C, "R": R}


def m_step(
    model: Model,
    stats_per_sequence: Sequence[VariationalState],
    data: Dataset,
    floor: float,
) -> Model:
    """Closed form maximizers of the expected complete log likelihood, summed over sequences."""
    topology = model.topology
    params: Dict[NodeId, NodeParams] = {}
    for node_id in range(len(topology)):
        old = model.params[node_id]
        k, k_parent = topology.num_states(node_id), topology.parent_cardinality(node_id)
        init_counts = np.zeros((k, k_parent))
        trans_counts = np.zeros((k, k, k_parent))
        for state in stats_per_sequence:
            stats = state.discrete[node_id].stats
            parent = _parent_singleton(state, topology, node_id)
            init_counts += np.outer(stats.singleton[0], parent[0])
            trans_counts += np.einsum("tjk,tl->jkl", stats.pairwise, parent[1:])

        initial = _normalized(init_counts, old.initial_table)
        transition = _normalized(trans_counts, old.transition_table)
        if isinstance(old, AggregatorParams):
            params[node_id] = AggregatorParams(phi0=initial, phi=transition)
        else:
            params[node_id] = LeafParams(
                psi0=initial,
                psi=transition,
                **_leaf_update(node_id, old, stats_per_sequence, data, floor),
            )
    return Model(topology=topology, params=params)


def overrelaxed_update(
    prev: Model, proposed: Model, eta: float, floor: float = DEFAULT_COVARIANCE_FLOOR
) -> Model:
    """
    prev + eta * (proposed - prev): tables in the log domain and renormalized,
    matrices directly, covariances directly and then eigenvalue floored.
    """
    if eta < 1:
        raise ValueError("eta must be >= 1")

    def blend_table(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        positive = (old > 0) & (new > 0)
        with np.errstate(divide="ignore"):
            log_old, log_new = np.log(old), np.log(new)
        log_table = np.where(positive, log_old + eta * (log_new - log_old), log_new)
        shift = np.max(np.where(np.isfinite(log_table), log_table, -np.inf), axis=0)
        table = np.exp(log_table - shift)
        return table / table.sum(axis=0, keepdims=True)

    def blend(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        return old + eta * (new - old)

    def blend_covariance(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        return floor_eigenvalues(blend(old, new), floor)

    params: Dict[NodeId, NodeParams] = {}
    for node_id, old in prev.params.items():
        new = proposed.params[node_id]
        if isinstance(old, AggregatorParams):
            assert isinstance(new, AggregatorParams)
            params[node_id] = AggregatorParams(
                phi0=blend_table(old.phi0, new.phi0), phi=blend_table(old.phi, new.phi)
            )
            continue
        assert isinstance(new, LeafParams)
        params[node_id] = LeafParams(
            psi0=blend_table(old.psi0, new.psi0),
            psi=blend_table(old.psi, new.psi),
            mu0=blend(old.mu0, new.mu0),
            q0=blend_covariance(old.q0, new.q0),
            A=blend(old.A, new.A),
            Q=blend_covariance(old.Q, new.Q),
            C=blend(old.C, new.C),
            R=blend_covariance(old.R, new.R),
        )
    return Model(topology=prev.topology, params=params)


def _e_step(
    model: Model,
    data: Dataset,
    config: EmConfig,
    states: Sequence[VariationalState | None],
) -> Tuple[List[VariationalState], float]:
    fitted = []
    for index, (obs, state) in enumerate(zip(data.sequences, states)):
        state, _ = fit_variational(
            model,
            obs,
            config.e_tol,
            config.max_sweeps,
            (config.seed, index),
            state=state,
            inner_iterations=config.inner_iterations,
            jitter=config.jitter,
        )
        fitted.append(state)
    return fitted, float(sum(state.bound for state in fitted))


def em_fit(model: Model, data: Dataset, config: EmConfig) -> Tuple[Model, FitReport]:
    """Alternate mean field E-steps and M-steps until the relative improvement is below em_tol."""
    data.check(model)
    report = FitReport()
    if config.max_em_iters == 0:
        return model, report

    floor = config.covariance_floor * (mean_data_variance(data, model.topology) or 1.0)
    states, bound = _e_step(model, data, config, [None] * len(data))
    LOGGER.debug("EM start bound %.9g", bound)
    eta = config.eta_init

    for iteration in range(1, config.max_em_iters + 1):
        proposed = m_step(model, states, data, floor)
        if config.overrelax:
            proposed_states, proposed_bound = _e_step(
                proposed, data, config, copy.deepcopy(states)
            )
            report.eta_trace.append(eta)
            if eta > 1:
                candidate = overrelaxed_update(model, proposed, eta, floor)
                candidate_states: List[VariationalState] = []
                try:
                    candidate_states, candidate_bound = _e_step(
                        candidate, data, config, copy.deepcopy(states)
                    )
                except NumericalError as err:
                    LOGGER.debug("Over-relaxed candidate failed: %s", err)
                    candidate_bound = -np.inf
                if candidate_bound >= proposed_bound:
                    proposed, proposed_states, proposed_bound = (
                        candidate,
                        candidate_states,
                        candidate_bound,
                    )
                    report.overrelaxed_accepted += 1
                    eta *= config.eta_grow
                else:
                    LOGGER.warning(
                        "Rejected over-relaxed step with eta %.3g, falling back", eta
                    )
                    eta = max(1.0, eta * config.eta_shrink)
            else:
                eta *= config.eta_grow
            LOGGER.debug("Step size eta is now %.3g", eta)
        else:
            proposed_states, proposed_bound = _e_step(proposed, data, config, states)

        if proposed_bound < bound - MONOTONICITY_SLACK * (1.0 + abs(bound)):
            raise MonotonicityError(
                f"EM monotonicity violated: bound {bound:.12g} -> {proposed_bound:.12g} "
                f"in iteration {iteration}"
            )

        improvement = proposed_bound - bound
        model, states, bound = proposed, proposed_states, proposed_bound
        report.bound_per_iter.append(bound)
        report.iters_run = iteration
        LOGGER.debug("EM iteration %d bound %.9g", iteration, bound)
        if improvement < config.em_tol * abs(bound):
            report.converged = True
            break
    else:
        LOGGER.warning("EM reached max_em_iters=%d without converging", config.max_em_iters)

    LOGGER.info(
        "EM finished after %d iterations, bound %.9g", report.iters_run, bound
    )
    return model, report


def classify(
    models: Sequence[Model], obs: ObservationSet, config: EmConfig
) -> ClassificationResult:
    """Label is the model with the largest converged bound, ties go to the lowest index."""
    if not models:
        raise ValueError("no models to classify with")

    scores: List[float] = []
    errors: Dict[int, str] = {}
    for index, model in enumerate(models):
        try:
            state, _ = fit_variational(
                model,
                obs,
                config.e_tol,
                config.max_sweeps,
                config.seed,
                inner_iterations=config.inner_iterations,
                jitter=config.jitter,
            )
        except DstError as err:
            LOGGER.warning("Model %d failed to score: %s", index, err)
            errors[index] = f"{type(err).__name__}: {err}"
            scores.append(-np.inf)
            continue
        scores.append(state.bound)

    best = max(scores)
    if not np.isfinite(best):
        raise NumericalError("no model produced a finite score")
    winners = [index for index, score in enumerate(scores) if score == best]
    return ClassificationResult(
        label=winners[0], scores=scores, tie=len(winners) > 1, errors=errors
    )


def train(topology: Topology, data: Dataset, config: EmConfig) -> Tuple[Model, FitReport]:
    """initialize_params followed by em_fit."""
    return em_fit(initialize_params(topology, data, config.seed), data, config)


def leave_one_out(
    topology: Topology, datasets: Sequence[Dataset], config: EmConfig
) -> List[List[int]]:
    """
    Hold out each sequence of each class in turn, train one model per class on
    the rest and classify the held out sequence. Returns labels per class.
    """
    full_models = [train(topology, dataset, config)[0] for dataset in datasets]
    labels: List[List[int]] = []
    for class_index, dataset in enumerate(datasets):
        class_labels = []
        for held_out in range(len(dataset)):
            models = list(full_models)
            models[class_index], _ = train(topology, dataset.without(held_out), config)
            result = classify(models, dataset.sequences[held_out], config)
            class_labels.append(result.label)
        labels.append(class_labels)
        LOGGER.info(
            "Class %d: %d of %d held out sequences labeled correctly",
            class_index,
            class_labels.count(class_index),
            len(class_labels),
        )
    return labels
