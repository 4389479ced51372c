from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from dstree.errors import InitializationError, UsageError
from dstree.inference import evidence_bound, fit_variational, init_variational
from dstree.learning import (
    Dataset,
    EmConfig,
    classify,
    em_fit,
    initialize_params,
    leave_one_out,
    m_step,
    overrelaxed_update,
    train,
)
from dstree.model import (
    AggregatorParams,
    LeafParams,
    Model,
    ObservationSet,
    check_model,
    sample_sequence,
)

from tests.conftest import (
    create_lds_model,
    create_random_model,
    single_leaf_topology,
    three_level_topology,
    two_level_topology,
)

FAST = EmConfig(e_tol=1e-8, max_sweeps=100, em_tol=1e-12, max_em_iters=20)


def sampled_dataset(model: Model, count: int, num_steps: int, seed: int = 0) -> Dataset:
    return Dataset(
        [sample_sequence(model, num_steps, (seed, index))[1] for index in range(count)]
    )


def uniform_tables(model: Model) -> Model:
    params = {}
    for node_id, p in model.params.items():
        if isinstance(p, AggregatorParams):
            params[node_id] = AggregatorParams(
                phi0=np.full_like(p.phi0, 1 / len(p.phi0)),
                phi=np.full_like(p.phi, 1 / len(p.phi)),
            )
        else:
            params[node_id] = replace(
                p,
                psi0=np.full_like(p.psi0, 1 / len(p.psi0)),
                psi=np.full_like(p.psi, 1 / len(p.psi)),
            )
    return Model(topology=model.topology, params=params)


def test_initial_tables_are_perturbed_uniform(rng):
    topology = three_level_topology()
    data = sampled_dataset(create_random_model(topology, rng), 2, 30)

    model = initialize_params(topology, data, seed=3)

    for params in model.params.values():
        for table in (params.initial_table, params.transition_table):
            assert np.allclose(table.sum(axis=0), 1.0, atol=1e-12)
            ratio = table.max(axis=0) / table.min(axis=0)
            assert np.all(ratio <= np.exp(0.1) + 1e-12)


def test_initialization_is_deterministic(rng):
    topology = two_level_topology()
    data = sampled_dataset(create_random_model(topology, rng), 2, 30)

    first = initialize_params(topology, data, seed=3)
    second = initialize_params(topology, data, seed=3)

    for node_id, params in first.params.items():
        for name, value in vars(params).items():
            assert np.array_equal(getattr(second.params[node_id], name), value)


def test_initialization_recovers_dynamics():
    model = create_lds_model(A=0.8, Q=1.0, R=0.01)
    data = sampled_dataset(model, 1, 2000, seed=4)

    initial = initialize_params(single_leaf_topology(), data, seed=0)

    assert initial.leaf(0).A[0, 0, 0] == pytest.approx(0.8, abs=0.1)


def test_initialization_with_projection(rng):
    topology = single_leaf_topology(k=2, x_dim=1, y_dim=3)
    data = sampled_dataset(create_random_model(topology, rng), 3, 40)

    model = initialize_params(topology, data, seed=0)

    leaf = model.leaf(0)
    assert leaf.C.shape == (3, 1)
    assert np.linalg.norm(leaf.C) == pytest.approx(1.0)
    assert np.linalg.eigvalsh(leaf.R)[0] > 0


def test_projection_follows_variance_not_offset(rng):
    num_rows = 200
    y = np.column_stack(
        [50.0 + 0.01 * rng.normal(size=num_rows), 3.0 * rng.normal(size=num_rows)]
    )
    data = Dataset([ObservationSet(y={0: y})])

    model = initialize_params(single_leaf_topology(k=1, x_dim=1, y_dim=2), data, seed=0)

    C = model.leaf(0).C[:, 0]
    assert abs(C[1]) == pytest.approx(1.0, abs=1e-3)
    assert abs(C[0]) < 0.05


def test_constant_data_is_degenerate():
    data = Dataset([ObservationSet(y={0: np.full((20, 1), 3.0)})])

    with pytest.raises(InitializationError, match="degenerate"):
        initialize_params(single_leaf_topology(), data, seed=0)


def test_state_dimension_above_emission_dimension(rng):
    data = Dataset([ObservationSet(y={0: rng.normal(size=(20, 1))})])

    with pytest.raises(InitializationError, match="x_dim 2 > y_dim 1"):
        initialize_params(single_leaf_topology(x_dim=2, y_dim=1), data, seed=0)


def test_subset_too_short(rng):
    data = Dataset([ObservationSet(y={0: rng.normal(size=(3, 1))})])

    with pytest.raises(InitializationError, match="need at least 2"):
        initialize_params(single_leaf_topology(k=2), data, seed=0)


def test_m_step_recovers_dynamics():
    model = create_lds_model(A=0.8, Q=1.0, R=0.5)
    data = sampled_dataset(model, 1, 5000, seed=9)
    state, _ = fit_variational(model, data.sequences[0], tol=1e-8, max_sweeps=5, seed=0)

    updated = m_step(model, [state], data, floor=1e-6)

    assert updated.leaf(0).A[0, 0, 0] == pytest.approx(0.8, abs=0.05)


def test_m_step_uniform_statistics(rng):
    topology = two_level_topology()
    model = uniform_tables(create_random_model(topology, rng))
    data = sampled_dataset(model, 1, 6)
    state = init_variational(model, data.sequences[0], seed=0, jitter=0.0)

    updated = m_step(model, [state], data, floor=1e-6)

    for params in updated.params.values():
        assert np.allclose(params.transition_table, 0.5, atol=1e-12)


def test_m_step_does_not_lower_the_bound(rng):
    topology = two_level_topology()
    model = create_random_model(topology, rng)
    data = sampled_dataset(model, 3, 10)
    states = [
        fit_variational(model, obs, tol=1e-9, max_sweeps=200, seed=i)[0]
        for i, obs in enumerate(data.sequences)
    ]

    updated = m_step(model, states, data, floor=1e-9)

    for state, obs in zip(states, data.sequences):
        before = state.bound
        assert evidence_bound(updated, state, obs) >= before - 1e-9


def test_m_step_keeps_unused_states(rng, caplog):
    topology = single_leaf_topology(k=2)
    model = create_random_model(topology, rng)
    leaf = model.leaf(0)
    # State 1 can never be entered
    model = Model(
        topology=topology,
        params={
            0: replace(
                leaf,
                psi0=np.array([[1.0], [0.0]]),
                psi=np.stack([np.array([[1.0, 1.0], [0.0, 0.0]])], axis=-1),
            )
        },
    )
    data = sampled_dataset(model, 1, 8)
    state, _ = fit_variational(model, data.sequences[0], tol=1e-9, max_sweeps=20, seed=0)

    updated = m_step(model, [state], data, floor=1e-6)

    assert np.array_equal(updated.leaf(0).A[1], leaf.A[1])
    assert np.array_equal(updated.leaf(0).Q[1], leaf.Q[1])
    assert "keeping A/Q" in caplog.text


def test_m_step_floors_covariances(rng):
    model = create_lds_model(A=0.5, Q=1.0, R=1.0)
    data = sampled_dataset(model, 1, 30)
    state, _ = fit_variational(model, data.sequences[0], tol=1e-8, max_sweeps=5, seed=0)

    updated = m_step(model, [state], data, floor=10.0)

    leaf = updated.leaf(0)
    for covariance in (leaf.q0[0], leaf.Q[0], leaf.R):
        assert np.linalg.eigvalsh(covariance)[0] >= 10.0 - 1e-9


def test_em_with_zero_iterations(rng):
    model = create_random_model(two_level_topology(), rng)
    data = sampled_dataset(model, 2, 5)

    fitted, report = em_fit(model, data, replace(FAST, max_em_iters=0))

    assert fitted is model
    assert report.bound_per_iter == []
    assert report.iters_run == 0


def test_em_is_monotone(rng):
    topologies = [two_level_topology(), three_level_topology(), single_leaf_topology(k=2)]
    for index in range(10):
        topology = topologies[index % 3]
        truth = create_random_model(topology, rng)
        data = sampled_dataset(truth, 2, 10, seed=index)
        start = create_random_model(topology, rng)

        _, report = em_fit(start, data, replace(FAST, seed=index))

        trace = np.array(report.bound_per_iter)
        assert len(trace) == report.iters_run
        assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))


def test_em_improves_on_initialization(rng):
    topology = two_level_topology()
    data = sampled_dataset(create_random_model(topology, rng), 5, 30)
    config = EmConfig(e_tol=1e-6, max_sweeps=50, em_tol=1e-6, max_em_iters=4)
    initial = initialize_params(topology, data, seed=config.seed)
    initial_bound = sum(
        fit_variational(initial, obs, config.e_tol, config.max_sweeps, (config.seed, i))[0].bound
        for i, obs in enumerate(data.sequences)
    )

    _, report = em_fit(initial, data, config)

    assert report.bound_per_iter[-1] > initial_bound


def test_em_with_overrelaxation(rng):
    topology = two_level_topology()
    data = sampled_dataset(create_random_model(topology, rng), 3, 15)
    start = create_random_model(topology, rng)
    config = replace(FAST, overrelax=True, eta_init=1.5, max_em_iters=8)

    _, report = em_fit(start, data, config)

    trace = np.array(report.bound_per_iter)
    assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))
    assert len(report.eta_trace) == report.iters_run
    assert report.eta_trace[0] == 1.5
    assert min(report.eta_trace) >= 1.0


def test_overrelaxed_identity_step(rng):
    topology = two_level_topology()
    prev = create_random_model(topology, rng)
    proposed = create_random_model(topology, rng)

    candidate = overrelaxed_update(prev, proposed, 1.0, floor=1e-9)

    for node_id, params in proposed.params.items():
        for name, value in vars(params).items():
            assert getattr(candidate.params[node_id], name).shape == value.shape
            assert np.allclose(
                getattr(candidate.params[node_id], name), value, rtol=0, atol=1e-12
            )


def test_overrelaxed_zero_step(rng):
    model = create_random_model(two_level_topology(), rng)

    candidate = overrelaxed_update(model, model, 2.5, floor=1e-9)

    for node_id, params in model.params.items():
        for name, value in vars(params).items():
            assert getattr(candidate.params[node_id], name).shape == value.shape
            assert np.allclose(
                getattr(candidate.params[node_id], name), value, rtol=0, atol=1e-12
            )


def test_overrelaxed_tables_stay_normalized(rng):
    topology = two_level_topology()
    prev = create_random_model(topology, rng)
    proposed = create_random_model(topology, rng)
    phi = proposed.params[0].phi.copy()
    phi[:, 0, 0] = [1.0, 0.0]
    proposed = Model(
        topology=topology,
        params={**proposed.params, 0: replace(proposed.params[0], phi=phi)},
    )

    candidate = overrelaxed_update(prev, proposed, 3.0, floor=1e-6)

    for params in candidate.params.values():
        assert np.allclose(params.transition_table.sum(axis=0), 1.0, atol=1e-12)
    assert candidate.params[0].phi[1, 0, 0] == 0.0
    for leaf_id in topology.leaves:
        assert np.linalg.eigvalsh(candidate.leaf(leaf_id).R)[0] >= 1e-6 - 1e-12


def test_overrelaxed_candidate_is_a_valid_model(rng):
    topology = three_level_topology()
    prev = create_random_model(topology, rng)
    proposed = create_random_model(topology, rng)

    candidate = overrelaxed_update(prev, proposed, 1.7, floor=1e-6)

    check_model(candidate)
    for leaf_id in topology.leaves:
        for name in ("q0", "Q", "R"):
            value = getattr(candidate.leaf(leaf_id), name)
            assert value.shape == getattr(proposed.leaf(leaf_id), name).shape
            assert np.all(np.linalg.eigvalsh(value) >= 1e-6 - 1e-12)


def test_overrelaxation_is_no_worse_than_plain_em(rng):
    topologies = [two_level_topology(), three_level_topology(), single_leaf_topology(k=2)]
    accepted = 0
    for index in range(10):
        topology = topologies[index % 3]
        data = sampled_dataset(create_random_model(topology, rng), 2, 10, seed=index)
        start = create_random_model(topology, rng)
        config = replace(FAST, seed=index)

        _, plain = em_fit(start, data, config)
        _, relaxed = em_fit(start, data, replace(config, overrelax=True))

        trace = np.array(relaxed.bound_per_iter)
        assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace[:-1]))
        assert relaxed.bound_per_iter[-1] >= plain.bound_per_iter[-1] - 1e-3
        accepted += relaxed.overrelaxed_accepted

    assert accepted > 0


def test_overrelaxed_step_size_must_not_shrink(rng):
    model = create_random_model(two_level_topology(), rng)

    with pytest.raises(ValueError):
        overrelaxed_update(model, model, 0.5)


def test_classify_identical_models_is_a_tie(rng):
    model = create_random_model(two_level_topology(), rng)
    obs = sample_sequence(model, 10, seed=1)[1]

    result = classify([model, model], obs, FAST)

    assert result.label == 0
    assert result.tie
    assert len(result.scores) == 2
    assert all(np.isfinite(result.scores))


def test_classify_synthetic_classes():
    models = [create_lds_model(A=0.9, R=0.1), create_lds_model(A=-0.9, R=0.1)]
    config = EmConfig(e_tol=1e-6, max_sweeps=20)

    labels = [
        classify(models, sample_sequence(models[0], 100, seed=(5, i))[1], config).label
        for i in range(20)
    ]

    assert labels.count(0) >= 18


def class_model(sign: float, stay: float) -> Model:
    """Two leaves whose switch follows the root; classes differ in dynamics and root coupling."""
    topology = two_level_topology()
    phi = np.empty((2, 2, 1))
    phi[:, :, 0] = [[stay, 1 - stay], [1 - stay, stay]]
    follow = np.empty((2, 2, 2))
    for parent in range(2):
        follow[:, :, parent] = 0.1
        follow[parent, :, parent] = 0.9
    leaf = LeafParams(
        psi0=np.array([[0.9, 0.1], [0.1, 0.9]]),
        psi=follow,
        mu0=np.zeros((2, 1)),
        q0=np.ones((2, 1, 1)),
        A=sign * np.array([0.9, 0.3]).reshape(2, 1, 1),
        Q=np.full((2, 1, 1), 0.1),
        C=np.ones((1, 1)),
        R=np.full((1, 1), 0.05),
    )
    root = AggregatorParams(phi0=np.full((2, 1), 0.5), phi=phi)
    return Model(topology=topology, params={0: root, 1: leaf, 2: replace(leaf)})


def test_trained_trees_classify_held_out_sequences():
    truths = [class_model(1.0, 0.95), class_model(-1.0, 0.6)]
    config = EmConfig(e_tol=1e-4, max_sweeps=30, em_tol=1e-4, max_em_iters=10)

    models = [
        train(truth.topology, sampled_dataset(truth, 10, 100, seed=c), config)[0]
        for c, truth in enumerate(truths)
    ]

    correct = 0
    for c, truth in enumerate(truths):
        for i in range(10):
            obs = sample_sequence(truth, 100, seed=(100 + c, i))[1]
            correct += classify(models, obs, config).label == c
    assert correct / 20 >= 0.9


def test_classify_records_failing_models(rng):
    good = create_lds_model()
    wrong = create_random_model(single_leaf_topology(k=1, x_dim=1, y_dim=2), rng)
    obs = sample_sequence(good, 10, seed=2)[1]

    result = classify([good, wrong], obs, FAST)

    assert result.label == 0
    assert result.scores[1] == -np.inf
    assert "ShapeError" in result.errors[1]


@pytest.mark.parametrize(
    "setting",
    [
        {"e_tol": 0},
        {"em_tol": -1.0},
        {"eta_init": 0.5},
        {"eta_grow": 1.0},
        {"eta_shrink": 1.0},
        {"max_sweeps": 0},
        {"covariance_floor": 0.0},
    ],
)
def test_invalid_em_config(setting):
    with pytest.raises(UsageError, match=f"invalid setting {next(iter(setting))}"):
        EmConfig(**setting)


def test_dataset_check(rng):
    model = create_random_model(two_level_topology(), rng)

    with pytest.raises(InitializationError):
        Dataset([]).check(model)


def test_leave_one_out():
    models = [create_lds_model(A=0.9, R=0.1), create_lds_model(A=-0.9, R=0.1)]
    datasets = [sampled_dataset(model, 3, 40, seed=c) for c, model in enumerate(models)]
    config = EmConfig(e_tol=1e-6, max_sweeps=20, max_em_iters=3)

    labels = leave_one_out(single_leaf_topology(), datasets, config)

    assert labels == [[0, 0, 0], [1, 1, 1]]
