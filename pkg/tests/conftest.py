"""Fixtures for testing."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import pytest

from dstree.model import AggregatorParams, LeafParams, Model, ObservationSet
from dstree.topology import NodeKind, NodeSpec, Topology


class TinyProblem(NamedTuple):
    model: Model
    obs: ObservationSet


def leaf_spec(parent: int | None, k: int = 2, x_dim: int = 1, y_dim: int = 1) -> NodeSpec:
    return NodeSpec(NodeKind.LEAF, parent, k, x_dim, y_dim)


def aggregator_spec(parent: int | None, k: int = 2) -> NodeSpec:
    return NodeSpec(NodeKind.AGGREGATOR, parent, k)


def single_leaf_topology(k: int = 1, x_dim: int = 1, y_dim: int = 1) -> Topology:
    return Topology(nodes=(leaf_spec(None, k, x_dim, y_dim),))


def two_level_topology(
    root_k: int = 2, leaf_ks: Sequence[int] = (2, 2), x_dim: int = 1, y_dim: int = 1
) -> Topology:
    """Root aggregator over one leaf per entry of leaf_ks."""
    return Topology(
        nodes=(aggregator_spec(None, root_k),)
        + tuple(leaf_spec(0, k, x_dim, y_dim) for k in leaf_ks)
    )


def three_level_topology() -> Topology:
    """
    0 root aggregator
    ├── 1 aggregator
    │   ├── 2 leaf
    │   └── 3 leaf
    └── 4 leaf
    """
    return Topology(
        nodes=(
            aggregator_spec(None, 2),
            aggregator_spec(0, 2),
            leaf_spec(1, 2),
            leaf_spec(1, 2),
            leaf_spec(0, 2),
        )
    )


def random_table(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    table = rng.uniform(0.2, 1.0, shape)
    return table / table.sum(axis=0, keepdims=True)


def random_spd(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    m = rng.normal(size=(dim, dim))
    return scale * (m @ m.T / dim + 0.5 * np.eye(dim))


def random_leaf_params(
    rng: np.random.Generator, k: int, k_parent: int, x_dim: int, y_dim: int
) -> LeafParams:
    A = []
    for _ in range(k):
        m = rng.normal(size=(x_dim, x_dim))
        A.append(0.9 * m / max(1.0, np.abs(np.linalg.eigvals(m)).max()))
    return LeafParams(
        psi0=random_table(rng, (k, k_parent)),
        psi=random_table(rng, (k, k, k_parent)),
        mu0=rng.normal(size=(k, x_dim)),
        q0=np.array([random_spd(rng, x_dim) for _ in range(k)]),
        A=np.array(A),
        Q=np.array([random_spd(rng, x_dim, 0.5) for _ in range(k)]),
        C=rng.normal(size=(y_dim, x_dim)),
        R=random_spd(rng, y_dim, 0.5),
    )


def create_random_model(topology: Topology, rng: np.random.Generator) -> Model:
    params = {}
    for node_id, node in enumerate(topology.nodes):
        k, k_parent = node.num_switch_states, topology.parent_cardinality(node_id)
        if node.is_leaf:
            params[node_id] = random_leaf_params(rng, k, k_parent, node.x_dim, node.y_dim)
        else:
            params[node_id] = AggregatorParams(
                phi0=random_table(rng, (k, k_parent)),
                phi=random_table(rng, (k, k, k_parent)),
            )
    return Model(topology=topology, params=params)


def create_lds_model(
    A: float = 0.8,
    Q: float = 1.0,
    C: float = 1.0,
    R: float = 1.0,
    mu0: float = 0.0,
    q0: float = 1.0,
) -> Model:
    """Scalar single-state leaf, a plain linear dynamical system."""
    return Model(
        topology=single_leaf_topology(),
        params={
            0: LeafParams(
                psi0=np.ones((1, 1)),
                psi=np.ones((1, 1, 1)),
                mu0=np.array([[mu0]]),
                q0=np.array([[[q0]]]),
                A=np.array([[[A]]]),
                Q=np.array([[[Q]]]),
                C=np.array([[C]]),
                R=np.array([[R]]),
            )
        },
    )


def random_observations(
    topology: Topology, rng: np.random.Generator, num_steps: int
) -> ObservationSet:
    return ObservationSet(
        y={
            leaf_id: rng.normal(size=(num_steps + 1, topology[leaf_id].y_dim))
            for leaf_id in topology.leaves
        }
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_problem(rng):
    """1 aggregator with K=2 over 2 leaves with K=2, x_dim=1, T=2."""
    topology = two_level_topology()
    return TinyProblem(
        create_random_model(topology, rng), random_observations(topology, rng, 2)
    )


@pytest.fixture
def deep_problem(rng):
    topology = three_level_topology()
    return TinyProblem(
        create_random_model(topology, rng), random_observations(topology, rng, 6)
    )
