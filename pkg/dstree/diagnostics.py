"""Diagnostics support for Dynamical Systems Tree inference."""

from __future__ import annotations

from typing import Any

from .inference import VariationalState


def dump_variational_state(state: VariationalState) -> dict[str, Any]:
    """Return marginals and moments of a variational state as plain JSON data."""
    data: dict[str, Any] = {}
    data["bound"] = state.bound
    data["num_steps"] = state.num_steps

    data["discrete"] = {
        str(node_id): {
            "singleton": chain.stats.singleton.tolist(),
            "pairwise": chain.stats.pairwise.tolist(),
            "entropy": chain.stats.entropy,
            "log_partition": chain.stats.log_partition,
            "stale": chain.stale,
        }
        for node_id, chain in sorted(state.discrete.items())
    }

    # Covariances rather than raw second moments are easier to read
    data["continuous"] = {
        str(leaf_id): {
            "mean": chain.stats.mean.tolist(),
            "covariance": chain.stats.covariance.tolist(),
            "entropy": chain.stats.entropy,
            "stale": chain.stale,
        }
        for leaf_id, chain in sorted(state.continuous.items())
    }

    return data
