from __future__ import annotations

import json

import numpy as np

from dstree.diagnostics import dump_variational_state
from dstree.inference import fit_variational


def test_diagnostics(tiny_problem):
    state, _ = fit_variational(tiny_problem.model, tiny_problem.obs, 1e-6, 50, seed=0)

    diagnostics = dump_variational_state(state)

    assert diagnostics["bound"] == state.bound
    assert diagnostics["num_steps"] == 2

    assert set(diagnostics["discrete"]) == {"0", "1", "2"}
    root = diagnostics["discrete"]["0"]
    assert np.array_equal(root["singleton"], state.discrete[0].stats.singleton)
    assert np.asarray(root["pairwise"]).shape == (2, 2, 2)
    assert root["stale"] is False

    assert set(diagnostics["continuous"]) == {"1", "2"}
    leaf = diagnostics["continuous"]["1"]
    assert np.allclose(leaf["covariance"], state.continuous[1].stats.covariance)
    assert np.asarray(leaf["mean"]).shape == (3, 1)

    json.dumps(diagnostics)
