"""Dynamical Systems Trees: trees of aggregating Markov chains over switching linear dynamical systems."""

from __future__ import annotations

from .errors import DstError
from .inference import (
    VariationalState,
    evidence_bound,
    fit_variational,
    forward_backward,
    init_variational,
)
from .learning import (
    Dataset,
    EmConfig,
    FitReport,
    classify,
    em_fit,
    initialize_params,
    leave_one_out,
)
from .model import Model, ObservationSet, sample_sequence
from .topology import NodeKind, NodeSpec, Topology, validate

__all__ = [
    "Dataset",
    "DstError",
    "EmConfig",
    "FitReport",
    "Model",
    "NodeKind",
    "NodeSpec",
    "ObservationSet",
    "Topology",
    "VariationalState",
    "classify",
    "em_fit",
    "evidence_bound",
    "fit_variational",
    "forward_backward",
    "init_variational",
    "initialize_params",
    "leave_one_out",
    "sample_sequence",
    "validate",
]
