"""JSON documents for models, topologies and observations."""

from __future__ import annotations

import json
import os
from pathlib import Path
import tempfile
from typing import Any, Dict, List, Tuple

import numpy as np
import voluptuous as vol  # type: ignore

from .const import (
    AGGREGATOR_FIELDS,
    DOC_LEAVES,
    DOC_NUM_STEPS,
    DOC_OBSERVED,
    DOC_PARAMS,
    DOC_TOPOLOGY,
    DOC_Y,
    LEAF_FIELDS,
    LOGGER,
    NODE_ID,
    NODE_K,
    NODE_KIND,
    NODE_PARENT,
    NODE_X_DIM,
    NODE_Y_DIM,
)
from .errors import DocumentError
from .model import AggregatorParams, LeafParams, Model, ObservationSet, check_model
from .topology import NodeKind, NodeSpec, Topology, validate


def _array(value):
    try:
        array = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as err:
        raise vol.Invalid("expected a nested array of numbers") from err
    if array.dtype == object:
        raise vol.Invalid("expected a rectangular nested array")
    return array


def _nullable_row(value):
    if value is None:
        return None
    if not isinstance(value, list):
        raise vol.Invalid("expected a list of numbers or null")
    return [vol.Coerce(float)(v) for v in value]


POSITIVE_INT = vol.All(int, vol.Range(min=1))
OPTIONAL_DIM = vol.Any(None, POSITIVE_INT)

NODE_SCHEMA = vol.Schema(
    {
        vol.Required(NODE_ID): vol.All(int, vol.Range(min=0)),
        vol.Required(NODE_KIND): vol.In([kind.value for kind in NodeKind]),
        vol.Optional(NODE_PARENT, default=None): vol.Any(None, vol.All(int, vol.Range(min=0))),
        vol.Required(NODE_K): POSITIVE_INT,
        vol.Optional(NODE_X_DIM, default=None): OPTIONAL_DIM,
        vol.Optional(NODE_Y_DIM, default=None): OPTIONAL_DIM,
    }
)

TOPOLOGY_DOCUMENT_SCHEMA = vol.Schema(
    {vol.Required(DOC_TOPOLOGY): [NODE_SCHEMA]}, extra=vol.ALLOW_EXTRA
)

AGGREGATOR_PARAMS_SCHEMA = vol.Schema(
    {vol.Required(name): _array for name in AGGREGATOR_FIELDS}
)

LEAF_PARAMS_SCHEMA = vol.Schema({vol.Required(name): _array for name in LEAF_FIELDS})

MODEL_DOCUMENT_SCHEMA = vol.Schema(
    {
        vol.Required(DOC_TOPOLOGY): [NODE_SCHEMA],
        vol.Required(DOC_PARAMS): {str: dict},
    }
)

LEAF_DATA_SCHEMA = vol.Schema(
    {
        vol.Required(DOC_Y): [_nullable_row],
        vol.Optional(DOC_OBSERVED): [bool],
    }
)

DATA_DOCUMENT_SCHEMA = vol.Schema(
    {
        vol.Required(DOC_NUM_STEPS): vol.All(int, vol.Range(min=0)),
        vol.Required(DOC_LEAVES): {str: LEAF_DATA_SCHEMA},
    }
)


def _parse(document: str | Dict[str, Any]) -> Dict[str, Any]:
    if isinstance(document, str):
        try:
            return json.loads(document)
        except json.JSONDecodeError as err:
            raise DocumentError("", f"malformed JSON: {err}") from err
    return document


def _validate(schema: vol.Schema, document: Any, prefix: str = "") -> Any:
    try:
        return schema(document)
    except vol.Invalid as err:
        path = ".".join(str(part) for part in [prefix, *err.path] if part != "")
        raise DocumentError(path, err.msg) from err


def _topology_from_records(records: List[Dict[str, Any]]) -> Topology:
    ids = sorted(record[NODE_ID] for record in records)
    if ids != list(range(len(records))):
        raise DocumentError(DOC_TOPOLOGY, "node ids must be contiguous 0..N-1")

    by_id = {record[NODE_ID]: record for record in records}
    topology = Topology(
        nodes=tuple(
            NodeSpec(
                kind=NodeKind(by_id[i][NODE_KIND]),
                parent=by_id[i][NODE_PARENT],
                num_switch_states=by_id[i][NODE_K],
                x_dim=by_id[i][NODE_X_DIM],
                y_dim=by_id[i][NODE_Y_DIM],
            )
            for i in ids
        )
    )
    if report := validate(topology):
        raise DocumentError(DOC_TOPOLOGY, "; ".join(str(v) for v in report))
    return topology


def decode_topology(document: str | Dict[str, Any]) -> Topology:
    """Read a topology from a topology document or from a full model document."""
    validated = _validate(TOPOLOGY_DOCUMENT_SCHEMA, _parse(document))
    return _topology_from_records(validated[DOC_TOPOLOGY])


def encode_topology(topology: Topology) -> Dict[str, Any]:
    return {
        DOC_TOPOLOGY: [
            {
                NODE_ID: node_id,
                NODE_KIND: node.kind.value,
                NODE_PARENT: node.parent,
                NODE_K: node.num_switch_states,
                NODE_X_DIM: node.x_dim,
                NODE_Y_DIM: node.y_dim,
            }
            for node_id, node in enumerate(topology.nodes)
        ]
    }


def decode_model(document: str | Dict[str, Any]) -> Model:
    """Read and validate a model document."""
    validated = _validate(MODEL_DOCUMENT_SCHEMA, _parse(document))
    topology = _topology_from_records(validated[DOC_TOPOLOGY])

    params = {}
    for key, raw in validated[DOC_PARAMS].items():
        path = f"{DOC_PARAMS}.{key}"
        try:
            node_id = int(key)
        except ValueError as err:
            raise DocumentError(path, "node ids must be integers") from err
        if not 0 <= node_id < len(topology):
            raise DocumentError(path, "unknown node id")

        if topology[node_id].is_leaf:
            fields = _validate(LEAF_PARAMS_SCHEMA, raw, path)
            params[node_id] = LeafParams(**fields)
        else:
            fields = _validate(AGGREGATOR_PARAMS_SCHEMA, raw, path)
            params[node_id] = AggregatorParams(**fields)

    model = Model(topology=topology, params=params)
    check_model(model)
    return model


def encode_model(model: Model) -> Dict[str, Any]:
    params: Dict[str, Any] = {}
    for node_id, node_params in sorted(model.params.items()):
        names = LEAF_FIELDS if isinstance(node_params, LeafParams) else AGGREGATOR_FIELDS
        params[str(node_id)] = {
            name: np.asarray(getattr(node_params, name)).tolist() for name in names
        }
    return {**encode_topology(model.topology), DOC_PARAMS: params}


def decode_observations(
    document: str | Dict[str, Any], topology: Topology | None = None
) -> ObservationSet:
    """Read a data document; null rows mark missing steps."""
    validated = _validate(DATA_DOCUMENT_SCHEMA, _parse(document))
    num_steps = validated[DOC_NUM_STEPS]

    ys, masks = {}, {}
    for key, leaf in validated[DOC_LEAVES].items():
        path = f"{DOC_LEAVES}.{key}"
        try:
            leaf_id = int(key)
        except ValueError as err:
            raise DocumentError(path, "leaf ids must be integers") from err

        if topology is not None and leaf_id not in topology.leaves:
            raise DocumentError(path, "not a leaf of the topology")

        rows = leaf[DOC_Y]
        if len(rows) != num_steps + 1:
            raise DocumentError(f"{path}.{DOC_Y}", f"expected {num_steps + 1} rows")
        present = [row for row in rows if row is not None]
        if topology is not None:
            y_dim = topology[leaf_id].y_dim
        elif present:
            y_dim = len(present[0])
        else:
            raise DocumentError(f"{path}.{DOC_Y}", "can not infer y_dim from all-missing rows")

        y = np.zeros((num_steps + 1, y_dim))
        mask = np.ones(num_steps + 1, dtype=bool)
        for t, row in enumerate(rows):
            if row is None:
                mask[t] = False
                continue
            if len(row) != y_dim:
                raise DocumentError(f"{path}.{DOC_Y}.{t}", f"expected {y_dim} values")
            y[t] = row

        if DOC_OBSERVED in leaf:
            observed = np.asarray(leaf[DOC_OBSERVED], dtype=bool)
            if len(observed) != num_steps + 1:
                raise DocumentError(
                    f"{path}.{DOC_OBSERVED}", f"expected {num_steps + 1} flags"
                )
            mask &= observed

        ys[leaf_id] = y
        masks[leaf_id] = mask

    if topology is not None and set(ys) != set(topology.leaves):
        raise DocumentError(DOC_LEAVES, f"expected leaves {topology.leaves}")
    return ObservationSet(y=ys, observed=masks)


def encode_observations(obs: ObservationSet) -> Dict[str, Any]:
    return {
        DOC_NUM_STEPS: obs.num_steps,
        DOC_LEAVES: {
            str(leaf_id): {
                DOC_Y: obs.y[leaf_id].tolist(),
                DOC_OBSERVED: obs.observed[leaf_id].tolist(),
            }
            for leaf_id in sorted(obs.y)
        },
    }


def read_document(path: str | Path) -> Dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise DocumentError(str(path), f"malformed JSON: {err}") from err


def write_document(path: str | Path, document: Any):
    """Write JSON atomically: temporary file in the target directory, then rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
            f.write("\n")
        os.replace(temp_name, target)
    except BaseException:
        os.unlink(temp_name)
        raise
    LOGGER.debug("Wrote %s", target)


def load_dataset(
    path: str | Path, topology: Topology | None = None
) -> List[Tuple[str, ObservationSet]]:
    """One data file, or every *.json file of a directory in lexicographic order."""
    source = Path(path)
    files = sorted(source.glob("*.json")) if source.is_dir() else [source]
    if not files:
        raise DocumentError(str(source), "no data files found")
    return [
        (file.name, decode_observations(read_document(file), topology)) for file in files
    ]
