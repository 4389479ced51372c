"""Tree structure of a Dynamical Systems Tree."""

from __future__ import annotations

from dataclasses import dataclass
import sys

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # pragma: no cover - Python 3.10 compatibility
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of enum.StrEnum (Python 3.11)."""

        __str__ = str.__str__
        __format__ = str.__format__
from functools import cached_property
from typing import Dict, List, Tuple

NodeId = int


class NodeKind(StrEnum):
    AGGREGATOR = "aggregator"
    LEAF = "leaf"


@dataclass(frozen=True)
class NodeSpec:
    kind: NodeKind
    parent: NodeId | None
    num_switch_states: int
    x_dim: int | None = None
    """Continuous state dimension, leaves only"""
    y_dim: int | None = None
    """Emission dimension, leaves only"""

    @property
    def is_leaf(self) -> bool:
        return self.kind is NodeKind.LEAF


@dataclass(frozen=True)
class Violation:
    node_id: NodeId | None
    message: str

    def __str__(self) -> str:
        if self.node_id is None:
            return self.message
        return f"node {self.node_id}: {self.message}"


ValidationReport = List[Violation]


@dataclass(frozen=True)
class Topology:
    """
    Nodes of the tree, indexed by their position (NodeId).
    Only meaningful for topologies that pass `validate`.
    """

    nodes: Tuple[NodeSpec, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: NodeId) -> NodeSpec:
        return self.nodes[node_id]

    @cached_property
    def children(self) -> Dict[NodeId, List[NodeId]]:
        children: Dict[NodeId, List[NodeId]] = {i: [] for i in range(len(self.nodes))}
        for node_id, node in enumerate(self.nodes):
            if node.parent is not None and node.parent in children:
                children[node.parent].append(node_id)
        return children

    @cached_property
    def root(self) -> NodeId:
        return next(i for i, node in enumerate(self.nodes) if node.parent is None)

    @cached_property
    def leaves(self) -> List[NodeId]:
        return [i for i, node in enumerate(self.nodes) if node.is_leaf]

    @cached_property
    def aggregators(self) -> List[NodeId]:
        return [i for i, node in enumerate(self.nodes) if not node.is_leaf]

    @cached_property
    def preorder(self) -> List[NodeId]:
        """Top-down depth-first order, children in insertion order."""
        order = []
        stack = [self.root]
        while stack:
            node_id = stack.pop()
            order.append(node_id)
            stack.extend(reversed(self.children[node_id]))
        return order

    @cached_property
    def depth(self) -> Dict[NodeId, int]:
        depth = {}
        for node_id in self.preorder:
            parent = self.nodes[node_id].parent
            depth[node_id] = 0 if parent is None else depth[parent] + 1
        return depth

    @cached_property
    def aggregators_deepest_first(self) -> List[NodeId]:
        return sorted(self.aggregators, key=lambda node_id: -self.depth[node_id])

    def num_states(self, node_id: NodeId) -> int:
        return self.nodes[node_id].num_switch_states

    def parent_cardinality(self, node_id: NodeId) -> int:
        """The root's parent is a constant single state chain."""
        parent = self.nodes[node_id].parent
        return 1 if parent is None else self.nodes[parent].num_switch_states


def validate(topology: Topology) -> ValidationReport:
    """Return every violated structural rule, an empty report means valid."""
    report: ValidationReport = []
    nodes = topology.nodes
    count = len(nodes)

    if count == 0:
        report.append(Violation(None, "topology has no nodes"))
        return report

    for node_id, node in enumerate(nodes):
        if node.num_switch_states < 1:
            report.append(Violation(node_id, "number of switch states must be >= 1"))
        if node.parent is not None and not 0 <= node.parent < count:
            report.append(Violation(node_id, f"parent {node.parent} does not exist"))
        if node.is_leaf:
            if node.x_dim is None or node.x_dim < 1:
                report.append(Violation(node_id, "leaf x_dim must be >= 1"))
            if node.y_dim is None or node.y_dim < 1:
                report.append(Violation(node_id, "leaf y_dim must be >= 1"))
        elif node.x_dim is not None or node.y_dim is not None:
            report.append(Violation(node_id, "aggregator can not have x_dim/y_dim"))

    roots = [i for i, node in enumerate(nodes) if node.parent is None]
    if len(roots) != 1:
        report.append(
            Violation(None, f"expected exactly one root, found {len(roots)}")
        )
    elif nodes[roots[0]].is_leaf and count > 1:
        report.append(Violation(roots[0], "root must be an aggregator"))

    child_count = {i: 0 for i in range(count)}
    for node_id, node in enumerate(nodes):
        if node.parent is not None and node.parent in child_count:
            child_count[node.parent] += 1
            if nodes[node.parent].is_leaf:
                report.append(
                    Violation(node.parent, f"leaf has child {node_id}")
                )
    for node_id, node in enumerate(nodes):
        if not node.is_leaf and child_count[node_id] == 0:
            report.append(Violation(node_id, "aggregator has no children"))

    # Every node must reach the root without revisiting a node
    for node_id in range(count):
        seen = {node_id}
        current = nodes[node_id].parent
        while current is not None and 0 <= current < count:
            if current in seen:
                report.append(Violation(node_id, "parent relation has a cycle"))
                break
            seen.add(current)
            current = nodes[current].parent

    return report
