"""Contraction-graph structure for factorized linear layers.

A ContractionGraph is a DAG of small tensors (nodes) wired leg-to-leg.
Every leg of every node plays exactly one role: an edge endpoint, an input
leg (bound to one input mode), an output leg (emitting one output mode), or
a fixed leg (sliced to a single index, so the stored tensor keeps a size-1
axis there).  Edges are oriented from producer to consumer, and the node
tuple is stored in a topological order, which doubles as the default
contraction order.  Graphs and their tensors are treated as immutable;
"mutating" helpers return new graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import prod

import numpy as np

from .tensor_core import check_dtype

ROLES = ("tt-core", "tree", "disentangler", "final", "dense")

LegRef = tuple[int, int]  # (node_id, axis)


@dataclass
class Node:
    node_id: int
    tensor: np.ndarray
    role: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown node role {self.role!r}")
        self.tensor = check_dtype(self.tensor, f"node {self.node_id} tensor")
        # own a private copy so freezing it never touches the caller's array
        self.tensor = np.array(self.tensor, order="C")
        self.tensor.flags.writeable = False


@dataclass
class ContractionGraph:
    """Nodes plus the wiring that makes them a linear map."""

    nodes: tuple[Node, ...]
    edges: tuple[tuple[LegRef, LegRef], ...]   # (producer leg, consumer leg)
    input_legs: tuple[LegRef, ...]             # one per input mode, in order
    output_legs: tuple[LegRef, ...]            # one per output mode, in order
    fixed_legs: tuple[tuple[int, int, int], ...] = ()  # (node, axis, index)
    mode_dim: int = 2

    _in_axes: dict = field(default_factory=dict, repr=False, compare=False)
    _out_axes: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.nodes = tuple(self.nodes)
        self.edges = tuple((tuple(s), tuple(d)) for s, d in self.edges)
        self.input_legs = tuple(tuple(l) for l in self.input_legs)
        self.output_legs = tuple(tuple(l) for l in self.output_legs)
        self.fixed_legs = tuple(tuple(f) for f in self.fixed_legs)
        self.validate()

    # -- structure ----------------------------------------------------------

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def in_axes(self, node_id: int) -> tuple[int, ...]:
        """Axes of the node that consume upstream data, ascending."""
        return self._in_axes[node_id]

    def out_axes(self, node_id: int) -> tuple[int, ...]:
        """Axes that produce downstream/output/fixed data, ascending."""
        return self._out_axes[node_id]

    @property
    def in_width(self) -> int:
        return self.mode_dim ** len(self.input_legs)

    @property
    def out_width(self) -> int:
        return self.mode_dim ** len(self.output_legs)

    @property
    def dtype(self) -> np.dtype:
        return self.nodes[0].tensor.dtype

    def dim_of(self, leg: LegRef) -> int:
        nid, ax = leg
        return self.nodes[nid].tensor.shape[ax]

    def validate(self) -> None:
        if not self.nodes:
            raise ValueError("graph has no nodes")
        for pos, node in enumerate(self.nodes):
            if node.node_id != pos:
                raise ValueError(f"node at position {pos} has id {node.node_id}")
        dtype = self.nodes[0].tensor.dtype
        for node in self.nodes:
            if node.tensor.dtype != dtype:
                raise ValueError(f"node {node.node_id} dtype {node.tensor.dtype} "
                                 f"differs from graph dtype {dtype}")

        roles: dict[LegRef, str] = {}

        def claim(leg: LegRef, what: str) -> None:
            nid, ax = leg
            if not 0 <= nid < len(self.nodes):
                raise ValueError(f"{what} references unknown node {nid}")
            if not 0 <= ax < self.nodes[nid].tensor.ndim:
                raise ValueError(f"{what} references axis {ax} of node {nid} "
                                 f"(rank {self.nodes[nid].tensor.ndim})")
            if leg in roles:
                raise ValueError(f"leg {leg} claimed as both {roles[leg]} and {what}")
            roles[leg] = what

        in_ax: dict[int, list[int]] = {n.node_id: [] for n in self.nodes}
        out_ax: dict[int, list[int]] = {n.node_id: [] for n in self.nodes}

        for src, dst in self.edges:
            claim(src, "edge source")
            claim(dst, "edge target")
            if self.dim_of(src) != self.dim_of(dst):
                raise ValueError(f"edge {src} -> {dst} joins legs of sizes "
                                 f"{self.dim_of(src)} and {self.dim_of(dst)}")
            if src[0] >= dst[0]:
                raise ValueError(f"edge {src} -> {dst} violates topological "
                                 f"node order")
            out_ax[src[0]].append(src[1])
            in_ax[dst[0]].append(dst[1])
        for leg in self.input_legs:
            claim(leg, "input leg")
            if self.dim_of(leg) != self.mode_dim:
                raise ValueError(f"input leg {leg} has size {self.dim_of(leg)}, "
                                 f"expected mode_dim {self.mode_dim}")
            in_ax[leg[0]].append(leg[1])
        for leg in self.output_legs:
            claim(leg, "output leg")
            if self.dim_of(leg) != self.mode_dim:
                raise ValueError(f"output leg {leg} has size {self.dim_of(leg)}, "
                                 f"expected mode_dim {self.mode_dim}")
            out_ax[leg[0]].append(leg[1])
        for nid, ax, index in self.fixed_legs:
            claim((nid, ax), "fixed leg")
            if self.nodes[nid].tensor.shape[ax] != 1:
                raise ValueError(f"fixed leg ({nid}, {ax}) must be materialized "
                                 f"to size 1, found size "
                                 f"{self.nodes[nid].tensor.shape[ax]}")
            if not 0 <= index < self.mode_dim:
                raise ValueError(f"fixed index {index} out of range "
                                 f"[0, {self.mode_dim})")
            out_ax[nid].append(ax)

        for node in self.nodes:
            claimed = sum(1 for (nid, _ax) in roles if nid == node.node_id)
            if claimed != node.tensor.ndim:
                raise ValueError(f"node {node.node_id} has {node.tensor.ndim} "
                                 f"legs but {claimed} are wired")

        self._in_axes = {nid: tuple(sorted(axes)) for nid, axes in in_ax.items()}
        self._out_axes = {nid: tuple(sorted(axes)) for nid, axes in out_ax.items()}

    # -- derived quantities --------------------------------------------------

    def with_tensors(self, tensors: dict[int, np.ndarray]) -> "ContractionGraph":
        """New graph with some node tensors replaced (same shapes)."""
        nodes = []
        for node in self.nodes:
            if node.node_id in tensors:
                new = np.asarray(tensors[node.node_id])
                if new.shape != node.tensor.shape:
                    raise ValueError(f"replacement for node {node.node_id} has "
                                     f"shape {new.shape}, expected "
                                     f"{node.tensor.shape}")
                nodes.append(Node(node.node_id, new, node.role))
            else:
                nodes.append(node)
        return replace(self, nodes=tuple(nodes),
                       _in_axes={}, _out_axes={})


def param_count(g: ContractionGraph) -> int:
    """Total stored scalars; fixed legs are size 1 so they count as 1."""
    return sum(node.tensor.size for node in g.nodes)


def fix_outputs(g: ContractionGraph, picks) -> ContractionGraph:
    """Fix output modes to a single index (default 0), slicing node tensors.

    picks is an iterable of output positions, or (position, index) pairs.
    Output width divides by mode_dim per fixed leg.
    """
    norm: list[tuple[int, int]] = []
    for p in picks:
        pos, value = (int(p), 0) if np.isscalar(p) else (int(p[0]), int(p[1]))
        if not 0 <= pos < len(g.output_legs):
            raise ValueError(f"output position {pos} out of range "
                             f"[0, {len(g.output_legs)})")
        if not 0 <= value < g.mode_dim:
            raise ValueError(f"fixed index {value} out of range [0, {g.mode_dim})")
        norm.append((pos, value))
    if len({pos for pos, _ in norm}) != len(norm):
        raise ValueError("duplicate output positions in picks")

    tensors: dict[int, np.ndarray] = {}
    fixed = list(g.fixed_legs)
    chosen = {pos: (g.output_legs[pos], value) for pos, value in norm}
    for pos, ((nid, ax), value) in chosen.items():
        base = tensors.get(nid, g.nodes[nid].tensor)
        slicer = [slice(None)] * base.ndim
        slicer[ax] = slice(value, value + 1)
        tensors[nid] = np.ascontiguousarray(base[tuple(slicer)])
        fixed.append((nid, ax, value))
    outputs = tuple(leg for pos, leg in enumerate(g.output_legs)
                    if pos not in chosen)
    nodes = tuple(Node(n.node_id, tensors.get(n.node_id, n.tensor), n.role)
                  for n in g.nodes)
    return ContractionGraph(nodes=nodes, edges=g.edges,
                            input_legs=g.input_legs, output_legs=outputs,
                            fixed_legs=tuple(fixed), mode_dim=g.mode_dim)
