"""Builders and evaluation for factorized linear layers.

Four layer kinds share the ContractionGraph representation:

* dense: one node holding the full matrix, reshaped to modes.
* tt:    a chain of cores; core k consumes input mode k and emits output
         mode k plus a bond leg of size D to the next core.
* tree:  columns of rank-4 coarsening elements.  Each element consumes two
         legs and emits a dashed leg (an output mode, size d) and a solid
         leg (size D) that feeds the next column.  A column over m legs has
         m // 2 elements; when two legs remain, a single element emits two
         output modes, and an odd count m >= 3 terminates in one rank-2m
         element (m solid legs in, m output modes out).
* mera:  the tree plus disentanglers, one between each adjacent pair of
         elements in a column (t - 1 disentanglers before a column of t).

Output modes are ordered by (column, position within column), matching the
construction order.  Node order is the streaming left-to-right order within
each column (each element right after the disentangler it waits on), which
is also the default contraction order for forward() and multiply_count().
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from . import tensor_core as tc
from .graph import ContractionGraph, LegRef, Node, fix_outputs
from .init import Rng, init_gaussian_fanin, init_orthogonal_node

KINDS = ("dense", "tt", "tree", "mera")
FINAL_MODES = ("merge", "pair")
DENSE_CAP = 2 ** 26  # max entries a to_dense() result may have


@dataclass(frozen=True)
class LayerSpec:
    """What to build.

    kind          one of dense, tt, tree, mera
    in_modes      number of input modes n; input width is mode_dim ** n
    mode_dim      size d of every input/output mode
    bond_dim      internal bond size D (tt bonds, tree/mera solid legs);
                  defaults to mode_dim
    out_modes     dense only; tt/tree/mera are width-preserving before fixing
    fixed_outputs output positions (or (position, index) pairs) to fix
    final_mode    termination for an odd column count m >= 3: "merge" ends in
                  a single rank-2m element, "pair" keeps pairing and passes
                  the last leg through until two legs remain
    """

    kind: str
    in_modes: int
    mode_dim: int = 2
    bond_dim: int | None = None
    out_modes: int | None = None
    fixed_outputs: tuple = ()
    final_mode: str = "merge"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.mode_dim < 2:
            raise ValueError(f"mode_dim must be >= 2, got {self.mode_dim}")
        if self.bond_dim is None:
            object.__setattr__(self, "bond_dim", self.mode_dim)
        if self.bond_dim < 1:
            raise ValueError(f"bond_dim must be >= 1, got {self.bond_dim}")
        if self.final_mode not in FINAL_MODES:
            raise ValueError(f"final_mode must be one of {FINAL_MODES}")
        if self.kind == "tt" and self.in_modes < 2:
            raise ValueError(f"tt needs in_modes >= 2, got {self.in_modes}")
        if self.kind in ("tree", "mera"):
            if self.in_modes < 2 or self.in_modes % 2:
                raise ValueError(f"{self.kind} needs an even in_modes >= 2, "
                                 f"got {self.in_modes}")
        if self.kind == "dense" and self.in_modes < 1:
            raise ValueError(f"dense needs in_modes >= 1, got {self.in_modes}")
        if self.kind != "dense" and self.out_modes not in (None, self.in_modes):
            raise ValueError(f"{self.kind} is width-preserving; use "
                             f"fixed_outputs to narrow it")

    @property
    def n_out(self) -> int:
        return self.in_modes if self.out_modes is None else self.out_modes

    @property
    def in_width(self) -> int:
        return self.mode_dim ** self.in_modes

    @property
    def out_width(self) -> int:
        fixed = len(self.fixed_outputs)
        return self.mode_dim ** (self.n_out - fixed)


class _Builder:
    """Accumulates nodes and wiring during construction."""

    def __init__(self, n_modes: int, dtype) -> None:
        self.dtype = dtype
        self.nodes: list[Node] = []
        self.edges: list[tuple[LegRef, LegRef]] = []
        self.input_bind: dict[int, LegRef] = {}
        self.outputs: list[LegRef] = []
        self.n_modes = n_modes

    def node(self, shape: tuple[int, ...], role: str) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, np.zeros(shape, dtype=self.dtype), role))
        return nid

    def consume(self, src, dst: LegRef) -> None:
        # src is ("in", mode) for raw input legs, else a producer LegRef
        if src[0] == "in":
            self.input_bind[src[1]] = dst
        else:
            self.edges.append((src, dst))

    def graph(self, mode_dim: int) -> ContractionGraph:
        legs = tuple(self.input_bind[m] for m in range(self.n_modes))
        return ContractionGraph(nodes=tuple(self.nodes), edges=tuple(self.edges),
                                input_legs=legs, output_legs=tuple(self.outputs),
                                mode_dim=mode_dim)


def build_dense(spec: LayerSpec, dtype=tc.FP64) -> ContractionGraph:
    n, m, d = spec.in_modes, spec.n_out, spec.mode_dim
    b = _Builder(n, dtype)
    nid = b.node((d,) * (n + m), "dense")
    for mode in range(n):
        b.consume(("in", mode), (nid, mode))
    b.outputs = [(nid, n + j) for j in range(m)]
    return _finish(b.graph(d), spec)


def build_tt(spec: LayerSpec, dtype=tc.FP64) -> ContractionGraph:
    n, d, D = spec.in_modes, spec.mode_dim, spec.bond_dim
    b = _Builder(n, dtype)
    bond = None
    for k in range(n):
        if k == 0:
            nid = b.node((d, d, D), "tt-core")   # legs (i, j, alpha)
            i_ax, j_ax, out_bond = 0, 1, (nid, 2)
        elif k == n - 1:
            nid = b.node((d, d, D), "tt-core")   # legs (i, j, alpha-in)
            i_ax, j_ax, out_bond = 0, 1, None
            b.consume(bond, (nid, 2))
        else:
            nid = b.node((D, d, d, D), "tt-core")  # legs (alpha, i, j, alpha')
            i_ax, j_ax, out_bond = 1, 2, (nid, 3)
            b.consume(bond, (nid, 0))
        b.consume(("in", k), (nid, i_ax))
        b.outputs.append((nid, j_ax))
        bond = out_bond
    return _finish(b.graph(d), spec)


def _coarsener(spec: LayerSpec, disentangle: bool, dtype) -> ContractionGraph:
    n, d, D = spec.in_modes, spec.mode_dim, spec.bond_dim
    b = _Builder(n, dtype)
    live = [("in", m) for m in range(n)]
    dims = [d] * n

    while True:
        m = len(live)
        if m == 2:
            nid = b.node((dims[0], dims[1], d, d), "final")
            b.consume(live[0], (nid, 0))
            b.consume(live[1], (nid, 1))
            b.outputs += [(nid, 2), (nid, 3)]
            break
        if m % 2 == 1 and spec.final_mode == "merge":
            nid = b.node(tuple(dims) + (d,) * m, "final")
            for ax, src in enumerate(live):
                b.consume(src, (nid, ax))
            b.outputs += [(nid, m + j) for j in range(m)]
            break

        t = m // 2  # elements in this column; odd m passes live[-1] through
        dis_left: dict[int, LegRef] = {}
        dis_right: dict[int, LegRef] = {}
        new_live, new_dims = [], []
        for j in range(t):
            if disentangle and j < t - 1:
                a, c = dims[2 * j + 1], dims[2 * j + 2]
                nid = b.node((a, c, a, c), "disentangler")
                b.consume(live[2 * j + 1], (nid, 0))
                b.consume(live[2 * j + 2], (nid, 1))
                dis_left[j], dis_right[j] = (nid, 2), (nid, 3)
            left = live[2 * j] if (j == 0 or not disentangle) else dis_right[j - 1]
            right = (live[2 * j + 1] if (j == t - 1 or not disentangle)
                     else dis_left[j])
            nid = b.node((dims[2 * j], dims[2 * j + 1], d, D), "tree")
            b.consume(left, (nid, 0))
            b.consume(right, (nid, 1))
            b.outputs.append((nid, 2))        # dashed leg -> output mode
            new_live.append((nid, 3))         # solid leg -> next column
            new_dims.append(D)
        if m % 2 == 1:
            new_live.append(live[-1])
            new_dims.append(dims[-1])
        live, dims = new_live, new_dims

    return _finish(b.graph(d), spec)


def build_tree(spec: LayerSpec, dtype=tc.FP64) -> ContractionGraph:
    return _coarsener(spec, disentangle=False, dtype=dtype)


def build_mera(spec: LayerSpec, dtype=tc.FP64) -> ContractionGraph:
    return _coarsener(spec, disentangle=True, dtype=dtype)


_BUILDERS = {"dense": build_dense, "tt": build_tt,
             "tree": build_tree, "mera": build_mera}


def build_layer(spec: LayerSpec, dtype=tc.FP64) -> ContractionGraph:
    return _BUILDERS[spec.kind](spec, dtype=dtype)


def _finish(g: ContractionGraph, spec: LayerSpec) -> ContractionGraph:
    if spec.fixed_outputs:
        g = fix_outputs(g, spec.fixed_outputs)
    return g


# -- evaluation ---------------------------------------------------------------


def _bindings(g: ContractionGraph):
    in_bind = {leg: mode for mode, leg in enumerate(g.input_legs)}
    edge_by_dst = {dst: src for src, dst in g.edges}
    return in_bind, edge_by_dst


def _source_keys(g: ContractionGraph, nid: int, in_bind, edge_by_dst):
    """For each in-axis of the node, the key of the leg it consumes."""
    keys = []
    for ax in g.in_axes(nid):
        leg = (nid, ax)
        if leg in in_bind:
            keys.append(("in", in_bind[leg]))
        else:
            keys.append(edge_by_dst[leg])
    return keys


def forward(g: ContractionGraph, x: np.ndarray) -> np.ndarray:
    """Apply the layer to a vector or a batch of row vectors.

    Nodes are contracted into a running state in graph order; emitted
    output legs ride along until the final permutation gathers them in
    output-mode order.
    """
    x = tc.check_dtype(x, "x")
    if x.dtype != g.dtype:
        raise ValueError(f"input dtype {x.dtype} != graph dtype {g.dtype}")
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != g.in_width:
        raise ValueError(f"input width {x.shape[-1] if x.ndim else 0} != "
                         f"graph input width {g.in_width}")
    batch = xb.shape[0]
    d, n = g.mode_dim, len(g.input_legs)

    in_bind, edge_by_dst = _bindings(g)
    state = xb.reshape((batch,) + (d,) * n)
    keys: list = [("in", m) for m in range(n)]  # state axes 1..; axis 0 is batch

    for node in g.nodes:
        srcs = _source_keys(g, node.node_id, in_bind, edge_by_dst)
        axes = [1 + keys.index(k) for k in srcs]
        state = tc.contract(state, axes, node.tensor, g.in_axes(node.node_id))
        keys = [k for k in keys if k not in srcs]
        keys += [(node.node_id, ax) for ax in g.out_axes(node.node_id)]

    order = [0] + [1 + keys.index(leg) for leg in g.output_legs]
    order += [ax for ax in range(1, len(keys) + 1) if ax not in order]  # fixed
    state = tc.permute(state, order)
    out = state.reshape(batch, g.out_width)
    return out[0] if single else out


def to_dense(g: ContractionGraph, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize the layer as an (out_width, in_width) matrix.

    Folds node tensors together over their shared edges, leaving the input
    and output legs open.  Independent of forward(): no input vector is
    involved and the intermediates are different.
    """
    entries = g.out_width * g.in_width
    if entries > cap:
        raise ValueError(f"dense matrix would hold {entries} entries, above "
                         f"the cap of {cap}")
    in_bind, edge_by_dst = _bindings(g)

    acc = None
    keys: list = []
    for node in g.nodes:
        dst_axes = [ax for ax in range(node.tensor.ndim)
                    if (node.node_id, ax) in edge_by_dst]
        free_keyed = []
        for ax in range(node.tensor.ndim):
            leg = (node.node_id, ax)
            if leg in in_bind:
                free_keyed.append(("in", in_bind[leg]))
            elif leg not in edge_by_dst:
                free_keyed.append(leg)   # output, fixed, or future-edge source
        if acc is None:
            if dst_axes:
                raise ValueError("first node cannot consume an edge")
            acc, keys = node.tensor, free_keyed
            continue
        acc_axes = [keys.index(edge_by_dst[(node.node_id, ax)]) for ax in dst_axes]
        consumed = {edge_by_dst[(node.node_id, ax)] for ax in dst_axes}
        acc = tc.contract(acc, acc_axes, node.tensor, dst_axes)
        keys = [k for k in keys if k not in consumed] + free_keyed

    out_pos = {leg: keys.index(leg) for leg in g.output_legs}
    in_pos = {m: keys.index(("in", m)) for m in range(len(g.input_legs))}
    order = [out_pos[leg] for leg in g.output_legs]
    order += [in_pos[m] for m in range(len(g.input_legs))]
    order += [i for i in range(len(keys)) if i not in order]  # size-1 fixed legs
    acc = tc.permute(acc, order)
    return acc.reshape(g.out_width, g.in_width)


def multiply_count(g: ContractionGraph, order=None) -> int:
    """Scalar multiplications to apply the layer to one input vector.

    Cost model: each node is a (prod of in-legs) x (prod of out-legs) matrix
    applied once per configuration of the pending legs, where pending means
    input legs not yet consumed plus bond legs already produced but not yet
    consumed.  Emitted output legs are final and never multiply later work.
    A dense layer therefore costs exactly out_width * in_width.
    """
    if order is None:
        order = list(range(len(g.nodes)))
    order = [int(i) for i in order]
    if sorted(order) != list(range(len(g.nodes))):
        raise ValueError("order must list every node exactly once")
    pos = {nid: i for i, nid in enumerate(order)}
    for src, dst in g.edges:
        if pos[src[0]] >= pos[dst[0]]:
            raise ValueError(f"order is not topological: edge {src} -> {dst}")

    in_bind, edge_by_dst = _bindings(g)
    edge_srcs = {src for src, _dst in g.edges}
    frontier = {("in", m): g.mode_dim for m in range(len(g.input_legs))}
    total = 0
    for nid in order:
        node = g.nodes[nid]
        srcs = _source_keys(g, nid, in_bind, edge_by_dst)
        in_prod = 1
        for k in srcs:
            in_prod *= frontier.pop(k)
        out_prod = prod(node.tensor.shape[ax] for ax in g.out_axes(nid))
        spectators = prod(frontier.values()) if frontier else 1
        total += in_prod * out_prod * spectators
        for ax in g.out_axes(nid):
            if (nid, ax) in edge_srcs:
                frontier[(nid, ax)] = node.tensor.shape[ax]
    return total


# -- initialization and small helpers ----------------------------------------


def init_graph(g: ContractionGraph, rng: Rng, scheme: str = "orthogonal",
               dtype=None) -> ContractionGraph:
    """Fresh node tensors from per-node split streams."""
    if scheme not in ("orthogonal", "gaussian"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    dtype = g.dtype if dtype is None else np.dtype(dtype)
    tensors = {}
    for node in g.nodes:
        child = rng.split(f"node{node.node_id}")
        shape = node.tensor.shape
        in_axes = g.in_axes(node.node_id)
        if scheme == "orthogonal":
            tensors[node.node_id] = init_orthogonal_node(shape, in_axes, child,
                                                         dtype=dtype)
        else:
            n_in = prod(shape[a] for a in in_axes)
            tensors[node.node_id] = init_gaussian_fanin(shape, n_in, child,
                                                        dtype=dtype)
    return g.with_tensors(tensors)


def identity_tensor(shape: tuple[int, ...], in_axes, dtype=tc.FP64) -> np.ndarray:
    """Node tensor acting as the identity map from its in-legs to out-legs."""
    in_axes = tuple(in_axes)
    out_axes = tuple(a for a in range(len(shape)) if a not in in_axes)
    p = prod(shape[a] for a in in_axes)
    q = prod(shape[a] for a in out_axes)
    if p != q:
        raise ValueError(f"identity needs equal in/out products, got {p} and {q}")
    t = np.eye(p, dtype=dtype).reshape(tuple(shape[a] for a in in_axes) +
                                       tuple(shape[a] for a in out_axes))
    return np.ascontiguousarray(np.transpose(t, np.argsort(in_axes + out_axes)))


def with_identity_disentanglers(g: ContractionGraph) -> ContractionGraph:
    tensors = {n.node_id: identity_tensor(n.tensor.shape, g.in_axes(n.node_id),
                                          dtype=g.dtype)
               for n in g.nodes if n.role == "disentangler"}
    return g.with_tensors(tensors)
