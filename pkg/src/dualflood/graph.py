"""Static catchment graph and the directed-flux operators built on it.

Edges are stored in COO order as an ``(E, 2)`` array of ``(src, dst)`` pairs.
A positive edge flow moves water from ``src`` to ``dst``; a negative flow
moves it against the edge orientation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError

NODE_FEATURE_NAMES = ("area", "elevation")
NODE_FEATURE_UNITS = ("m2", "m")
EDGE_FEATURE_NAMES = ("face_length", "centroid_distance", "elevation_difference")
EDGE_FEATURE_UNITS = ("m", "m", "m")


def _frozen(array, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FloodGraph:
    """Immutable catchment topology.

    ``depth_volumes``/``depth_values`` hold, per node, the knots of a
    piecewise-linear volume (m3) -> depth (m) curve. Beyond the last knot the
    final segment is extended linearly.
    """

    edges: np.ndarray
    static_node_features: np.ndarray
    static_edge_features: np.ndarray
    inflow_nodes: np.ndarray
    outflow_nodes: np.ndarray
    depth_volumes: np.ndarray
    depth_values: np.ndarray
    inflow_weights: np.ndarray | None = None
    outflow_weights: np.ndarray | None = None
    node_feature_names: tuple = NODE_FEATURE_NAMES
    edge_feature_names: tuple = EDGE_FEATURE_NAMES
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        set_ = object.__setattr__
        set_(self, "edges", _frozen(edges, np.int64))
        set_(self, "static_node_features", _frozen(self.static_node_features, np.float64))
        set_(self, "static_edge_features",
             _frozen(np.asarray(self.static_edge_features, dtype=np.float64).reshape(len(edges), -1), np.float64))
        set_(self, "inflow_nodes", _frozen(self.inflow_nodes, np.int64).reshape(-1))
        set_(self, "outflow_nodes", _frozen(self.outflow_nodes, np.int64).reshape(-1))
        set_(self, "depth_volumes", _frozen(self.depth_volumes, np.float64))
        set_(self, "depth_values", _frozen(self.depth_values, np.float64))
        for name, nodes in (("inflow_weights", self.inflow_nodes), ("outflow_weights", self.outflow_nodes)):
            w = getattr(self, name)
            if w is None:
                w = np.full(len(nodes), 1.0 / max(len(nodes), 1))
            set_(self, name, _frozen(np.asarray(w, dtype=np.float64).reshape(-1), np.float64))
        set_(self, "node_feature_names", tuple(self.node_feature_names))
        set_(self, "edge_feature_names", tuple(self.edge_feature_names))

    @property
    def num_nodes(self) -> int:
        return int(self.static_node_features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def area(self) -> np.ndarray:
        return self.static_node_features[:, self.node_feature_names.index("area")]

    @property
    def elevation(self) -> np.ndarray:
        return self.static_node_features[:, self.node_feature_names.index("elevation")]

    def boundary_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense per-node split weights for boundary inflow and outflow."""
        w_in = np.zeros(self.num_nodes)
        w_out = np.zeros(self.num_nodes)
        np.add.at(w_in, self.inflow_nodes, self.inflow_weights)
        np.add.at(w_out, self.outflow_nodes, self.outflow_weights)
        return w_in, w_out

    def edge_index(self, device=None) -> torch.Tensor:
        """``(2, E)`` long tensor, the COO matrix."""
        return torch.as_tensor(self.edges.T.copy(), dtype=torch.long, device=device)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_graph(graph: FloodGraph) -> ValidationReport:
    """List every invariant violation; an empty list means the graph is valid."""
    out: list[str] = []
    n = graph.static_node_features.shape[0]
    edges = graph.edges

    if len(graph.node_feature_names) != graph.static_node_features.shape[1]:
        out.append("node feature schema does not match static_node_features columns")
    if len(graph.edge_feature_names) != graph.static_edge_features.shape[1]:
        out.append("edge feature schema does not match static_edge_features columns")

    bad = (edges < 0) | (edges >= n)
    for k in np.flatnonzero(bad.any(axis=1)):
        out.append(f"endpoint out of range on edge {k} ({edges[k, 0]}, {edges[k, 1]})")
    for k in np.flatnonzero(edges[:, 0] == edges[:, 1]):
        out.append(f"self-loop at node {edges[k, 0]}")
    seen: dict[tuple[int, int], int] = {}
    for k, (a, b) in enumerate(map(tuple, edges.tolist())):
        if (a, b) in seen:
            out.append(f"duplicate edge ({a}, {b}) at positions {seen[(a, b)]} and {k}")
        else:
            seen[(a, b)] = k

    for name in ("inflow_nodes", "outflow_nodes"):
        nodes = getattr(graph, name)
        if nodes.size == 0:
            out.append(f"{name} is empty")
        if np.any((nodes < 0) | (nodes >= n)):
            out.append(f"{name} contains out-of-range node index")
        weights = getattr(graph, name.replace("nodes", "weights"))
        if weights.shape != nodes.shape:
            out.append(f"{name} and their split weights differ in length")
        elif nodes.size and (np.any(weights < 0) or not np.isclose(weights.sum(), 1.0)):
            out.append(f"{name} split weights must be non-negative and sum to 1")
    shared = np.intersect1d(graph.inflow_nodes, graph.outflow_nodes)
    if shared.size:
        out.append(f"nodes {shared.tolist()} are both inflow and outflow")

    if "area" in graph.node_feature_names and graph.static_node_features.shape[1]:
        area = graph.area
        for i in np.flatnonzero(~(area > 0)):
            out.append(f"non-positive cell area at node {i}")

    vk, dk = graph.depth_volumes, graph.depth_values
    if vk.shape != dk.shape or vk.ndim != 2 or vk.shape[0] != n or vk.shape[1] < 2:
        out.append("depth curve knots must be (num_nodes, K>=2) for volumes and depths")
    else:
        for i in np.flatnonzero((vk[:, 0] != 0) | (dk[:, 0] != 0)):
            out.append(f"depth curve at node {i} does not map 0 to 0")
        for i in np.flatnonzero(np.any(np.diff(vk, axis=1) <= 0, axis=1)):
            out.append(f"depth curve volume knots not strictly increasing at node {i}")
        for i in np.flatnonzero(np.any(np.diff(dk, axis=1) < 0, axis=1)):
            out.append(f"depth curve decreasing at node {i}")

    if not np.all(np.isfinite(graph.static_node_features)) or not np.all(np.isfinite(graph.static_edge_features)):
        out.append("non-finite static features")
    return ValidationReport(out)


def compute_node_fluxes(edge_index, edge_flow, num_nodes: int | None = None):
    """Total inflow and outflow (m3/s) at each node from signed edge flows.

    Every edge is duplicated with reversed orientation; the forward copy
    carries ``relu(Q)`` and the reversed copy ``relu(-Q)``. Inflow at a node
    sums the copies pointing at it, outflow the copies leaving it. Each edge
    therefore contributes ``|Q|`` to exactly one node's inflow and to the
    opposite node's outflow.

    ``edge_index`` is the ``(2, E)`` COO tensor (or a :class:`FloodGraph`);
    ``num_nodes`` defaults to the largest index + 1 for a bare tensor.
    ``edge_flow`` has shape ``(..., E)``; leading batch dimensions are kept.
    Differentiable in ``edge_flow``; the subgradient at exactly zero flow is 0.
    Returns numpy arrays when given numpy flows.
    """
    if isinstance(edge_index, FloodGraph):
        num_nodes = edge_index.num_nodes
        edge_index = edge_index.edge_index()
    else:
        edge_index = torch.as_tensor(edge_index, dtype=torch.long)
    as_numpy = isinstance(edge_flow, np.ndarray)
    q = torch.as_tensor(edge_flow)
    if not torch.is_floating_point(q):
        q = q.double()
    if q.shape[-1] != edge_index.shape[1]:
        raise DataError(f"edge_flow has {q.shape[-1]} entries, graph has {edge_index.shape[1]} edges")
    if not bool(torch.isfinite(q).all()):
        raise DataError("edge_flow contains non-finite values")
    if num_nodes is None:
        num_nodes = int(edge_index.max()) + 1 if edge_index.numel() else 0

    src, dst = edge_index[0], edge_index[1]
    fwd, rev = torch.relu(q), torch.relu(-q)
    shape = q.shape[:-1] + (num_nodes,)

    def scatter(index, w):
        return q.new_zeros(shape).index_add(-1, index, w)

    # forward and reversed copies are accumulated separately and then added,
    # so negating Q swaps the two results bit for bit
    inflow = scatter(dst, fwd) + scatter(src, rev)
    outflow = scatter(src, fwd) + scatter(dst, rev)
    if as_numpy:
        return inflow.numpy(), outflow.numpy()
    return inflow, outflow


def volume_to_depth(graph: FloodGraph, volume, counter: dict | None = None) -> np.ndarray:
    """Evaluate every node's volume->depth curve on ``volume`` of shape ``(..., N)``.

    Negative volumes are clamped to zero; the number of clamped entries is
    added to ``counter["negative_volume"]`` when a dict is supplied.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.shape[-1] != graph.num_nodes:
        raise DataError(f"volume has {v.shape[-1]} nodes, graph has {graph.num_nodes}")
    negative = v < 0
    if negative.any():
        if counter is not None:
            counter["negative_volume"] = counter.get("negative_volume", 0) + int(negative.sum())
        v = np.where(negative, 0.0, v)
    vk, dk = graph.depth_volumes, graph.depth_values
    k = vk.shape[1]
    seg = np.sum(v[..., None] >= vk[:, 1:k - 1], axis=-1) if k > 2 else np.zeros(v.shape, dtype=np.int64)
    v0 = np.take_along_axis(np.broadcast_to(vk, v.shape + (k,)), seg[..., None], -1)[..., 0]
    v1 = np.take_along_axis(np.broadcast_to(vk, v.shape + (k,)), seg[..., None] + 1, -1)[..., 0]
    d0 = np.take_along_axis(np.broadcast_to(dk, v.shape + (k,)), seg[..., None], -1)[..., 0]
    d1 = np.take_along_axis(np.broadcast_to(dk, v.shape + (k,)), seg[..., None] + 1, -1)[..., 0]
    return d0 + (d1 - d0) / (v1 - v0) * (v - v0)


def prism_depth_curve(area: np.ndarray, max_depth: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Two-knot curve ``depth = volume / area`` for vertical-walled cells."""
    area = np.asarray(area, dtype=np.float64)
    volumes = np.stack([np.zeros_like(area), area * max_depth], axis=1)
    depths = np.stack([np.zeros_like(area), np.full_like(area, max_depth)], axis=1)
    return volumes, depths


def boundary_flux(graph: FloodGraph, inflow_bc, outflow_bc):
    """Per-node external flux (m3/s) from the global boundary series.

    Inflow is split over the inflow nodes and outflow drawn from the outflow
    nodes by the graph's split weights. ``inflow_bc``/``outflow_bc`` have shape
    ``(...)``; the result has shape ``(..., N)``. numpy or torch.
    """
    w_in, w_out = graph.boundary_weights()
    if isinstance(inflow_bc, torch.Tensor):
        w_in = torch.as_tensor(w_in, dtype=inflow_bc.dtype)
        w_out = torch.as_tensor(w_out, dtype=inflow_bc.dtype)
        return inflow_bc[..., None] * w_in - outflow_bc[..., None] * w_out
    return np.asarray(inflow_bc)[..., None] * w_in - np.asarray(outflow_bc)[..., None] * w_out


def boundary_mask(graph: FloodGraph) -> np.ndarray:
    """True at nodes that exchange water with the exterior."""
    mask = np.zeros(graph.num_nodes, dtype=bool)
    mask[graph.inflow_nodes] = True
    mask[graph.outflow_nodes] = True
    return mask


@dataclass(frozen=True, eq=False)
class GraphTensors:
    """Torch views of a graph in one dtype, built once and reused every step."""

    edge_index: torch.Tensor
    static_node: torch.Tensor
    static_edge: torch.Tensor
    inflow_weight: torch.Tensor  # (N,) dense split weights
    outflow_weight: torch.Tensor
    boundary: torch.Tensor  # (N,) bool
    num_nodes: int

    @classmethod
    def from_graph(cls, graph: FloodGraph, dtype=torch.float32) -> "GraphTensors":
        w_in, w_out = graph.boundary_weights()
        return cls(
            edge_index=graph.edge_index(),
            static_node=torch.tensor(graph.static_node_features, dtype=dtype),
            static_edge=torch.tensor(graph.static_edge_features, dtype=dtype),
            inflow_weight=torch.tensor(w_in, dtype=dtype),
            outflow_weight=torch.tensor(w_out, dtype=dtype),
            boundary=torch.tensor(boundary_mask(graph)),
            num_nodes=graph.num_nodes,
        )


def as_graph_tensors(graph, dtype=torch.float32) -> GraphTensors:
    if isinstance(graph, GraphTensors):
        return graph
    return GraphTensors.from_graph(graph, dtype)
