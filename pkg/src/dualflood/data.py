"""Flood events, model input windows, z-score normalization and the dataset container.

Timestep convention (shared with the losses and the generator): for a step
``t -> t+1``

* ``rainfall[t]`` is the volume (m3) added to each node during the step,
* ``inflow_bc[t]`` / ``outflow_bc[t]`` are the boundary fluxes (m3/s) during the step,
* ``edge_flow[t+1]`` is the edge flow (m3/s) that carried water during the step,

so ``V[t+1] - V[t] = (inflow - outflow + boundary) * dt + rainfall[t]`` per node.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _binio
from .errors import (
    DataError,
    FormatVersionError,
    ManifestError,
    ShapeMismatchError,
)
from .graph import FloodGraph, validate_graph

DATASET_FORMAT = "dualflood-dataset"
DATASET_FORMAT_VERSION = 1
STD_EPSILON = 1e-8


@dataclass(eq=False)
class EventSeries:
    node_volume: np.ndarray  # (T+1, N) m3
    edge_flow: np.ndarray  # (T+1, E) m3/s, signed
    rainfall: np.ndarray  # (T+1, N) m3 per step
    inflow_bc: np.ndarray  # (T+1,) m3/s
    outflow_bc: np.ndarray  # (T+1,) m3/s
    dt: float  # s
    name: str = ""

    @property
    def num_steps(self) -> int:
        return int(self.node_volume.shape[0])

    def validate(self, graph: FloodGraph | None = None) -> list[str]:
        out = []
        n = self.num_steps
        for name in ("node_volume", "edge_flow", "rainfall", "inflow_bc", "outflow_bc"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                out.append(f"{name} has {arr.shape[0]} steps, expected {n}")
            if not np.all(np.isfinite(arr)):
                out.append(f"{name} contains non-finite values")
        for name in ("node_volume", "rainfall", "inflow_bc", "outflow_bc"):
            if np.any(getattr(self, name) < 0):
                out.append(f"{name} has negative entries")
        if not self.dt > 0:
            out.append("dt must be positive")
        if graph is not None:
            if self.node_volume.shape[1:] != (graph.num_nodes,) or self.rainfall.shape[1:] != (graph.num_nodes,):
                out.append("node arrays do not match graph node count")
            if self.edge_flow.shape[1:] != (graph.num_edges,):
                out.append("edge_flow does not match graph edge count")
        return out

    def astype(self, dtype) -> "EventSeries":
        return EventSeries(
            *(np.asarray(getattr(self, k), dtype=dtype) for k in
              ("node_volume", "edge_flow", "rainfall", "inflow_bc", "outflow_bc")),
            dt=self.dt, name=self.name,
        )


# ---------------------------------------------------------------------------
# input windows


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the node and edge input matrices.

    Node row: static columns, then ``p+1`` dynamic blocks oldest first, each
    ``[volume, rainfall, inflow_bc, outflow_bc]`` (the two boundary columns are
    dropped when ``boundary_features`` is False). Edge row: static columns,
    then ``p+1`` blocks of ``[edge_flow]``.
    """

    history: int = 2
    boundary_features: bool = True
    node_static: tuple = ("area", "elevation")
    edge_static: tuple = ("face_length", "centroid_distance", "elevation_difference")

    @property
    def node_dynamic(self) -> tuple:
        return ("volume", "rainfall", "inflow_bc", "outflow_bc") if self.boundary_features else ("volume", "rainfall")

    @property
    def node_dim(self) -> int:
        return len(self.node_static) + (self.history + 1) * len(self.node_dynamic)

    @property
    def edge_dim(self) -> int:
        return len(self.edge_static) + (self.history + 1)

    def node_columns(self) -> list[str]:
        cols = list(self.node_static)
        for lag in range(self.history, -1, -1):
            cols += [f"{c}[t-{lag}]" if lag else f"{c}[t]" for c in self.node_dynamic]
        return cols

    def edge_columns(self) -> list[str]:
        return list(self.edge_static) + [f"edge_flow[t-{lag}]" if lag else "edge_flow[t]"
                                         for lag in range(self.history, -1, -1)]

    @classmethod
    def for_graph(cls, graph: FloodGraph, history: int = 2, boundary_features: bool = True):
        return cls(history, boundary_features, tuple(graph.node_feature_names), tuple(graph.edge_feature_names))

    def to_dict(self) -> dict:
        return {"history": self.history, "boundary_features": self.boundary_features,
                "node_static": list(self.node_static), "edge_static": list(self.edge_static),
                "node_columns": self.node_columns(), "edge_columns": self.edge_columns()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(int(d["history"]), bool(d["boundary_features"]), tuple(d["node_static"]), tuple(d["edge_static"]))


def stack_node_window(static, volume, rainfall, inflow_bc, outflow_bc, boundary_features=True):
    """Torch assembly of node inputs.

    ``static`` is ``(N, s)``; ``volume``/``rainfall`` are ``(..., p+1, N)``
    oldest first; the boundary series are ``(..., p+1)``. Returns
    ``(..., N, f_v)``. Differentiable in every argument.
    """
    lead = volume.shape[:-2]
    n = volume.shape[-1]
    blocks = [static.expand(*lead, *static.shape)]
    for k in range(volume.shape[-2]):
        cols = [volume[..., k, :], rainfall[..., k, :]]
        if boundary_features:
            cols.append(inflow_bc[..., k, None].expand(*lead, n))
            cols.append(outflow_bc[..., k, None].expand(*lead, n))
        blocks.append(torch.stack(cols, dim=-1))
    return torch.cat(blocks, dim=-1)


def stack_edge_window(static, edge_flow):
    """``static`` ``(E, s)``, ``edge_flow`` ``(..., p+1, E)`` -> ``(..., E, f_e)``."""
    lead = edge_flow.shape[:-2]
    return torch.cat([static.expand(*lead, *static.shape), edge_flow.transpose(-1, -2)], dim=-1)


def _check_window(event: EventSeries, t: int, p: int):
    if p < 0:
        raise DataError("history length must be >= 0")
    if t < p:
        raise DataError(f"insufficient history: t={t} needs {p} earlier states")
    if t >= event.num_steps:
        raise DataError(f"t={t} beyond event of {event.num_steps} states")


def assemble_node_features(graph: FloodGraph, event: EventSeries, t: int, p: int,
                           boundary_features: bool = True) -> np.ndarray:
    """Raw (unnormalized) node input matrix ``(N, f_v)`` for the window ending at ``t``."""
    _check_window(event, t, p)
    sl = slice(t - p, t + 1)
    x = stack_node_window(
        torch.tensor(np.asarray(graph.static_node_features, dtype=np.float64)),
        torch.tensor(np.asarray(event.node_volume[sl], dtype=np.float64)),
        torch.tensor(np.asarray(event.rainfall[sl], dtype=np.float64)),
        torch.tensor(np.asarray(event.inflow_bc[sl], dtype=np.float64)),
        torch.tensor(np.asarray(event.outflow_bc[sl], dtype=np.float64)),
        boundary_features,
    )
    return x.numpy()


def assemble_edge_features(graph: FloodGraph, event: EventSeries, t: int, p: int) -> np.ndarray:
    """Raw edge input matrix ``(E, f_e)`` for the window ending at ``t``."""
    _check_window(event, t, p)
    e = stack_edge_window(
        torch.tensor(np.asarray(graph.static_edge_features, dtype=np.float64)),
        torch.tensor(np.asarray(event.edge_flow[t - p:t + 1], dtype=np.float64)),
    )
    return e.numpy()


# ---------------------------------------------------------------------------
# normalization


@dataclass
class ColumnStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_EPSILON)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class NormStats:
    node: ColumnStats
    edge: ColumnStats
    delta_volume: ColumnStats
    delta_flow: ColumnStats
    layout: FeatureLayout = field(default_factory=FeatureLayout)

    def to_dict(self) -> dict:
        return {"node": self.node.to_dict(), "edge": self.edge.to_dict(),
                "delta_volume": self.delta_volume.to_dict(), "delta_flow": self.delta_flow.to_dict(),
                "layout": self.layout.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        cs = {k: ColumnStats(d[k]["mean"], d[k]["std"]) for k in ("node", "edge", "delta_volume", "delta_flow")}
        return cls(layout=FeatureLayout.from_dict(d["layout"]), **cs)

    @classmethod
    def identity(cls, layout: FeatureLayout) -> "NormStats":
        """Zero mean, unit std everywhere."""
        return cls(ColumnStats(np.zeros(layout.node_dim), np.ones(layout.node_dim)),
                   ColumnStats(np.zeros(layout.edge_dim), np.ones(layout.edge_dim)),
                   ColumnStats(0.0, 1.0), ColumnStats(0.0, 1.0), layout)


def _check_stats_shape(x, stats: ColumnStats):
    if stats.mean.ndim and x.shape[-1] != stats.mean.shape[-1]:
        raise DataError(f"last dimension {x.shape[-1]} does not match {stats.mean.shape[-1]} fitted columns")


def normalize(x, stats: ColumnStats):
    """``(x - mean) / std`` column-wise; numpy or torch in, same type out."""
    _check_stats_shape(x, stats)
    if isinstance(x, torch.Tensor):
        return (x - torch.as_tensor(stats.mean, dtype=x.dtype)) / torch.as_tensor(stats.std, dtype=x.dtype)
    return (np.asarray(x) - stats.mean) / stats.std


def denormalize(x, stats: ColumnStats):
    _check_stats_shape(x, stats)
    if isinstance(x, torch.Tensor):
        return x * torch.as_tensor(stats.std, dtype=x.dtype) + torch.as_tensor(stats.mean, dtype=x.dtype)
    return np.asarray(x) * stats.std + stats.mean


def fit_normalizer(events: list[EventSeries], graph: FloodGraph, p: int = 2,
                   boundary_features: bool = True) -> NormStats:
    """Column mean/std over every training window and one-step target delta.

    A window ends at ``t`` for ``p <= t < T`` (the target ``t+1`` must exist).
    Two exact passes in float64; std is the population std clamped at 1e-8.
    """
    if not events:
        raise DataError("fit_normalizer needs at least one event")
    layout = FeatureLayout.for_graph(graph, p, boundary_features)
    for ev in events:
        if ev.num_steps < p + 2:
            raise DataError(f"event {ev.name!r} too short for history {p}")

    # each block is (rows, width) values plus how many windows repeat those rows
    def node_blocks(ev):
        T = ev.num_steps - 1
        n = graph.num_nodes
        yield np.asarray(graph.static_node_features, dtype=np.float64), T - p
        for k in range(p + 1):
            sl = slice(k, T - p + k)
            cols = [np.asarray(ev.node_volume[sl], np.float64), np.asarray(ev.rainfall[sl], np.float64)]
            if boundary_features:
                cols.append(np.repeat(np.asarray(ev.inflow_bc[sl], np.float64)[:, None], n, axis=1))
                cols.append(np.repeat(np.asarray(ev.outflow_bc[sl], np.float64)[:, None], n, axis=1))
            yield np.stack([c.reshape(-1) for c in cols], axis=1), 1

    def edge_blocks(ev):
        T = ev.num_steps - 1
        yield np.asarray(graph.static_edge_features, dtype=np.float64), T - p
        for k in range(p + 1):
            yield np.asarray(ev.edge_flow[k:T - p + k], np.float64).reshape(-1, 1), 1

    def column_stats(blocks):
        sums, counts = 0.0, 0.0
        for ev in events:
            sums = sums + np.concatenate([v.sum(0) * r for v, r in blocks(ev)])
            counts = counts + np.concatenate([np.full(v.shape[1], v.shape[0] * r, dtype=np.float64)
                                              for v, r in blocks(ev)])
        mean = sums / counts
        ss = 0.0
        for ev in events:
            parts, offset = [], 0
            for v, r in blocks(ev):
                w = v.shape[1]
                parts.append(((v - mean[offset:offset + w]) ** 2).sum(0) * r)
                offset += w
            ss = ss + np.concatenate(parts)
        return ColumnStats(mean, np.sqrt(ss / counts))

    def delta_stats(attr):
        total, count = 0.0, 0
        for ev in events:
            d = np.diff(np.asarray(getattr(ev, attr), np.float64)[p:], axis=0)
            total += d.sum()
            count += d.size
        mean = total / count
        ss = sum(((np.diff(np.asarray(getattr(ev, attr), np.float64)[p:], axis=0) - mean) ** 2).sum()
                 for ev in events)
        return ColumnStats(mean, np.sqrt(ss / count))

    return NormStats(column_stats(node_blocks), column_stats(edge_blocks),
                     delta_stats("node_volume"), delta_stats("edge_flow"), layout)


# ---------------------------------------------------------------------------
# container


def _graph_arrays(graph: FloodGraph):
    return {
        "graph_edges": (graph.edges, "int32"),
        "graph_static_node_features": (graph.static_node_features, "float32"),
        "graph_static_edge_features": (graph.static_edge_features, "float32"),
        "graph_inflow_nodes": (graph.inflow_nodes, "int32"),
        "graph_outflow_nodes": (graph.outflow_nodes, "int32"),
        "graph_inflow_weights": (graph.inflow_weights, "float32"),
        "graph_outflow_weights": (graph.outflow_weights, "float32"),
        "graph_depth_volumes": (graph.depth_volumes, "float32"),
        "graph_depth_values": (graph.depth_values, "float32"),
    }


EVENT_FIELDS = ("node_volume", "edge_flow", "rainfall", "inflow_bc", "outflow_bc")
EVENT_UNITS = {"node_volume": "m3", "edge_flow": "m3/s", "rainfall": "m3/step",
               "inflow_bc": "m3/s", "outflow_bc": "m3/s"}


def save_dataset(graph: FloodGraph, events: list[EventSeries], path, provenance: dict | None = None) -> Path:
    """Write the container: ``manifest.json`` plus one little-endian blob per array."""
    path = Path(path)
    report = validate_graph(graph)
    if not report.ok:
        raise DataError("invalid graph: " + "; ".join(report.violations[:5]))
    for ev in events:
        problems = ev.validate(graph)
        if problems:
            raise DataError(f"invalid event {ev.name!r}: " + "; ".join(problems))
    path.mkdir(parents=True, exist_ok=True)
    arrays = {name: _binio.write_array(path, name, arr, dt) for name, (arr, dt) in _graph_arrays(graph).items()}
    ev_entries = []
    for i, ev in enumerate(events):
        entry = {"name": ev.name or f"event_{i:03d}", "dt": float(ev.dt), "num_steps": ev.num_steps, "arrays": {}}
        for f in EVENT_FIELDS:
            entry["arrays"][f] = _binio.write_array(path, f"event_{i:03d}_{f}", getattr(ev, f), "float32")
        ev_entries.append(entry)
    manifest = {
        "format": DATASET_FORMAT,
        "format_version": DATASET_FORMAT_VERSION,
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "num_events": len(events),
        "node_features": {"names": list(graph.node_feature_names),
                          "units": list(graph.metadata.get("node_feature_units", []))},
        "edge_features": {"names": list(graph.edge_feature_names),
                          "units": list(graph.metadata.get("edge_feature_units", []))},
        "event_units": EVENT_UNITS,
        "byte_order": "little",
        "graph": {"arrays": arrays, "metadata": graph.metadata},
        "events": ev_entries,
        "provenance": provenance or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise ManifestError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise ManifestError(f"{mf} is not a {DATASET_FORMAT} manifest")
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported dataset format version {manifest.get('format_version')!r} "
            f"(this build reads {DATASET_FORMAT_VERSION})")
    return manifest


def load_dataset(path) -> tuple[FloodGraph, list[EventSeries]]:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        n, e = int(manifest["num_nodes"]), int(manifest["num_edges"])
        g = {k.removeprefix("graph_"): _binio.read_array(path, v) for k, v in manifest["graph"]["arrays"].items()}
        node_names = manifest["node_features"]["names"]
        edge_names = manifest["edge_features"]["names"]
        event_entries = manifest["events"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest missing field: {exc}") from exc

    expect = {"edges": (e, 2), "static_node_features": (n, len(node_names)),
              "static_edge_features": (e, len(edge_names))}
    for key, shape in expect.items():
        if g[key].shape != shape:
            raise ShapeMismatchError(f"graph array {key} has shape {g[key].shape}, manifest counts imply {shape}")
    if g["depth_volumes"].shape[0] != n:
        raise ShapeMismatchError("depth curve rows do not match num_nodes")
    graph = FloodGraph(
        edges=g["edges"], static_node_features=g["static_node_features"],
        static_edge_features=g["static_edge_features"], inflow_nodes=g["inflow_nodes"],
        outflow_nodes=g["outflow_nodes"], depth_volumes=g["depth_volumes"], depth_values=g["depth_values"],
        inflow_weights=g["inflow_weights"], outflow_weights=g["outflow_weights"],
        node_feature_names=tuple(node_names), edge_feature_names=tuple(edge_names),
        metadata=manifest["graph"].get("metadata", {}),
    )
    if len(event_entries) != manifest.get("num_events", len(event_entries)):
        raise ManifestError("num_events disagrees with the event list")
    events = []
    for entry in event_entries:
        try:
            arrays = {f: _binio.read_array(path, entry["arrays"][f]) for f in EVENT_FIELDS}
            steps, dt, name = int(entry["num_steps"]), float(entry["dt"]), entry["name"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"event entry missing field: {exc}") from exc
        want = {"node_volume": (steps, n), "edge_flow": (steps, e), "rainfall": (steps, n),
                "inflow_bc": (steps,), "outflow_bc": (steps,)}
        for f, shape in want.items():
            if arrays[f].shape != shape:
                raise ShapeMismatchError(f"{name}.{f} has shape {arrays[f].shape}, expected {shape}")
        events.append(EventSeries(**arrays, dt=dt, name=name))
    return graph, events
