"""Synthetic catchments and exactly mass-conserving flood events.

The generator is a storage-routing scheme, not a shallow-water solver. Water
moves between neighbouring cells driven by their water-surface head
difference, capped so no cell releases more than a fixed fraction of what it
holds. The volume update is the discrete balance itself, so the recorded
trajectories satisfy both mass-balance losses to rounding error.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay

from .data import EventSeries
from .errors import ConfigError
from .graph import (
    EDGE_FEATURE_UNITS,
    NODE_FEATURE_UNITS,
    FloodGraph,
    boundary_flux,
    compute_node_fluxes,
    prism_depth_curve,
    validate_graph,
    volume_to_depth,
)

DEFAULT_NODES = 1129
DEFAULT_EDGES = 2743
DEFAULT_STEPS = 576
DEFAULT_DT = 900.0
DEFAULT_EVENTS = 56


@dataclass
class CatchmentSpec:
    num_nodes: int = DEFAULT_NODES
    num_edges: int | None = None  # None: keep the reference edges-per-node ratio
    cell_spacing: float = 150.0  # m, sets the extent when extent is None
    extent: tuple[float, float] | None = None  # (length, width) in m
    aspect: float = 2.0
    relief: float = 30.0  # m of bed drop along the valley
    side_slope: float = 0.01
    meander_amplitude: float = 0.15  # fraction of the width
    channel_fraction: float = 0.1
    channel_depth: float = 1.5  # m
    noise: float = 0.3  # m
    num_inflow: int = 1
    num_outflow: int = 3
    seed: int = 0

    def target_edges(self) -> int:
        if self.num_edges is not None:
            return int(self.num_edges)
        return int(round(self.num_nodes * DEFAULT_EDGES / DEFAULT_NODES))

    def domain(self) -> tuple[float, float]:
        if self.extent is not None:
            return float(self.extent[0]), float(self.extent[1])
        total = self.num_nodes * self.cell_spacing ** 2
        width = math.sqrt(total / self.aspect)
        return self.aspect * width, width

    def check(self):
        if self.num_nodes < 4:
            raise ConfigError("catchment needs at least 4 nodes")
        if self.target_edges() < self.num_nodes - 1:
            raise ConfigError(
                f"{self.target_edges()} edges cannot connect {self.num_nodes} nodes (need {self.num_nodes - 1})")
        if self.num_inflow < 1 or self.num_outflow < 1 or self.num_inflow + self.num_outflow > self.num_nodes:
            raise ConfigError("invalid boundary node counts")
        if min(self.cell_spacing, self.relief, self.side_slope, self.channel_fraction,
               self.channel_depth, self.noise) < 0:
            raise ConfigError("catchment magnitudes must be non-negative")


@dataclass
class HydrographSpec:
    num_steps: int = DEFAULT_STEPS  # stored states, including the initial one
    dt: float = DEFAULT_DT  # s
    inflow_peak: float | None = None  # m3/s; None scales with catchment area
    peak_rate: float = 5e-6  # m/s of catchment area, used when inflow_peak is None
    base_fraction: float = 0.02  # baseflow as a fraction of the peak
    peak_time: float = 0.3  # fraction of the event
    shape: float = 4.0  # gamma-hydrograph sharpness
    rain_intensity: float = 2.0  # mm/h at the storm peak
    rain_peak_time: float = 0.25
    rain_duration: float = 0.2  # fraction of the event (full width)
    rain_variability: float = 0.3
    initial_depth: float = 0.0  # m over every cell at t=0
    roughness: float = 0.05  # Manning-type coefficient of the head-difference flow law
    substeps: int = 10  # routing sub-steps per recorded step
    release_fraction: float = 0.45  # max share of a cell's water leaving by edges per sub-step
    outlet_fraction: float = 0.3  # share of outlet water drained per sub-step
    seed: int = 0

    def check(self):
        if self.num_steps < 2:
            raise ConfigError("an event needs at least 2 states")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        values = [self.peak_rate, self.base_fraction, self.shape, self.rain_intensity, self.rain_duration,
                  self.rain_variability, self.initial_depth, self.release_fraction,
                  self.outlet_fraction]
        if self.inflow_peak is not None:
            values.append(self.inflow_peak)
        if min(values) < 0:
            raise ConfigError("hydrograph magnitudes must be non-negative")
        if not self.roughness > 0 or self.substeps < 1:
            raise ConfigError("roughness must be positive and substeps >= 1")
        if self.release_fraction + self.outlet_fraction >= 1:
            raise ConfigError("release_fraction + outlet_fraction must stay below 1 to keep volumes non-negative")
        if self.rain_variability > 1:
            raise ConfigError("rain_variability above 1 would make rainfall negative")


def _points(spec: CatchmentSpec, rng: np.random.Generator) -> np.ndarray:
    length, width = spec.domain()
    nx = max(2, int(math.ceil(math.sqrt(spec.num_nodes * length / width))))
    ny = max(2, int(math.ceil(spec.num_nodes / nx)))
    while nx * ny < spec.num_nodes:
        ny += 1
    gx, gy = np.meshgrid((np.arange(nx) + 0.5) / nx * length, (np.arange(ny) + 0.5) / ny * width, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts += rng.uniform(-0.3, 0.3, size=pts.shape) * np.array([length / nx, width / ny])
    keep = np.sort(rng.choice(len(pts), size=spec.num_nodes, replace=False))
    return pts[keep]


def generate_catchment(spec: CatchmentSpec | None = None) -> FloodGraph:
    """Random unstructured-mesh catchment graph, deterministic in ``spec.seed``.

    Nodes are jittered-grid cell centroids over a tilted, meandering valley.
    Edges come from a Delaunay triangulation pruned (longest first, never
    breaking the minimum spanning tree) to the target count and oriented
    downhill. Cell areas are barycentric dual areas and face lengths the
    matching dual-face lengths.
    """
    spec = spec or CatchmentSpec()
    spec.check()
    rng = np.random.default_rng(spec.seed)
    pts = _points(spec, rng)
    n = len(pts)
    length, width = spec.domain()

    tri = Delaunay(pts)
    simplices = tri.simplices
    corners = pts[simplices]
    tri_area = 0.5 * np.abs(
        (corners[:, 1, 0] - corners[:, 0, 0]) * (corners[:, 2, 1] - corners[:, 0, 1])
        - (corners[:, 2, 0] - corners[:, 0, 0]) * (corners[:, 1, 1] - corners[:, 0, 1]))
    area = np.zeros(n)
    np.add.at(area, simplices.ravel(), np.repeat(tri_area / 3.0, 3))
    centroid = corners.mean(axis=1)

    face: dict[tuple[int, int], float] = {}
    for s, c in zip(simplices, centroid):
        for a, b in ((s[0], s[1]), (s[1], s[2]), (s[2], s[0])):
            key = (min(a, b), max(a, b))
            mid = 0.5 * (pts[a] + pts[b])
            face[key] = face.get(key, 0.0) + float(np.hypot(*(mid - c)))
    pairs = np.array(sorted(face), dtype=np.int64)
    dist = np.hypot(*(pts[pairs[:, 0]] - pts[pairs[:, 1]]).T)

    mst = minimum_spanning_tree(coo_matrix((dist + 1e-9, (pairs[:, 0], pairs[:, 1])), shape=(n, n))).tocoo()
    in_tree = {(min(a, b), max(a, b)) for a, b in zip(mst.row, mst.col)}
    tree_mask = np.array([tuple(p) in in_tree for p in pairs.tolist()])
    extra = np.flatnonzero(~tree_mask)
    extra = extra[np.argsort(dist[extra], kind="stable")]
    budget = max(0, min(spec.target_edges(), len(pairs)) - int(tree_mask.sum()))
    keep = np.sort(np.concatenate([np.flatnonzero(tree_mask), extra[:budget]]))
    pairs, dist = pairs[keep], dist[keep]
    face_len = np.array([face[tuple(p)] for p in pairs.tolist()])

    # valley: bed falls along x, rises away from a meandering centre line
    x, y = pts[:, 0], pts[:, 1]
    phase = rng.uniform(0, 2 * np.pi)
    centre = width * (0.5 + spec.meander_amplitude * np.sin(2 * np.pi * x / max(length, 1e-9) * 1.5 + phase))
    offset = np.abs(y - centre)
    bed = spec.relief * (1.0 - x / length) + spec.side_slope * offset * (length / max(width, 1e-9)) ** 0.5
    bed += spec.noise * rng.standard_normal(n)
    n_channel = max(2, int(round(spec.channel_fraction * n)))
    channel = np.argsort(offset, kind="stable")[:n_channel]
    bed[channel] -= spec.channel_depth
    bed -= bed.min()

    a, b = pairs[:, 0], pairs[:, 1]
    a_first = (bed[a] > bed[b]) | ((bed[a] == bed[b]) & (a < b))
    src = np.where(a_first, a, b)
    dst = np.where(a_first, b, a)
    edges = np.stack([src, dst], axis=1)
    elev_diff = bed[src] - bed[dst]

    outflow = np.argsort(bed, kind="stable")[:spec.num_outflow]
    candidates = np.array([c for c in channel[np.argsort(x[channel], kind="stable")] if c not in set(outflow)])
    if len(candidates) < spec.num_inflow:
        candidates = np.array([i for i in np.argsort(x, kind="stable") if i not in set(outflow)])
    inflow = candidates[:spec.num_inflow]

    vols, depths = prism_depth_curve(area)
    graph = FloodGraph(
        edges=edges,
        static_node_features=np.stack([area, bed], axis=1),
        static_edge_features=np.stack([face_len, dist, elev_diff], axis=1),
        inflow_nodes=inflow,
        outflow_nodes=outflow,
        depth_volumes=vols,
        depth_values=depths,
        metadata={
            "node_feature_units": list(NODE_FEATURE_UNITS),
            "edge_feature_units": list(EDGE_FEATURE_UNITS),
            "coordinates": pts.round(6).tolist(),
            "channel_nodes": sorted(int(c) for c in channel),
            "catchment_spec": asdict(spec),
        },
    )
    report = validate_graph(graph)
    if not report.ok:
        raise AssertionError("generator produced an invalid graph: " + "; ".join(report.violations[:5]))
    return graph


def inflow_hydrograph(hspec: HydrographSpec, catchment_area: float) -> np.ndarray:
    """Boundary inflow (m3/s) at every stored state, gamma-shaped over a baseflow."""
    steps = np.arange(hspec.num_steps, dtype=np.float64)
    peak = hspec.inflow_peak if hspec.inflow_peak is not None else hspec.peak_rate * catchment_area
    base = hspec.base_fraction * peak
    tp = max(hspec.peak_time * (hspec.num_steps - 1), 1.0)
    r = steps / tp
    shape = np.where(r > 0, r ** hspec.shape * np.exp(hspec.shape * (1.0 - r)), 0.0)
    return base + (peak - base) * shape


def rainfall_field(graph: FloodGraph, hspec: HydrographSpec, rng: np.random.Generator) -> np.ndarray:
    """Rain volume (m3 per step) on every node and state."""
    steps = np.arange(hspec.num_steps, dtype=np.float64)
    centre = hspec.rain_peak_time * (hspec.num_steps - 1)
    half = max(0.5 * hspec.rain_duration * (hspec.num_steps - 1), 1e-9)
    pulse = np.clip(1.0 - np.abs(steps - centre) / half, 0.0, None)  # triangular storm
    intensity = hspec.rain_intensity / 1000.0 / 3600.0 * pulse  # m/s
    coords = np.asarray(graph.metadata.get("coordinates", np.zeros((graph.num_nodes, 2))), dtype=np.float64)
    span = np.ptp(coords, axis=0) + 1.0
    kx, ky = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / span
    px, py = rng.uniform(0, 2 * np.pi, size=2)
    pattern = 1.0 + hspec.rain_variability * np.cos(kx * coords[:, 0] + px) * np.cos(ky * coords[:, 1] + py)
    return intensity[:, None] * hspec.dt * graph.area[None, :] * pattern[None, :]


def generate_event(graph: FloodGraph, hspec: HydrographSpec | None = None, name: str = "") -> EventSeries:
    """Explicit storage routing of one flood event (float64).

    Each recorded step is split into ``substeps`` sub-steps. In a sub-step
    the flow on an edge follows a Manning-type law on the donor cell's depth
    and the water-surface slope, limited so the two cells cannot overshoot a
    level surface; each donor's total release is then scaled to at most
    ``release_fraction`` of its water and outlets drain ``outlet_fraction``
    of theirs. The net nodal flux is linear in the edge flows, so the step's
    mean flow reproduces the recorded volume change exactly:
    ``V[t+1] = V[t] + (inflow - outflow + boundary) * dt + rain[t]``.
    """
    hspec = hspec or HydrographSpec()
    hspec.check()
    rng = np.random.default_rng(hspec.seed)
    n, e, dt, steps = graph.num_nodes, graph.num_edges, float(hspec.dt), hspec.num_steps
    sub = int(hspec.substeps)
    h = dt / sub
    src, dst = graph.src, graph.dst
    area, bed = graph.area, graph.elevation
    face = graph.static_edge_features[:, graph.edge_feature_names.index("face_length")]
    dist = graph.static_edge_features[:, graph.edge_feature_names.index("centroid_distance")]

    degree = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
    # volume that levels the two water surfaces, shared among the busier endpoint's edges
    level_area = area[src] * area[dst] / (area[src] + area[dst]) / np.maximum(degree[src], degree[dst])

    q_in = inflow_hydrograph(hspec, float(area.sum()))
    rain = rainfall_field(graph, hspec, rng)
    outlets = graph.outflow_nodes
    outlet_w = graph.outflow_weights
    w_in, w_out = graph.boundary_weights()
    edge_index = graph.edge_index()

    volume = np.zeros((steps, n))
    flow = np.zeros((steps, e))
    q_out = np.zeros(steps)
    volume[0] = hspec.initial_depth * area

    def drain(v):
        return hspec.outlet_fraction / h * np.min(v[outlets] / outlet_w)

    for t in range(steps - 1):
        v = volume[t].copy()
        q_sum = np.zeros(e)
        drained = 0.0
        for _ in range(sub):
            depth = volume_to_depth(graph, v)
            dh = (bed + depth)[src] - (bed + depth)[dst]
            donor = np.where(dh > 0, src, dst)
            slope = np.abs(dh) / dist
            q_mag = face * depth[donor] ** (5.0 / 3.0) * np.sqrt(slope) / hspec.roughness
            q_mag = np.minimum(q_mag, np.abs(dh) * level_area / h)
            demand = np.bincount(donor, weights=q_mag * h, minlength=n)
            allowed = hspec.release_fraction * v
            scale = np.ones(n)
            over = demand > allowed
            scale[over] = allowed[over] / demand[over]
            q = np.sign(dh) * q_mag * scale[donor]
            out_rate = drain(v)
            inflow, outflow = compute_node_fluxes(edge_index, q, n)
            v = v + (inflow - outflow + q_in[t] * w_in - out_rate * w_out) * h + rain[t] / sub
            q_sum += q
            drained += out_rate
        q_bar = q_sum / sub
        q_out[t] = drained / sub
        inflow, outflow = compute_node_fluxes(edge_index, q_bar, n)
        nxt = volume[t] + (inflow - outflow + boundary_flux(graph, q_in[t], q_out[t])) * dt + rain[t]
        if np.any(nxt < 0):
            raise AssertionError(f"negative volume at step {t + 1} despite release cap")
        volume[t + 1] = nxt
        flow[t + 1] = q_bar
    q_out[-1] = drain(volume[-1])

    return EventSeries(node_volume=volume, edge_flow=flow, rainfall=rain, inflow_bc=q_in,
                       outflow_bc=q_out, dt=dt, name=name)


def sample_hydrograph_specs(count: int, base: HydrographSpec | None = None, seed: int = 0,
                            spread: float = 0.5) -> list[HydrographSpec]:
    """Per-event hydrograph variations around ``base``: peak, timing and storm vary."""
    base = base or HydrographSpec()
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        factor = float(rng.uniform(1 - spread, 1 + spread))
        specs.append(replace(
            base,
            inflow_peak=None if base.inflow_peak is None else base.inflow_peak * factor,
            peak_rate=base.peak_rate * factor,
            peak_time=float(np.clip(base.peak_time + rng.uniform(-0.1, 0.1), 0.05, 0.9)),
            shape=float(base.shape * rng.uniform(0.7, 1.3)),
            rain_intensity=float(base.rain_intensity * rng.uniform(0.0, 2.0)),
            rain_peak_time=float(np.clip(base.rain_peak_time + rng.uniform(-0.1, 0.1), 0.0, 1.0)),
            seed=int(rng.integers(0, 2 ** 31 - 1)),
        ))
    return specs


@dataclass
class ConservationReport:
    global_residual: np.ndarray  # (T,) |global residual| per step, m3
    local_residual: np.ndarray  # (T, N) |local residual|, m3
    scale: float  # max(1, peak node volume)

    @property
    def max_global(self) -> float:
        return float(self.global_residual.max(initial=0.0))

    @property
    def max_local(self) -> float:
        return float(self.local_residual.max(initial=0.0))

    @property
    def mean_local(self) -> float:
        return float(self.local_residual.mean()) if self.local_residual.size else 0.0

    @property
    def relative_max(self) -> float:
        return max(self.max_global, self.max_local) / self.scale


def conservation_report(graph: FloodGraph, event: EventSeries) -> ConservationReport:
    """Global and per-node mass-balance residuals of a recorded event (float64)."""
    v = np.asarray(event.node_volume, dtype=np.float64)
    q = np.asarray(event.edge_flow, dtype=np.float64)
    rain = np.asarray(event.rainfall, dtype=np.float64)
    q_in = np.asarray(event.inflow_bc, dtype=np.float64)
    q_out = np.asarray(event.outflow_bc, dtype=np.float64)
    dt = float(event.dt)
    dv = np.diff(v, axis=0)
    inflow, outflow = compute_node_fluxes(graph.edge_index(), q[1:], graph.num_nodes)
    b = boundary_flux(graph, q_in[:-1], q_out[:-1])
    local = dv - ((inflow - outflow + b) * dt + rain[:-1])
    glob = dv.sum(axis=1) - ((q_in[:-1] - q_out[:-1]) * dt + rain[:-1].sum(axis=1))
    scale = max(1.0, float(v.max(initial=0.0)))
    return ConservationReport(np.abs(glob), np.abs(local), scale)
