import numpy as np
import pytest
import torch

from dualflood.graph import FloodGraph, prism_depth_curve
from dualflood.synthetic import CatchmentSpec, HydrographSpec, generate_catchment, generate_event

torch.set_num_threads(1)


def make_graph(edges, num_nodes, inflow=(0,), outflow=None, area=100.0, elevation=None):
    """Hand-built graph with prism cells; outflow defaults to the last node."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    area = np.full(num_nodes, float(area))
    elevation = np.arange(num_nodes, 0, -1, dtype=float) if elevation is None else np.asarray(elevation, float)
    vols, depths = prism_depth_curve(area)
    rng = np.random.default_rng(len(edges))
    return FloodGraph(
        edges=edges,
        static_node_features=np.stack([area, elevation], axis=1),
        static_edge_features=rng.uniform(1.0, 10.0, size=(len(edges), 3)),
        inflow_nodes=list(inflow),
        outflow_nodes=[num_nodes - 1] if outflow is None else list(outflow),
        depth_volumes=vols,
        depth_values=depths,
    )


def random_graph(rng, num_nodes, num_edges):
    """Random simple directed graph (no self-loops, no duplicate pairs)."""
    pairs = [(a, b) for a in range(num_nodes) for b in range(num_nodes) if a != b]
    pick = rng.choice(len(pairs), size=num_edges, replace=False)
    return make_graph([pairs[k] for k in pick], num_nodes)


@pytest.fixture
def path3():
    return make_graph([(0, 1), (1, 2)], 3)


@pytest.fixture(scope="session")
def small_catchment():
    return generate_catchment(CatchmentSpec(num_nodes=12, seed=3))


@pytest.fixture(scope="session")
def small_event(small_catchment):
    return generate_event(small_catchment, HydrographSpec(num_steps=20, inflow_peak=3.0, rain_intensity=20.0,
                                                          seed=5), "small")


def manual_window(graph, static_rows, hist_v, hist_q, event, t, p):
    """Hand concatenation of the node/edge rows for the window ending at t."""
    x = [static_rows]
    for k, s in enumerate(range(t - p, t + 1)):
        n = graph.num_nodes
        x.append(np.stack([hist_v[k], event.rainfall[s], np.full(n, event.inflow_bc[s]),
                           np.full(n, event.outflow_bc[s])], axis=1))
    e = np.concatenate([graph.static_edge_features, np.stack(hist_q, axis=1)], axis=1)
    return torch.tensor(np.concatenate(x, axis=1)), torch.tensor(e)
