import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualflood.errors import DataError
from dualflood.graph import (FloodGraph, GraphTensors, boundary_flux, boundary_mask, compute_node_fluxes,
                             prism_depth_curve, validate_graph, volume_to_depth)

from conftest import make_graph, random_graph


def enumerate_fluxes(edges, q, n):
    """Both directed copies of every edge, ReLU-clipped, accumulated one by one."""
    inflow, outflow = np.zeros(n), np.zeros(n)
    for (a, b), qk in zip(edges, q):
        for s, d, w in ((a, b, max(qk, 0.0)), (b, a, max(-qk, 0.0))):
            inflow[d] += w
            outflow[s] += w
    return inflow, outflow


class TestValidateGraph:
    def test_valid_path_graph(self, path3):
        report = validate_graph(path3)
        assert report.ok and report.violations == []

    def test_self_loop(self):
        report = validate_graph(make_graph([(0, 0), (0, 1), (1, 2)], 3))
        assert "self-loop at node 0" in report.violations

    def test_endpoint_out_of_range(self):
        report = validate_graph(make_graph([(0, 5), (0, 1), (1, 2)], 3))
        assert any(v.startswith("endpoint out of range") for v in report.violations)

    def test_duplicate_edge(self):
        report = validate_graph(make_graph([(0, 1), (0, 1), (1, 2)], 3))
        assert any("duplicate edge (0, 1)" in v for v in report.violations)

    def test_boundary_overlap_and_empty(self):
        g = make_graph([(0, 1), (1, 2)], 3, inflow=(0,), outflow=(0,))
        assert any("both inflow and outflow" in v for v in validate_graph(g).violations)
        g = make_graph([(0, 1), (1, 2)], 3, inflow=())
        assert "inflow_nodes is empty" in validate_graph(g).violations

    def test_area_and_depth_curve(self):
        g = make_graph([(0, 1), (1, 2)], 3)
        bad = FloodGraph(g.edges, np.array([[100.0, 1], [0.0, 1], [100.0, 1]]), g.static_edge_features,
                         g.inflow_nodes, g.outflow_nodes,
                         np.array([[0.0, 100], [0.0, 100], [1.0, 100]]),
                         np.array([[0.0, 1], [0.0, 1], [0.0, 1]]))
        v = validate_graph(bad).violations
        assert "non-positive cell area at node 1" in v
        assert "depth curve at node 2 does not map 0 to 0" in v

    def test_all_violations_listed(self):
        report = validate_graph(make_graph([(0, 0), (1, 1), (0, 7)], 3))
        assert len(report.violations) == 3
        assert not report


class TestNodeFluxes:
    def test_single_edge_positive(self):
        inflow, outflow = compute_node_fluxes(torch.tensor([[0], [1]]), torch.tensor([3.0]), 2)
        assert inflow.tolist() == [0.0, 3.0] and outflow.tolist() == [3.0, 0.0]

    def test_single_edge_negative(self):
        inflow, outflow = compute_node_fluxes(torch.tensor([[0], [1]]), torch.tensor([-3.0]), 2)
        assert inflow.tolist() == [3.0, 0.0] and outflow.tolist() == [0.0, 3.0]

    def test_triangle_matches_enumeration(self):
        edges = [(0, 1), (1, 2), (2, 0)]
        q = np.array([2.0, -1.0, 4.0])
        g = make_graph(edges, 3, outflow=(1,))
        inflow, outflow = compute_node_fluxes(g, q)
        exp_in, exp_out = enumerate_fluxes(edges, q, 3)
        np.testing.assert_array_equal(inflow, exp_in)
        np.testing.assert_array_equal(outflow, exp_out)
        assert exp_in.tolist() == [4.0, 3.0, 0.0] and exp_out.tolist() == [2.0, 0.0, 5.0]

    def test_zero_flow(self, path3):
        inflow, outflow = compute_node_fluxes(path3, np.zeros(2))
        assert not inflow.any() and not outflow.any()

    def test_batch_dims(self, path3):
        q = np.random.default_rng(0).normal(size=(4, 5, 2))
        inflow, _ = compute_node_fluxes(path3, q)
        assert inflow.shape == (4, 5, 3)
        np.testing.assert_array_equal(inflow[2, 3], compute_node_fluxes(path3, q[2, 3])[0])

    def test_rejects_bad_input(self, path3):
        with pytest.raises(DataError):
            compute_node_fluxes(path3, np.zeros(3))
        with pytest.raises(DataError):
            compute_node_fluxes(path3, np.array([1.0, np.nan]))

    def test_gradient_and_zero_subgradient(self):
        ei = torch.tensor([[0, 1], [1, 2]])
        q = torch.tensor([0.0, -2.0], dtype=torch.float64, requires_grad=True)
        inflow, outflow = compute_node_fluxes(ei, q, 3)
        (inflow * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum().backward()
        # flow 1->2 reversed: enters node 1 (weight 2)
        assert q.grad.tolist() == [0.0, -2.0]

    def test_gradcheck_away_from_kinks(self):
        rng = np.random.default_rng(1)
        g = random_graph(rng, 6, 10)
        q = torch.tensor(rng.choice([-1, 1], 10) * rng.uniform(0.5, 2.0, 10), requires_grad=True)
        w = torch.tensor(rng.normal(size=(2, 6)))

        def f(qq):
            i, o = compute_node_fluxes(g.edge_index(), qq, 6)
            return (w[0] * i + w[1] * o ** 2).sum()

        assert torch.autograd.gradcheck(f, (q,), eps=1e-6, atol=1e-8, rtol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 9), st.data())
    def test_conservation_and_negation(self, n, data):
        rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 31)))
        e = data.draw(st.integers(1, n * (n - 1)))
        g = random_graph(rng, n, e)
        q = rng.normal(size=e) * 10
        inflow, outflow = compute_node_fluxes(g, q)
        total = np.abs(q).sum()
        assert inflow.sum() == pytest.approx(total, rel=1e-12)
        assert outflow.sum() == pytest.approx(total, rel=1e-12)
        assert (inflow >= 0).all() and (outflow >= 0).all()
        neg_in, neg_out = compute_node_fluxes(g, -q)
        np.testing.assert_array_equal(neg_in, outflow)
        np.testing.assert_array_equal(neg_out, inflow)

    def test_net_flux_linear_in_flow(self):
        rng = np.random.default_rng(2)
        g = random_graph(rng, 7, 12)
        q = rng.normal(size=12)
        i, o = compute_node_fluxes(g, q)
        net = np.zeros(7)
        np.add.at(net, g.dst, q)
        np.add.at(net, g.src, -q)
        np.testing.assert_allclose(i - o, net, atol=1e-12)


class TestDepthCurves:
    def test_prism(self):
        g = make_graph([(0, 1)], 2)
        np.testing.assert_allclose(volume_to_depth(g, np.array([50.0, 0.0])), [0.5, 0.0])

    def test_extrapolation_past_last_knot(self):
        g = make_graph([(0, 1)], 2)
        assert volume_to_depth(g, np.array([250.0, 100.0]))[0] == pytest.approx(2.5)

    def test_negative_volume_clamped_and_counted(self):
        g = make_graph([(0, 1)], 2)
        counter = {}
        d = volume_to_depth(g, np.array([[-5.0, 10.0], [-1.0, -2.0]]), counter)
        assert d[0, 0] == 0 and d[1].tolist() == [0, 0]
        assert counter["negative_volume"] == 3

    def test_multi_knot_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        n, k = 5, 4
        vk = np.concatenate([np.zeros((n, 1)), np.cumsum(rng.uniform(1, 50, (n, k - 1)), axis=1)], axis=1)
        dk = np.concatenate([np.zeros((n, 1)), np.cumsum(rng.uniform(0, 1, (n, k - 1)), axis=1)], axis=1)
        base = make_graph([(0, 1), (1, 2), (2, 3), (3, 4)], n)
        g = FloodGraph(base.edges, base.static_node_features, base.static_edge_features, base.inflow_nodes,
                       base.outflow_nodes, vk, dk)
        v = rng.uniform(0, 200, (7, n))
        out = volume_to_depth(g, v)
        for t in range(7):
            for i in range(n):
                if v[t, i] <= vk[i, -1]:
                    expect = np.interp(v[t, i], vk[i], dk[i])
                else:
                    expect = dk[i, -1] + (dk[i, -1] - dk[i, -2]) / (vk[i, -1] - vk[i, -2]) * (v[t, i] - vk[i, -1])
                assert out[t, i] == pytest.approx(expect, abs=1e-10)

    def test_monotone(self, small_catchment):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1e4, (10, small_catchment.num_nodes))
        b = a + rng.uniform(0, 1e3, a.shape)
        assert (volume_to_depth(small_catchment, b) >= volume_to_depth(small_catchment, a)).all()

    def test_prism_curve_knots(self):
        vols, depths = prism_depth_curve(np.array([4.0]), 2.0)
        assert vols.tolist() == [[0.0, 8.0]] and depths.tolist() == [[0.0, 2.0]]


def test_graph_is_immutable(path3):
    with pytest.raises(ValueError):
        path3.edges[0, 0] = 2
    with pytest.raises(AttributeError):
        path3.edges = None


def test_boundary_flux_and_tensors():
    g = make_graph([(0, 1), (1, 2), (2, 3)], 4, inflow=(0, 1), outflow=(3,))
    b = boundary_flux(g, np.array([4.0]), np.array([1.0]))
    np.testing.assert_allclose(b, [[2.0, 2.0, 0.0, -1.0]])
    tb = boundary_flux(g, torch.tensor([4.0]), torch.tensor([1.0]))
    np.testing.assert_allclose(tb.numpy(), b)
    gt = GraphTensors.from_graph(g, torch.float64)
    assert gt.boundary.tolist() == boundary_mask(g).tolist() == [True, True, False, True]
    assert gt.edge_index.shape == (2, 3) and gt.static_node.dtype == torch.float64
