"""Autoregressive inference and the metric suite.

NSE over a node-time matrix is computed per node (each column is a series)
and averaged over nodes whose observations vary; CSI pools every node-time
cell (micro aggregation). Both modes are recorded in ``metrics.json``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import EventSeries, FeatureLayout, NormStats
from .errors import DataError
from .graph import FloodGraph, GraphTensors, volume_to_depth
from .rollout import EventBank, Stepper, model_stepper, oracle_stepper, unroll

NSE_UNDEFINED = float("nan")
DEFAULT_THRESHOLDS = (0.05, 0.3)
REPORT_SCHEMA_VERSION = 1
VARIABLES = ("volume", "flow", "depth")


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return pred, true


def nse(pred, true) -> float:
    """``1 - SSE/SST`` of one series; :data:`NSE_UNDEFINED` (NaN) when observations are constant."""
    pred, true = _pair(pred, true)
    if pred.ndim != 1 or pred.size < 2:
        raise DataError("nse needs two equal-length series of length >= 2")
    sst = float(((true - true.mean()) ** 2).sum())
    if sst == 0.0:
        return NSE_UNDEFINED
    return 1.0 - float(((true - pred) ** 2).sum()) / sst


def nse_per_node(pred, true) -> tuple[float, int]:
    """Mean NSE over columns of ``(T, N)`` arrays and the number of constant columns skipped."""
    pred, true = _pair(pred, true)
    if pred.ndim != 2 or pred.shape[0] < 2:
        raise DataError("nse_per_node needs (T, N) arrays with T >= 2")
    sst = ((true - true.mean(0)) ** 2).sum(0)
    sse = ((true - pred) ** 2).sum(0)
    ok = sst > 0
    if not ok.any():
        return NSE_UNDEFINED, int(pred.shape[1])
    return float(np.mean(1.0 - sse[ok] / sst[ok])), int((~ok).sum())


def confusion(pred_depth, true_depth, tau: float) -> tuple[int, int, int, int]:
    """``(TP, FN, FP, TN)`` counts of cells with depth >= tau."""
    pred, true = _pair(pred_depth, true_depth)
    p, t = pred >= tau, true >= tau
    return int((p & t).sum()), int((~p & t).sum()), int((p & ~t).sum()), int((~p & ~t).sum())


def csi(pred_depth, true_depth, tau: float) -> float:
    """``TP / (TP + FN + FP)`` pooled over all cells; 1 when nothing is flooded or predicted."""
    tp, fn, fp, _ = confusion(pred_depth, true_depth, tau)
    denom = tp + fn + fp
    return 1.0 if denom == 0 else tp / denom


def csi_per_timestep(pred_depth, true_depth, tau: float) -> float:
    """Mean over rows of per-row CSI, the alternative to pooled aggregation."""
    pred, true = _pair(pred_depth, true_depth)
    return float(np.mean([csi(p, t, tau) for p, t in zip(pred, true)]))


def rmse(pred, true) -> float:
    pred, true = _pair(pred, true)
    return math.sqrt(float(((pred - true) ** 2).mean()))


def mae(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.abs(pred - true).mean())


def rmse_per_timestep(pred, true) -> np.ndarray:
    pred, true = _pair(pred, true)
    return np.sqrt(((pred - true) ** 2).reshape(pred.shape[0], -1).mean(1))


def max_depth_map(depth) -> np.ndarray:
    return np.asarray(depth).max(axis=0)


@dataclass
class RolloutResult:
    node_volume: np.ndarray  # (T+1, N) m3
    edge_flow: np.ndarray  # (T+1, E) m3/s
    depth: np.ndarray  # (T+1, N) m
    seconds: float
    start: int  # event index of step 0
    negative_volume_clamps: int = 0


def _rollout(stepper: Stepper, graph: FloodGraph, gt: GraphTensors, bank: EventBank, layout: FeatureLayout,
             stats: NormStats, horizon: int) -> RolloutResult:
    p = layout.history
    ev = bank.events[0]
    if horizon < 1 or p + horizon >= ev.num_steps:
        raise DataError(f"rollout of {horizon} steps from t={p} exceeds the event's {ev.num_steps} states")
    starts = torch.tensor([p])
    vols, flows = [bank.volume[p].numpy().copy()], [bank.flow[p].numpy().copy()]
    t0 = time.perf_counter()
    with torch.no_grad():
        for rec in unroll(stepper, gt, bank, starts, horizon, stats, layout):
            vols.append(rec.v_next[0].numpy().copy())
            flows.append(rec.q_next[0].numpy().copy())
    seconds = time.perf_counter() - t0
    volume = np.stack(vols).astype(np.float64)
    counter = {}
    depth = volume_to_depth(graph, volume, counter)
    return RolloutResult(volume, np.stack(flows).astype(np.float64), depth, seconds, p,
                         counter.get("negative_volume", 0))


def rollout(model, graph: FloodGraph, event: EventSeries, stats: NormStats, horizon: int,
            layout: FeatureLayout | None = None) -> RolloutResult:
    """``horizon`` chained steps from the first state with a full history window.

    Predictions feed back as dynamic inputs; rainfall and boundary series
    come from the event. Step 0 is the event's state at ``t = p``.
    """
    layout = layout or stats.layout
    dtype = next(model.parameters()).dtype
    gt = GraphTensors.from_graph(graph, dtype)
    bank = EventBank([event], dtype)
    model.eval()
    return _rollout(model_stepper(model, gt, stats), graph, gt, bank, layout, stats, horizon)


def oracle_rollout(graph: FloodGraph, event: EventSeries, stats: NormStats, horizon: int,
                   layout: FeatureLayout | None = None, dtype=torch.float64) -> RolloutResult:
    """Rollout driven by the recorded deltas (a perfect model)."""
    layout = layout or stats.layout
    gt = GraphTensors.from_graph(graph, dtype)
    bank = EventBank([event], dtype)
    return _rollout(oracle_stepper(bank, stats), graph, gt, bank, layout, stats, horizon)


@dataclass
class MetricsReport:
    rmse: dict
    mae: dict
    nse: dict
    csi: dict  # "tau" -> value
    per_timestep_rmse: dict  # variable -> (T+1,) array
    nse_skipped: dict = field(default_factory=dict)
    csi_per_timestep: dict = field(default_factory=dict)
    inference_seconds: float = 0.0

    def scalars(self) -> dict:
        out = {}
        for name in ("rmse", "mae", "nse"):
            out.update({f"{name}_{v}": x for v, x in getattr(self, name).items()})
        out.update({f"csi_{t}": x for t, x in self.csi.items()})
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "aggregation": {"nse": "per_node_mean", "csi": "micro"},
            "rmse": self.rmse, "mae": self.mae, "nse": _json_nan(self.nse), "csi": self.csi,
            "csi_per_timestep_mean": self.csi_per_timestep,
            "nse_constant_nodes_skipped": self.nse_skipped,
            "inference_seconds": self.inference_seconds,
        }


def _json_nan(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def truth_series(graph: FloodGraph, event: EventSeries, result: RolloutResult) -> dict:
    sl = slice(result.start, result.start + result.node_volume.shape[0])
    volume = np.asarray(event.node_volume[sl], dtype=np.float64)
    return {"volume": volume, "flow": np.asarray(event.edge_flow[sl], dtype=np.float64),
            "depth": volume_to_depth(graph, volume)}


def compute_metrics(result: RolloutResult, event: EventSeries, graph: FloodGraph,
                    thresholds=DEFAULT_THRESHOLDS) -> MetricsReport:
    true = truth_series(graph, event, result)
    pred = {"volume": result.node_volume, "flow": result.edge_flow, "depth": result.depth}
    nse_vals, skipped = {}, {}
    for v in VARIABLES:
        nse_vals[v], skipped[v] = nse_per_node(pred[v], true[v])
    return MetricsReport(
        rmse={v: rmse(pred[v], true[v]) for v in VARIABLES},
        mae={v: mae(pred[v], true[v]) for v in VARIABLES},
        nse=nse_vals,
        csi={str(t): csi(pred["depth"], true["depth"], t) for t in thresholds},
        per_timestep_rmse={v: rmse_per_timestep(pred[v], true[v]) for v in VARIABLES},
        nse_skipped=skipped,
        csi_per_timestep={str(t): csi_per_timestep(pred["depth"], true["depth"], t) for t in thresholds},
        inference_seconds=result.seconds,
    )


def write_csv(path, header: list[str], columns: list) -> None:
    """Columns of equal length; floats are written with full float64 precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))


def _plots(out: Path, report: MetricsReport, true_max, pred_max, graph: FloodGraph):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, v in zip(axes, VARIABLES):
        ax.plot(report.per_timestep_rmse[v])
        ax.set_title(f"RMSE {v}")
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out / "per_timestep_rmse.png", dpi=80)
    plt.close(fig)

    coords = graph.metadata.get("coordinates")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    diff = pred_max - true_max
    panels = [("true max depth (m)", true_max), ("predicted max depth (m)", pred_max), ("difference (m)", diff)]
    for ax, (title, vals) in zip(axes, panels):
        if coords is not None:
            xy = np.asarray(coords)
            sc = ax.scatter(xy[:, 0], xy[:, 1], c=vals, s=8, cmap="viridis" if title != "difference (m)" else "RdBu")
        else:
            sc = ax.scatter(np.arange(len(vals)), vals, c=vals, s=8)
        fig.colorbar(sc, ax=ax)
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out / "max_depth_map.png", dpi=80)
    plt.close(fig)


def event_report(result: RolloutResult, event: EventSeries, graph: FloodGraph, out_dir=None,
                 thresholds=DEFAULT_THRESHOLDS, plots: bool = True) -> MetricsReport:
    """Metrics plus, with ``out_dir``, ``metrics.json``, ``per_timestep_rmse.csv``,
    ``max_depth_map.csv`` (node, true, predicted, diff) and PNG plots."""
    report = compute_metrics(result, event, graph, thresholds)
    if out_dir is None:
        return report
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2))
    steps = np.arange(result.node_volume.shape[0])
    write_csv(out / "per_timestep_rmse.csv", ["step", "volume", "flow", "depth"],
              [steps] + [report.per_timestep_rmse[v] for v in VARIABLES])
    true_max = max_depth_map(truth_series(graph, event, result)["depth"])
    pred_max = max_depth_map(result.depth)
    write_csv(out / "max_depth_map.csv", ["node", "true", "predicted", "diff"],
              [np.arange(graph.num_nodes), true_max, pred_max, pred_max - true_max])
    if plots:
        _plots(out, report, true_max, pred_max, graph)
    return report


def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and population std across events of every scalar metric (undefined values skipped)."""
    if not reports:
        raise DataError("no reports to aggregate")
    keys = reports[0].scalars().keys()
    out = {}
    for k in keys:
        vals = np.array([r.scalars()[k] for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[k] = {"mean": float(vals.mean()) if vals.size else None,
                  "std": float(vals.std()) if vals.size else None, "count": int(vals.size)}
    return out
