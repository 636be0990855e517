"""Autoregressive unrolling shared by training and inference.

Predicted volumes and flows are written back into the history window while
rainfall and boundary series always come from the event (known forcing).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch

from .data import EventSeries, FeatureLayout, NormStats, normalize, stack_edge_window, stack_node_window
from .errors import DataError
from .graph import GraphTensors
from .model import StepOutput, forward_step

Stepper = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], StepOutput]


class EventBank:
    """Events concatenated along time, in one dtype, so windows batch across events."""

    def __init__(self, events: list[EventSeries], dtype=torch.float32):
        if not events:
            raise DataError("EventBank needs at least one event")
        self.events = events
        self.dtype = dtype
        lengths = [ev.num_steps for ev in events]
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        self.lengths = np.asarray(lengths, dtype=np.int64)

        def cat(attr):
            return torch.tensor(np.concatenate([np.asarray(getattr(ev, attr), dtype=np.float64) for ev in events]),
                                dtype=dtype)

        self.volume = cat("node_volume")
        self.flow = cat("edge_flow")
        self.rainfall = cat("rainfall")
        self.inflow_bc = cat("inflow_bc")
        self.outflow_bc = cat("outflow_bc")
        self.dt = torch.tensor(np.concatenate([np.full(n, ev.dt) for n, ev in zip(lengths, events)]), dtype=dtype)

    def index(self, event: int, t: int) -> int:
        return int(self.offsets[event] + t)

    def windows(self, history: int, horizon: int) -> list[tuple[int, int]]:
        """All ``(event, t)`` starts with ``history`` past states and ``horizon`` future ones."""
        out = []
        for k, n in enumerate(self.lengths):
            out += [(k, t) for t in range(history, int(n) - horizon)]
        return out

    def starts(self, windows) -> torch.Tensor:
        return torch.tensor([self.index(k, t) for k, t in windows], dtype=torch.long)


@dataclass
class StepRecord:
    t: torch.Tensor  # (B,) bank indices of the step's start state
    out: StepOutput
    v_prev: torch.Tensor
    v_next: torch.Tensor
    q_next: torch.Tensor
    truth: dict
    forcing: dict


def model_stepper(model, graph: GraphTensors, stats: NormStats) -> Stepper:
    def step(x, e, t):
        return forward_step(model, graph.edge_index, x, e, stats)
    return step


def oracle_stepper(bank: EventBank, stats: NormStats) -> Stepper:
    """Returns the recorded deltas; a perfect model for pipeline checks."""
    def step(x, e, t):
        dv = bank.volume[t + 1] - bank.volume[t]
        dq = bank.flow[t + 1] - bank.flow[t]
        return StepOutput(dv, dq, normalize(dv, stats.delta_volume), normalize(dq, stats.delta_flow))
    return step


def unroll(stepper: Stepper, graph: GraphTensors, bank: EventBank, starts: torch.Tensor, horizon: int,
           stats: NormStats, layout: FeatureLayout) -> Iterator[StepRecord]:
    """Yield one record per autoregressive step for a batch of window starts."""
    p = layout.history
    lags = torch.arange(-p, 1)
    total = bank.volume.shape[0]
    if int(starts.max()) + horizon >= total + 1 or int(starts.min()) - p < 0:
        raise DataError("rollout window leaves the event bank")
    idx = starts[:, None] + lags
    v_hist = bank.volume[idx]
    q_hist = bank.flow[idx]
    for s in range(horizon):
        t = starts + s
        idx = t[:, None] + lags
        x = stack_node_window(graph.static_node, v_hist, bank.rainfall[idx], bank.inflow_bc[idx],
                              bank.outflow_bc[idx], layout.boundary_features)
        e = stack_edge_window(graph.static_edge, q_hist)
        out = stepper(x, e, t)
        v_prev = v_hist[:, -1]
        v_next = v_prev + out.delta_volume
        q_next = q_hist[:, -1] + out.delta_flow
        truth = {
            "dv_norm": normalize(bank.volume[t + 1] - bank.volume[t], stats.delta_volume),
            "dq_norm": normalize(bank.flow[t + 1] - bank.flow[t], stats.delta_flow),
        }
        forcing = {"rainfall": bank.rainfall[t], "inflow_bc": bank.inflow_bc[t],
                   "outflow_bc": bank.outflow_bc[t], "dt": bank.dt[t]}
        yield StepRecord(t, out, v_prev, v_next, q_next, truth, forcing)
        v_hist = torch.cat([v_hist[:, 1:], v_next[:, None]], dim=1)
        q_hist = torch.cat([q_hist[:, 1:], q_next[:, None]], dim=1)
