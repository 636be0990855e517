"""Training objectives: prediction MSE plus global and local mass-balance terms.

Prediction errors are measured in normalized target space. Both mass-balance
terms are evaluated in physical units (m3): volume changes, edge flows and
boundary fluxes are denormalized first.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .errors import ConfigError, DataError
from .graph import as_graph_tensors, compute_node_fluxes

PHYSICS_MODES = ("both", "global", "local", "none")
LOCAL_BOUNDARY_MODES = ("ghost_flux", "exclude_nodes")
LOCAL_REDUCTIONS = ("sum", "mean")


@dataclass
class LossWeights:
    node: float = 1.0
    edge: float = 1.0
    global_mass: float = 1e-3
    local_mass: float = 1e-3

    def __post_init__(self):
        if min(self.node, self.edge, self.global_mass, self.local_mass) < 0:
            raise ConfigError("loss weights must be non-negative")

    def with_physics(self, mode: str) -> "LossWeights":
        """Ablation preset: keep the prediction weights, zero the disabled physics terms."""
        if mode not in PHYSICS_MODES:
            raise ConfigError(f"physics mode must be one of {PHYSICS_MODES}")
        return LossWeights(
            self.node, self.edge,
            self.global_mass if mode in ("both", "global") else 0.0,
            self.local_mass if mode in ("both", "local") else 0.0,
        )


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    local_boundary: str = "ghost_flux"
    local_reduction: str = "sum"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.local_boundary not in LOCAL_BOUNDARY_MODES:
            raise ConfigError(f"local_boundary must be one of {LOCAL_BOUNDARY_MODES}")
        if self.local_reduction not in LOCAL_REDUCTIONS:
            raise ConfigError(f"local_reduction must be one of {LOCAL_REDUCTIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l_node: torch.Tensor
    l_edge: torch.Tensor
    l_pred: torch.Tensor
    l_global: torch.Tensor
    l_local: torch.Tensor
    l_physics: torch.Tensor
    l_total: torch.Tensor

    FIELDS = ("l_node", "l_edge", "l_pred", "l_global", "l_local", "l_physics", "l_total")

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.FIELDS}


def _finite(name, *tensors):
    for t in tensors:
        if isinstance(t, torch.Tensor) and not bool(torch.isfinite(t).all()):
            raise DataError(f"{name}: non-finite input")


def prediction_loss(dv_pred, dq_pred, dv_true, dq_true, weights: LossWeights):
    """Node and edge mean squared errors and their weighted sum.

    Leading batch dimensions are averaged as well.
    """
    if dv_pred.shape != dv_true.shape or dq_pred.shape != dq_true.shape:
        raise DataError(f"prediction/target shape mismatch: {tuple(dv_pred.shape)} vs {tuple(dv_true.shape)}, "
                        f"{tuple(dq_pred.shape)} vs {tuple(dq_true.shape)}")
    l_node = ((dv_true - dv_pred) ** 2).mean()
    l_edge = ((dq_true - dq_pred) ** 2).mean()
    return l_node, l_edge, weights.node * l_node + weights.edge * l_edge


def global_mass_residual(delta_volume, inflow_bc, outflow_bc, rainfall, dt):
    """Signed catchment balance ``sum(dV) - ((Qin - Qout) dt + sum(R))``, shape ``(...)``."""
    return delta_volume.sum(-1) - ((inflow_bc - outflow_bc) * dt + rainfall.sum(-1))


def global_mass_loss(delta_volume, inflow_bc, outflow_bc, rainfall, dt):
    """Absolute catchment mass-balance residual (m3), averaged over any batch dims.

    Only ``delta_volume`` carries gradient; the boundary series and rainfall
    are data.
    """
    _finite("global_mass_loss", delta_volume, inflow_bc, outflow_bc, rainfall)
    dt = torch.as_tensor(dt, dtype=delta_volume.dtype)
    inflow_bc = torch.as_tensor(inflow_bc, dtype=delta_volume.dtype)
    outflow_bc = torch.as_tensor(outflow_bc, dtype=delta_volume.dtype)
    return global_mass_residual(delta_volume, inflow_bc, outflow_bc, rainfall, dt).abs().mean()


def local_mass_residual(graph, v_prev, v_next, q_next, rainfall, inflow_bc, outflow_bc, dt):
    """Per-node signed balance ``dV - ((Q_in_i - Q_out_i + b_i) dt + R_i)``, shape ``(..., N)``.

    ``b_i`` is the boundary flux: the inflow split over inflow nodes minus the
    outflow drawn from outflow nodes.
    """
    gt = as_graph_tensors(graph, v_prev.dtype)
    dtype = v_prev.dtype
    dt = torch.as_tensor(dt, dtype=dtype)
    inflow_bc = torch.as_tensor(inflow_bc, dtype=dtype)
    outflow_bc = torch.as_tensor(outflow_bc, dtype=dtype)
    node_in, node_out = compute_node_fluxes(gt.edge_index, q_next, gt.num_nodes)
    b = inflow_bc[..., None] * gt.inflow_weight.to(dtype) - outflow_bc[..., None] * gt.outflow_weight.to(dtype)
    return (v_next - v_prev) - ((node_in - node_out + b) * dt[..., None] + rainfall)


def local_mass_loss(graph, v_prev, v_next, q_next, rainfall, inflow_bc, outflow_bc, dt,
                    boundary: str = "ghost_flux", reduction: str = "sum"):
    """Sum over nodes of the absolute local balance residual (m3), averaged over batch dims.

    ``boundary="exclude_nodes"`` drops inflow/outflow nodes from the sum;
    ``reduction="mean"`` divides by the number of nodes summed.
    """
    _finite("local_mass_loss", v_prev, v_next, q_next, rainfall, inflow_bc, outflow_bc)
    res = local_mass_residual(graph, v_prev, v_next, q_next, rainfall, inflow_bc, outflow_bc, dt).abs()
    if boundary == "exclude_nodes":
        keep = ~as_graph_tensors(graph, v_prev.dtype).boundary
        res = res[..., keep]
    per_sample = res.sum(-1)
    if reduction == "mean":
        per_sample = per_sample / max(res.shape[-1], 1)
    return per_sample.mean()


def total_loss(graph, pred, truth, states, forcing, cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of the prediction and physics terms for one step.

    ``pred``: dict with ``dv_norm``, ``dq_norm`` (normalized) and ``dv``
    (m3) from the model. ``truth``: ``dv_norm``, ``dq_norm``.
    ``states``: ``v_prev``, ``v_next`` (m3), ``q_next`` (m3/s).
    ``forcing``: ``rainfall`` (m3/step), ``inflow_bc``, ``outflow_bc`` (m3/s), ``dt`` (s).
    """
    w = cfg.weights
    l_node, l_edge, l_pred = prediction_loss(pred["dv_norm"], pred["dq_norm"],
                                             truth["dv_norm"], truth["dq_norm"], w)
    l_global = global_mass_loss(pred["dv"], forcing["inflow_bc"], forcing["outflow_bc"],
                                forcing["rainfall"], forcing["dt"])
    l_local = local_mass_loss(graph, states["v_prev"], states["v_next"], states["q_next"],
                              forcing["rainfall"], forcing["inflow_bc"], forcing["outflow_bc"], forcing["dt"],
                              cfg.local_boundary, cfg.local_reduction)
    l_physics = w.global_mass * l_global + w.local_mass * l_local
    return LossBreakdown(l_node, l_edge, l_pred, l_global, l_local, l_physics, l_pred + l_physics)


def rollout_loss(steps: list[LossBreakdown]) -> torch.Tensor:
    """Mean of the per-step total losses over the rollout horizon."""
    if not steps:
        raise DataError("rollout_loss needs at least one step")
    return torch.stack([s.l_total for s in steps]).mean()


def mean_breakdown(steps: list[LossBreakdown]) -> dict[str, float]:
    """Per-component mean over steps, as floats for logging."""
    if not steps:
        raise DataError("no steps to average")
    return {k: float(torch.stack([getattr(s, k).detach() for s in steps]).mean()) for k in LossBreakdown.FIELDS}
