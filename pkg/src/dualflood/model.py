"""Encode-process-decode GNN predicting node volume and edge flow changes.

All MLPs are bias-free with ReLU between layers and a linear last layer, so
an all-zero input always maps to an all-zero output. Tensors carry optional
leading batch dimensions: node arrays are ``(..., N, d)`` and edge arrays
``(..., E, d)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .data import NormStats, denormalize, normalize
from .errors import ConfigError, DataError

EDGE_UPDATES = ("residual", "overwrite")
NEIGHBORHOODS = ("in", "both")


@dataclass
class ModelConfig:
    node_in: int
    edge_in: int
    latent: int = 64
    gnn_layers: int = 4
    mlp_layers: int = 2
    history: int = 2
    edge_update: str = "residual"
    neighborhood: str = "in"
    seed: int = 0

    def __post_init__(self):
        if self.latent < 1 or self.gnn_layers < 1 or self.mlp_layers < 1:
            raise ConfigError("latent, gnn_layers and mlp_layers must all be >= 1")
        if self.node_in < 1 or self.edge_in < 1:
            raise ConfigError("input dimensions must be >= 1")
        if self.edge_update not in EDGE_UPDATES:
            raise ConfigError(f"edge_update must be one of {EDGE_UPDATES}")
        if self.neighborhood not in NEIGHBORHOODS:
            raise ConfigError(f"neighborhood must be one of {NEIGHBORHOODS}")

    def to_dict(self) -> dict:
        return asdict(self)


def mlp_parameter_count(n_in: int, hidden: int, n_out: int, layers: int) -> int:
    if layers == 1:
        return n_in * n_out
    return n_in * hidden + (layers - 2) * hidden * hidden + hidden * n_out


def parameter_count(cfg: ModelConfig) -> int:
    d, m = cfg.latent, cfg.mlp_layers
    per_layer = mlp_parameter_count(3 * d, d, d, m) + mlp_parameter_count(d, d, d, m)
    return (mlp_parameter_count(cfg.node_in, d, d, m) + mlp_parameter_count(cfg.edge_in, d, d, m)
            + cfg.gnn_layers * per_layer + 2 * mlp_parameter_count(d, d, 1, m))


class MLP(nn.Module):
    def __init__(self, n_in: int, hidden: int, n_out: int, layers: int):
        super().__init__()
        dims = [n_in] + [hidden] * (layers - 1) + [n_out]
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


def init_bound(fan_in: int) -> float:
    return math.sqrt(3.0 / fan_in)


class DualFloodGNN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, m = cfg.latent, cfg.mlp_layers
        self.node_encoder = MLP(cfg.node_in, d, d, m)
        self.edge_encoder = MLP(cfg.edge_in, d, d, m)
        self.message = nn.ModuleList(MLP(3 * d, d, d, m) for _ in range(cfg.gnn_layers))
        self.update = nn.ModuleList(MLP(d, d, d, m) for _ in range(cfg.gnn_layers))
        self.node_decoder = MLP(d, d, 1, m)
        self.edge_decoder = MLP(d, d, 1, m)
        self.reset_parameters(cfg.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        """Fan-in scaled uniform init, drawn in a fixed module order from ``seed``."""
        gen = torch.Generator().manual_seed(int(seed))
        for _, p in self.named_parameters():
            bound = init_bound(p.shape[1])
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(p.dtype))

    def encode(self, x, e):
        if x.shape[-1] != self.cfg.node_in or e.shape[-1] != self.cfg.edge_in:
            raise DataError(f"input widths ({x.shape[-1]}, {e.shape[-1]}) do not match model "
                            f"({self.cfg.node_in}, {self.cfg.edge_in})")
        return self.node_encoder(x), self.edge_encoder(e)

    def process_layer(self, layer: int, h, eps, edge_index):
        """One shared message-passing layer.

        For an edge ``j -> i`` the message ``m_ji = MLP(h_i | h_j | e_ij)`` is
        summed into node ``i`` (nodes without in-edges receive zeros) and the
        same message updates the edge embedding.
        """
        if h.shape[-1] != self.cfg.latent or eps.shape[-1] != self.cfg.latent:
            raise DataError("latent widths do not match the model")
        if eps.shape[-2] != edge_index.shape[1]:
            raise DataError(f"{eps.shape[-2]} edge embeddings for {edge_index.shape[1]} edges")
        src, dst = edge_index[0], edge_index[1]
        node_dim = h.dim() - 2
        h_src = h.index_select(node_dim, src)
        h_dst = h.index_select(node_dim, dst)
        msg = self.message[layer](torch.cat([h_dst, h_src, eps], dim=-1))
        agg = torch.zeros_like(h).index_add(node_dim, dst, msg)
        if self.cfg.neighborhood == "both":
            back = self.message[layer](torch.cat([h_src, h_dst, eps], dim=-1))
            agg = agg.index_add(node_dim, src, back)
        h_next = h + self.update[layer](agg)
        eps_next = eps + msg if self.cfg.edge_update == "residual" else msg
        return h_next, eps_next

    def decode(self, h, eps):
        """Normalized ``(delta_volume, delta_flow)`` of shapes ``(..., N)`` and ``(..., E)``."""
        if h.shape[-1] != self.cfg.latent or eps.shape[-1] != self.cfg.latent:
            raise DataError("latent widths do not match the model")
        return self.node_decoder(h)[..., 0], self.edge_decoder(eps)[..., 0]

    def forward(self, x, e, edge_index):
        h, eps = self.encode(x, e)
        for layer in range(self.cfg.gnn_layers):
            h, eps = self.process_layer(layer, h, eps, edge_index)
        return self.decode(h, eps)


def init_model(cfg: ModelConfig, dtype=torch.float32) -> DualFloodGNN:
    return DualFloodGNN(cfg).to(dtype)


@dataclass
class StepOutput:
    delta_volume: torch.Tensor  # m3
    delta_flow: torch.Tensor  # m3/s
    delta_volume_norm: torch.Tensor
    delta_flow_norm: torch.Tensor


def forward_step(model: nn.Module, edge_index, x_raw, e_raw, stats: NormStats) -> StepOutput:
    """Normalize raw input windows, run the network and return physical deltas."""
    x = normalize(x_raw, stats.node)
    e = normalize(e_raw, stats.edge)
    dv_n, dq_n = model(x, e, edge_index)
    return StepOutput(denormalize(dv_n, stats.delta_volume), denormalize(dq_n, stats.delta_flow), dv_n, dq_n)

