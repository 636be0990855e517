"""Checkpoint container: ``checkpoint.json`` plus little-endian weight blobs.

Blobs use the parameter dtype (float32 by default, float64 for double
models) so a save/load cycle is bit-exact. Optimizer moment estimates are
stored the same way, which makes a resumed run replay an uninterrupted one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _binio
from .data import NormStats
from .errors import FormatVersionError, ManifestError, SchemaMismatchError
from .model import DualFloodGNN, ModelConfig

CHECKPOINT_FORMAT = "dualflood-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1
KINDS = ("model", "oracle")
_TORCH_TO_BLOB = {torch.float32: "float32", torch.float64: "float64"}
_BLOB_TO_TORCH = {v: k for k, v in _TORCH_TO_BLOB.items()}


@dataclass
class Checkpoint:
    model_config: ModelConfig | None
    stats: NormStats
    state_dict: dict = field(default_factory=dict)
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)
    kind: str = "model"

    def build_model(self) -> DualFloodGNN:
        if self.kind != "model":
            raise SchemaMismatchError(f"checkpoint of kind {self.kind!r} has no network")
        dtype = next(iter(self.state_dict.values())).dtype
        model = DualFloodGNN(self.model_config).to(dtype)
        model.load_state_dict(self.state_dict)
        return model


def _blob_dtype(t: torch.Tensor) -> str:
    if t.dtype not in _TORCH_TO_BLOB:
        raise ValueError(f"cannot store tensor of dtype {t.dtype}")
    return _TORCH_TO_BLOB[t.dtype]


def _optimizer_entries(path: Path, opt_state: dict, names: list[str]) -> dict:
    """Adam state keyed by parameter name; per-parameter tensors become blobs."""
    state = {}
    for idx, s in opt_state["state"].items():
        name = names[idx]
        entry = {}
        for key, val in s.items():
            if isinstance(val, torch.Tensor) and val.dim() > 0:
                entry[key] = _binio.write_array(path, f"opt.{name}.{key}", val.detach().cpu().numpy(), _blob_dtype(val))
            else:
                entry[key] = {"scalar": float(val)}
        state[name] = entry
    groups = [{k: v for k, v in g.items() if k != "params"} for g in opt_state["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = list(g["betas"])
    return {"type": "adam", "state": state, "param_groups": groups}


def save_checkpoint(path, model: DualFloodGNN | None, stats: NormStats, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None, kind: str = "model") -> Path:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    weights = {}
    names = []
    if model is not None:
        for name, p in model.state_dict().items():
            names.append(name)
            weights[name] = _binio.write_array(path, f"w.{name}", p.detach().cpu().numpy(), _blob_dtype(p))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "byte_order": "little",
        "model_config": model.cfg.to_dict() if model is not None else None,
        "norm_stats": stats.to_dict(),
        "weights": weights,
        "optimizer": _optimizer_entries(path, optimizer.state_dict(), names) if optimizer is not None else None,
        "extra": extra or {},
    }
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2))
    return path


def read_checkpoint_manifest(path) -> dict:
    mf = Path(path) / "checkpoint.json"
    if not mf.is_file():
        raise ManifestError(f"no checkpoint.json in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise ManifestError(f"{mf} is not a {CHECKPOINT_FORMAT} manifest")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported checkpoint format version {manifest.get('format_version')!r} "
                                 f"(this build reads {CHECKPOINT_FORMAT_VERSION})")
    return manifest


def _tensor(path, entry) -> torch.Tensor:
    arr = _binio.read_array(path, entry)
    return torch.from_numpy(np.array(arr)).to(_BLOB_TO_TORCH[entry["dtype"]])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mf = read_checkpoint_manifest(path)
    try:
        stats = NormStats.from_dict(mf["norm_stats"])
        kind = mf.get("kind", "model")
        cfg = ModelConfig(**mf["model_config"]) if mf["model_config"] is not None else None
        state_dict = {name: _tensor(path, e) for name, e in mf["weights"].items()}
        opt = mf.get("optimizer")
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"checkpoint manifest missing field: {exc}") from exc
    if kind == "model":
        if cfg is None:
            raise ManifestError("model checkpoint without model_config")
        expected = DualFloodGNN(cfg).state_dict()
        if set(expected) != set(state_dict) or any(expected[k].shape != state_dict[k].shape for k in expected):
            raise SchemaMismatchError("checkpoint weights do not match the model configuration")
    optimizer = None
    if opt is not None:
        names = list(state_dict)
        state = {}
        for name, entry in opt["state"].items():
            state[names.index(name)] = {
                k: (torch.tensor(v["scalar"]) if "scalar" in v else _tensor(path, v)) for k, v in entry.items()}
        groups = []
        for g in opt["param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            g["params"] = list(range(len(names)))
            groups.append(g)
        optimizer = {"state": state, "param_groups": groups}
    return Checkpoint(cfg, stats, state_dict, optimizer, mf.get("extra", {}), kind)
