"""Autoregressive multi-step training with a validation-driven curriculum.

The rollout horizon ``o`` starts at 1 and grows by ``C`` (capped at ``O``)
each time validation loss at the current horizon stops improving for
``patience`` epochs; the learning rate is ``lr0 * gamma**stage``. Training
ends when the loss converges at ``o = O`` or an epoch cap fires.

Window order is a pure function of ``(seed, epoch)``, so a run resumed from
its ``last`` checkpoint replays the uninterrupted run exactly.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import EventSeries, FeatureLayout, NormStats, fit_normalizer
from .errors import ConfigError, DivergenceError, SchemaMismatchError
from .graph import FloodGraph, GraphTensors
from .losses import LossBreakdown, LossConfig, mean_breakdown, rollout_loss, total_loss
from .model import DualFloodGNN, ModelConfig, init_model
from .rollout import EventBank, Stepper, model_stepper, unroll

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    target_horizon: int = 4  # O
    curriculum_step: int = 1  # C
    lr_decay: float = 0.5  # gamma
    lr: float = 3e-4
    patience: int = 10
    min_delta: float = 1e-4  # relative improvement needed to reset patience
    max_epochs_per_stage: int = 200
    max_epochs: int = 1000
    batch_size: int = 8  # rollout windows per optimizer step
    val_batch_size: int = 64
    max_val_windows: int | None = None  # evenly strided subset when set
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = None
    reset_optimizer_on_stage: bool = False
    boundary_features: bool = True
    physics: str = "both"
    dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(self.betas)
        if self.target_horizon < 1:
            raise ConfigError("target_horizon (O) must be >= 1")
        if not 1 <= self.curriculum_step <= self.target_horizon:
            raise ConfigError("curriculum_step (C) must satisfy 1 <= C <= O")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.patience < 1 or self.max_epochs_per_stage < 1 or self.max_epochs < 1:
            raise ConfigError("patience and epoch caps must be >= 1")
        if self.batch_size < 1 or self.val_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr <= 0 or self.min_delta < 0:
            raise ConfigError("lr must be positive and min_delta non-negative")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    @property
    def effective_loss(self) -> LossConfig:
        """Loss configuration with the physics preset applied to the weights."""
        return replace(self.loss, weights=self.loss.weights.with_physics(self.physics))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CurriculumState:
    horizon: int = 1
    stage: int = 0
    best: float = math.inf
    since_improvement: int = 0
    lr: float = 3e-4
    epochs_in_stage: int = 0
    done: bool = False
    reason: str = ""

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "CurriculumState":
        return cls(horizon=1, lr=cfg.lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumState":
        d = dict(d)
        d["best"] = math.inf if d.get("best") is None else d["best"]
        return cls(**d)


def curriculum_step(cur: CurriculumState, val_loss: float, cfg: TrainConfig) -> CurriculumState:
    """Advance the curriculum after one epoch's validation loss at horizon ``cur.horizon``."""
    nxt = replace(cur, epochs_in_stage=cur.epochs_in_stage + 1, reason="")
    if math.isinf(cur.best) or val_loss < cur.best - cfg.min_delta * abs(cur.best):
        nxt.best = float(val_loss)
        nxt.since_improvement = 0
    else:
        nxt.since_improvement += 1
    converged = nxt.since_improvement >= cfg.patience
    capped = nxt.epochs_in_stage >= cfg.max_epochs_per_stage
    if not (converged or capped):
        return nxt
    why = "converged" if converged else "stage_epoch_cap"
    if cur.horizon >= cfg.target_horizon:
        nxt.done = True
        nxt.reason = why
        return nxt
    stage = cur.stage + 1
    return CurriculumState(horizon=min(cur.horizon + cfg.curriculum_step, cfg.target_horizon), stage=stage,
                           lr=cfg.lr * cfg.lr_decay ** stage, reason=f"advance:{why}")


def training_rollout(stepper: Stepper, graph: GraphTensors, bank: EventBank, starts: torch.Tensor, horizon: int,
                     stats: NormStats, layout: FeatureLayout, loss_cfg: LossConfig):
    """Unroll ``horizon`` steps from each start and return the mean per-step total loss.

    Gradients flow through the whole chain: every step's inputs contain the
    previous step's predictions.
    """
    steps: list[LossBreakdown] = []
    for k, rec in enumerate(unroll(stepper, graph, bank, starts, horizon, stats, layout)):
        if not (bool(torch.isfinite(rec.out.delta_volume).all()) and bool(torch.isfinite(rec.out.delta_flow).all())):
            raise DivergenceError(f"non-finite prediction at rollout step {k + 1} of {horizon}")
        pred = {"dv_norm": rec.out.delta_volume_norm, "dq_norm": rec.out.delta_flow_norm, "dv": rec.out.delta_volume}
        states = {"v_prev": rec.v_prev, "v_next": rec.v_next, "q_next": rec.q_next}
        steps.append(total_loss(graph, pred, rec.truth, states, rec.forcing, loss_cfg))
    return rollout_loss(steps), steps


def epoch_order(num_windows: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(num_windows)


LOG_COMPONENTS = LossBreakdown.FIELDS


def _log_columns() -> list[str]:
    return (["epoch", "stage", "o", "lr"] + [f"train_{k}" for k in LOG_COMPONENTS]
            + [f"val_{k}" for k in LOG_COMPONENTS] + ["event"])


def _write_log(path: Path, history: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_log_columns())
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in list(row):
            if k in ("epoch", "stage", "o"):
                row[k] = int(row[k])
            elif k != "event":
                row[k] = float(row[k])
    return rows


@dataclass
class TrainResult:
    model: DualFloodGNN
    stats: NormStats
    history: list[dict]
    curriculum: CurriculumState
    stop_reason: str


class Trainer:
    def __init__(self, graph: FloodGraph, train_events: list[EventSeries], val_events: list[EventSeries],
                 model_cfg: ModelConfig, cfg: TrainConfig, stats: NormStats | None = None):
        if not train_events or not val_events:
            raise ConfigError("training needs non-empty train and validation splits")
        self.cfg = cfg
        self.dtype = DTYPES[cfg.dtype]
        self.layout = FeatureLayout.for_graph(graph, model_cfg.history, cfg.boundary_features)
        if (model_cfg.node_in, model_cfg.edge_in) != (self.layout.node_dim, self.layout.edge_dim):
            raise SchemaMismatchError(
                f"model input widths ({model_cfg.node_in}, {model_cfg.edge_in}) do not match the feature layout "
                f"({self.layout.node_dim}, {self.layout.edge_dim})")
        self.stats = stats or fit_normalizer(train_events, graph, model_cfg.history, cfg.boundary_features)
        self.graph = GraphTensors.from_graph(graph, self.dtype)
        self.train_bank = EventBank(train_events, self.dtype)
        self.val_bank = EventBank(val_events, self.dtype)
        self.loss_cfg = cfg.effective_loss
        self.model = init_model(model_cfg, self.dtype)
        self.optimizer = self._new_optimizer(cfg.lr)
        self.curriculum = CurriculumState.initial(cfg)
        self.history: list[dict] = []
        self.epoch = 0
        self.improved = False

    def _new_optimizer(self, lr):
        return torch.optim.Adam(self.model.parameters(), lr=lr, betas=self.cfg.betas, eps=self.cfg.eps)

    def _set_lr(self, lr):
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def _check_finite(self, loss, steps, where):
        if not bool(torch.isfinite(loss)):
            parts = {k: v for k, v in mean_breakdown(steps).items()}
            raise DivergenceError(f"non-finite loss at epoch {self.epoch + 1} ({where}), "
                                  f"horizon {self.curriculum.horizon}: {parts}")

    def train_epoch(self) -> dict:
        o = self.curriculum.horizon
        windows = self.train_bank.windows(self.model.cfg.history, o)
        if not windows:
            raise ConfigError(f"training events are too short for horizon {o}")
        order = epoch_order(len(windows), self.cfg.seed, self.epoch)
        starts_all = self.train_bank.starts([windows[i] for i in order])
        stepper = model_stepper(self.model, self.graph, self.stats)
        sums = dict.fromkeys(LOG_COMPONENTS, 0.0)
        self.model.train()
        for b in range(0, len(starts_all), self.cfg.batch_size):
            starts = starts_all[b:b + self.cfg.batch_size]
            self.optimizer.zero_grad(set_to_none=False)
            loss, steps = training_rollout(stepper, self.graph, self.train_bank, starts, o, self.stats,
                                           self.layout, self.loss_cfg)
            self._check_finite(loss, steps, f"batch {b // self.cfg.batch_size}")
            loss.backward()
            if self.cfg.clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.clip_norm)
            self.optimizer.step()
            for k, v in mean_breakdown(steps).items():
                sums[k] += v * len(starts)
        return {k: v / len(starts_all) for k, v in sums.items()}

    @torch.no_grad()
    def validate(self, horizon: int | None = None) -> dict:
        o = horizon or self.curriculum.horizon
        windows = self.val_bank.windows(self.model.cfg.history, o)
        if not windows:
            raise ConfigError(f"validation events are too short for horizon {o}")
        if self.cfg.max_val_windows and len(windows) > self.cfg.max_val_windows:
            pick = np.linspace(0, len(windows) - 1, self.cfg.max_val_windows).round().astype(int)
            windows = [windows[i] for i in pick]
        starts_all = self.val_bank.starts(windows)
        stepper = model_stepper(self.model, self.graph, self.stats)
        sums = dict.fromkeys(LOG_COMPONENTS, 0.0)
        self.model.eval()
        for b in range(0, len(starts_all), self.cfg.val_batch_size):
            starts = starts_all[b:b + self.cfg.val_batch_size]
            loss, steps = training_rollout(stepper, self.graph, self.val_bank, starts, o, self.stats,
                                           self.layout, self.loss_cfg)
            self._check_finite(loss, steps, "validation")
            for k, v in mean_breakdown(steps).items():
                sums[k] += v * len(starts)
        return {k: v / len(starts_all) for k, v in sums.items()}

    def run_epoch(self) -> dict:
        cur = self.curriculum
        self._set_lr(cur.lr)
        tr = self.train_epoch()
        va = self.validate()
        row = {"epoch": self.epoch + 1, "stage": cur.stage, "o": cur.horizon, "lr": cur.lr}
        row.update({f"train_{k}": v for k, v in tr.items()})
        row.update({f"val_{k}": v for k, v in va.items()})
        nxt = curriculum_step(cur, va["l_total"], self.cfg)
        row["event"] = nxt.reason
        self.history.append(row)
        self.epoch += 1
        self.improved = nxt.since_improvement == 0 and not nxt.reason.startswith("advance")
        if nxt.stage != cur.stage and self.cfg.reset_optimizer_on_stage:
            self.optimizer = self._new_optimizer(nxt.lr)
        self.curriculum = nxt
        return row

    def extra_state(self) -> dict:
        return {"epoch": self.epoch, "curriculum": self.curriculum.to_dict(), "history": self.history,
                "train_config": self.cfg.to_dict(), "layout": self.layout.to_dict()}

    def save(self, path):
        save_checkpoint(path, self.model, self.stats, self.optimizer, self.extra_state())

    def restore(self, path):
        ck = load_checkpoint(path)
        if ck.model_config.to_dict() != self.model.cfg.to_dict():
            raise SchemaMismatchError("checkpoint model configuration differs from the requested one")
        self.model.load_state_dict(ck.state_dict)
        self.stats = ck.stats
        if ck.optimizer is not None:
            self.optimizer.load_state_dict(ck.optimizer)
        self.epoch = int(ck.extra["epoch"])
        self.curriculum = CurriculumState.from_dict(ck.extra["curriculum"])
        self.history = list(ck.extra["history"])


def train(graph: FloodGraph, train_events: list[EventSeries], val_events: list[EventSeries], model_cfg: ModelConfig,
          cfg: TrainConfig, out_dir=None, resume: bool = False, stats: NormStats | None = None,
          stop_after: int | None = None, verbose: bool = False) -> TrainResult:
    """Train to curriculum convergence; returns the final model and per-epoch history.

    With ``out_dir`` the resolved config, a CSV log and checkpoints
    (``last`` every epoch, ``best`` per stage, ``stage_<k>`` at each stage
    end) are written there. ``resume`` continues from ``out_dir/checkpoints/last``.
    ``stop_after`` halts after that many total epochs (an interruption, not
    a convergence criterion).
    """
    tr = Trainer(graph, train_events, val_events, model_cfg, cfg, stats)
    ck_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    if resume:
        if ck_dir is None or not (ck_dir / "last").is_dir():
            raise ConfigError("resume requested but no checkpoints/last in the output directory")
        tr.restore(ck_dir / "last")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        resolved = {"train": cfg.to_dict(), "model": model_cfg.to_dict(), "layout": tr.layout.to_dict(),
                    "effective_loss": tr.loss_cfg.to_dict()}
        (Path(out_dir) / "config.json").write_text(json.dumps(resolved, indent=2))
    stop_reason = tr.curriculum.reason if tr.curriculum.done else ""
    while not tr.curriculum.done:
        if tr.epoch >= cfg.max_epochs:
            stop_reason = "max_epochs"
            break
        if stop_after is not None and tr.epoch >= stop_after:
            stop_reason = "interrupted"
            break
        prev = tr.curriculum
        row = tr.run_epoch()
        if verbose:
            print(f"epoch {row['epoch']:4d} o={row['o']} lr={row['lr']:.2e} "
                  f"train={row['train_l_total']:.4e} val={row['val_l_total']:.4e} {row['event']}")
        if ck_dir is not None:
            tr.save(ck_dir / "last")
            if tr.improved:
                tr.save(ck_dir / "best")
            if tr.curriculum.stage != prev.stage or tr.curriculum.done:
                tr.save(ck_dir / f"stage_{prev.stage}")
            _write_log(Path(out_dir) / "train_log.csv", tr.history)
        if tr.curriculum.done:
            stop_reason = tr.curriculum.reason
    if stop_reason == "max_epochs" and tr.history:
        last = tr.history[-1]
        last["event"] = ";".join(filter(None, [last["event"], "stop:max_epochs"]))
        if out_dir is not None:
            _write_log(Path(out_dir) / "train_log.csv", tr.history)
    return TrainResult(tr.model, tr.stats, tr.history, tr.curriculum, stop_reason)
