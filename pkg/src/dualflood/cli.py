"""Command-line entry points: gen-data, train, eval, rollout, report.

Every command resolves its parameters as defaults < ``--config`` JSON <
explicit flags and writes the resolved configuration next to its outputs.
Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, _binio
from .checkpoint import CHECKPOINT_FORMAT_VERSION, load_checkpoint, save_checkpoint
from .data import DATASET_FORMAT_VERSION, FeatureLayout, fit_normalizer, load_dataset, read_manifest, save_dataset
from .errors import (ConfigError, DataError, DivergenceError, FormatVersionError, ManifestError,
                     SchemaMismatchError)
from .evaluation import (DEFAULT_THRESHOLDS, RolloutResult, aggregate, event_report, oracle_rollout, rollout)
from .graph import volume_to_depth
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import (DEFAULT_EVENTS, CatchmentSpec, HydrographSpec, generate_catchment, generate_event,
                        sample_hydrograph_specs)
from .trainer import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DUALFLOOD_OUTPUT_ROOT"
DEFAULT_SPLITS = (40, 8, 8)
ROLLOUT_FORMAT = "dualflood-rollout"
ROLLOUT_FORMAT_VERSION = 1
PHYSICS_CHOICES = ("both", "global", "local", "none")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _override(section: dict, **flags) -> dict:
    section.update({k: v for k, v in flags.items() if v is not None})
    return section


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _versions() -> dict:
    return {"package": __version__, "dataset_format": DATASET_FORMAT_VERSION,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION, "rollout_format": ROLLOUT_FORMAT_VERSION}


# ---------------------------------------------------------------- gen-data

def _gen_one(args):
    graph, hspec, name = args
    return generate_event(graph, hspec, name)


def cmd_gen_data(ns) -> int:
    cfg = _load_config(ns.config)
    seed = ns.seed if ns.seed is not None else cfg.get("seed", 0)
    cspec = _build(CatchmentSpec, _override(_section(cfg, "catchment"), num_nodes=ns.nodes, num_edges=ns.edges,
                                            seed=seed), "catchment")
    hbase = _build(HydrographSpec, _override(_section(cfg, "hydrograph"), num_steps=ns.steps, dt=ns.dt,
                                             inflow_peak=ns.inflow_peak, rain_intensity=ns.rain_intensity),
                   "hydrograph")
    num_events = ns.events if ns.events is not None else cfg.get("events", DEFAULT_EVENTS)
    spread = cfg.get("spread", 0.5)
    if num_events < 1:
        raise ConfigError("--events must be >= 1")
    cspec.check()
    hbase.check()
    out = _prepare_out(Path(ns.out) if ns.out else output_root() / "dataset", ns.force)

    graph = generate_catchment(cspec)
    specs = sample_hydrograph_specs(num_events, hbase, seed=seed + 1, spread=spread)
    jobs = [(graph, s, f"event_{i:03d}") for i, s in enumerate(specs)]
    if ns.workers > 1:
        with ProcessPoolExecutor(ns.workers) as pool:
            events = list(pool.map(_gen_one, jobs))
    else:
        events = [_gen_one(j) for j in jobs]
    resolved = {"seed": seed, "events": num_events, "spread": spread, "catchment": asdict(cspec),
                "hydrograph": asdict(hbase), "event_specs": [asdict(s) for s in specs]}
    save_dataset(graph, events, out, provenance={"generator": "dualflood.synthetic", "versions": _versions(),
                                                 "config": resolved})
    _write_json(out / "resolved_config.json", resolved)
    print(f"wrote {num_events} events ({graph.num_nodes} nodes, {graph.num_edges} edges) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- splits

def make_splits(num_events: int, counts, seed: int) -> dict:
    """Seeded event-level train/val/test split; counts scale down for small datasets."""
    counts = [int(c) for c in counts]
    if len(counts) != 3 or min(counts) < 0:
        raise ConfigError("splits need three non-negative counts")
    if sum(counts) != num_events:
        total = sum(counts)
        val = max(1, round(num_events * counts[1] / total)) if num_events >= 2 else 0
        test = max(1, round(num_events * counts[2] / total)) if num_events >= 3 else 0
        counts = [num_events - val - test, val, test]
    order = np.random.default_rng(seed).permutation(num_events).tolist()
    a, b = counts[0], counts[0] + counts[1]
    return {"train": sorted(order[:a]), "val": sorted(order[a:b]), "test": sorted(order[b:]), "seed": seed}


def fold_splits(num_events: int, k: int, seed: int) -> list[dict]:
    """K folds: fold ``i`` is the test set, fold ``i+1`` validation, the rest training."""
    if k < 3 or k > num_events:
        raise ConfigError("--folds needs 3 <= K <= number of events")
    order = np.random.default_rng(seed).permutation(num_events)
    folds = [sorted(f.tolist()) for f in np.array_split(order, k)]
    out = []
    for i in range(k):
        val = folds[(i + 1) % k]
        train_idx = sorted(j for f, fold in enumerate(folds) if f not in (i, (i + 1) % k) for j in fold)
        out.append({"train": train_idx, "val": val, "test": folds[i], "seed": seed, "fold": i})
    return out


# ---------------------------------------------------------------- train

def _resolve_train(ns, cfg: dict):
    tsec = _section(cfg, "train")
    loss = _section(tsec, "loss") if "loss" in tsec else {}
    weights = dict(loss.get("weights", {}))
    _override(weights, global_mass=ns.lambda_global, local_mass=ns.lambda_local)
    loss["weights"] = weights
    tsec["loss"] = _override(loss, local_boundary=ns.local_boundary)
    boundary = False if ns.no_inflow_feature else None
    _override(tsec, target_horizon=ns.horizon, curriculum_step=ns.curriculum_step, lr=ns.lr, lr_decay=ns.lr_decay,
              patience=ns.patience, max_epochs=ns.max_epochs, max_epochs_per_stage=ns.max_epochs_per_stage,
              batch_size=ns.batch_size, seed=ns.seed, physics=ns.physics, boundary_features=boundary,
              dtype=ns.dtype, max_val_windows=ns.max_val_windows)
    try:
        tcfg = TrainConfig.from_dict(tsec)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    msec = _override(_section(cfg, "model"), latent=ns.latent, gnn_layers=ns.gnn_layers, mlp_layers=ns.mlp_layers,
                     history=ns.history, edge_update=ns.edge_update, neighborhood=ns.neighborhood)
    return tcfg, msec


def cmd_train(ns) -> int:
    cfg = _load_config(ns.config)
    tcfg, msec = _resolve_train(ns, cfg)
    graph, events = load_dataset(ns.dataset)
    split_seed = ns.split_seed if ns.split_seed is not None else cfg.get("split_seed", tcfg.seed)
    counts = ns.splits or cfg.get("splits", DEFAULT_SPLITS)
    folds = ns.folds if ns.folds is not None else cfg.get("folds")
    out = Path(ns.out) if ns.out else output_root() / "train"
    if ns.resume:
        if not out.is_dir():
            raise ConfigError(f"cannot resume: {out} does not exist")
    else:
        _prepare_out(out, ns.force)
    plans = [(out, make_splits(len(events), counts, split_seed))] if not folds else \
        [(out / f"fold_{s['fold']}", s) for s in fold_splits(len(events), int(folds), split_seed)]

    for run_dir, split in plans:
        run_dir.mkdir(parents=True, exist_ok=True)
        p = int(msec.get("history", 2))
        layout = FeatureLayout.for_graph(graph, p, tcfg.boundary_features)
        mcfg = _build(ModelConfig, dict(msec, node_in=layout.node_dim, edge_in=layout.edge_dim), "model")
        train_ev = [events[i] for i in split["train"]]
        val_ev = [events[i] for i in split["val"]]
        resolved = {"command": "train", "dataset": str(Path(ns.dataset).resolve()),
                    "dataset_manifest_version": read_manifest(ns.dataset)["format_version"],
                    "splits": split, "train": tcfg.to_dict(), "model": mcfg.to_dict(),
                    "effective_loss": tcfg.effective_loss.to_dict(), "feature_layout": layout.to_dict(),
                    "versions": _versions()}
        if ns.resume and (run_dir / "run_config.json").is_file():
            prev = json.loads((run_dir / "run_config.json").read_text())
            if {k: prev.get(k) for k in ("splits", "train", "model")} != \
                    {k: resolved[k] for k in ("splits", "train", "model")}:
                raise ConfigError(f"resume config differs from the one recorded in {run_dir}")
        _write_json(run_dir / "run_config.json", resolved)
        _write_json(run_dir / "splits.json", split)
        if ns.oracle_stub:
            stats = fit_normalizer(train_ev, graph, p, tcfg.boundary_features)
            save_checkpoint(run_dir / "checkpoints" / "oracle", None, stats, kind="oracle",
                            extra={"layout": layout.to_dict()})
            print(f"wrote oracle checkpoint to {run_dir / 'checkpoints' / 'oracle'}")
            continue
        result = train(graph, train_ev, val_ev, mcfg, tcfg, out_dir=run_dir, resume=ns.resume, verbose=ns.verbose)
        print(f"{run_dir}: {len(result.history)} epochs, stop={result.stop_reason}, "
              f"horizon={result.curriculum.horizon}")
    return EXIT_OK


# ---------------------------------------------------------------- eval / rollout / report

def _check_schema(ck, graph):
    layout = ck.stats.layout
    expected = FeatureLayout.for_graph(graph, layout.history, layout.boundary_features)
    if layout != expected:
        raise SchemaMismatchError(f"checkpoint feature schema {layout.to_dict()['node_columns']} does not match "
                                  f"the dataset's {expected.to_dict()['node_columns']}")
    if ck.kind == "model" and (ck.model_config.node_in, ck.model_config.edge_in) != (layout.node_dim,
                                                                                      layout.edge_dim):
        raise SchemaMismatchError("checkpoint model input widths do not match its feature schema")


def _find_splits(checkpoint: Path, explicit) -> dict | None:
    if explicit:
        return json.loads(Path(explicit).read_text())
    for parent in checkpoint.resolve().parents:
        if (parent / "splits.json").is_file():
            return json.loads((parent / "splits.json").read_text())
    return None


def _select_events(events, split_name: str, splits: dict | None, event_arg=None):
    if event_arg is not None:
        names = [ev.name for ev in events]
        try:
            idx = names.index(event_arg) if event_arg in names else int(event_arg)
        except ValueError:
            raise ConfigError(f"no event named {event_arg!r}") from None
        if not 0 <= idx < len(events):
            raise ConfigError(f"event index {idx} out of range")
        return [idx]
    if split_name == "all":
        return list(range(len(events)))
    if splits is None:
        raise ConfigError(f"split {split_name!r} requested but no splits.json was found; pass --splits-file")
    if not splits.get(split_name):
        raise ConfigError(f"split {split_name!r} is empty")
    return list(splits[split_name])


def _run_rollout(ck, model, graph, event, steps):
    if ck.kind == "oracle":
        return oracle_rollout(graph, event, ck.stats, steps)
    return rollout(model, graph, event, ck.stats, steps)


def _horizon(ck, event, steps):
    return steps if steps is not None else event.num_steps - 1 - ck.stats.layout.history


def cmd_eval(ns) -> int:
    cfg = _load_config(ns.config)
    esec = _section(cfg, "eval")
    thresholds = tuple(ns.thresholds or esec.get("thresholds", DEFAULT_THRESHOLDS))
    steps = ns.steps if ns.steps is not None else esec.get("steps")
    ck = load_checkpoint(ns.checkpoint)
    graph, events = load_dataset(ns.dataset)
    _check_schema(ck, graph)
    idx = _select_events(events, ns.split, _find_splits(Path(ns.checkpoint), ns.splits_file))
    out = _prepare_out(Path(ns.out) if ns.out else output_root() / "eval", ns.force)
    model = ck.build_model() if ck.kind == "model" else None
    reports = {}
    for i in idx:
        ev = events[i]
        res = _run_rollout(ck, model, graph, ev, _horizon(ck, ev, steps))
        reports[ev.name or str(i)] = event_report(res, ev, graph, out / "events" / (ev.name or str(i)), thresholds,
                                                  plots=not ns.no_plots)
    agg = aggregate(list(reports.values()))
    summary = {"versions": _versions(), "checkpoint": str(Path(ns.checkpoint).resolve()), "kind": ck.kind,
               "split": ns.split, "events": list(reports), "thresholds": list(thresholds),
               "aggregation": {"across_events": "mean_std", "nse": "per_node_mean", "csi": "micro"},
               "aggregate": agg, "per_event": {k: r.scalars() for k, r in reports.items()}}
    _write_json(out / "summary.json", summary)
    _write_json(out / "resolved_config.json", {"thresholds": list(thresholds), "steps": steps, "split": ns.split})
    for key in ("nse_volume", "nse_flow", "nse_depth", *(f"csi_{t}" for t in thresholds)):
        a = agg.get(key)
        if a and a["mean"] is not None:
            print(f"{key}: {a['mean']:.4f} ± {a['std']:.4f} (n={a['count']})")
    return EXIT_OK


def save_rollout(path: Path, result: RolloutResult, event_name: str) -> None:
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: _binio.write_array(path, k, getattr(result, k), "float64")
              for k in ("node_volume", "edge_flow", "depth")}
    _write_json(path / "rollout.json", {"format": ROLLOUT_FORMAT, "format_version": ROLLOUT_FORMAT_VERSION,
                                        "event": event_name, "start": result.start, "seconds": result.seconds,
                                        "negative_volume_clamps": result.negative_volume_clamps,
                                        "arrays": arrays})


def load_rollout(path: Path) -> tuple[RolloutResult, str]:
    mf = path / "rollout.json"
    if not mf.is_file():
        raise ManifestError(f"no rollout.json in {path}")
    try:
        meta = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt rollout manifest: {exc}") from exc
    if meta.get("format") != ROLLOUT_FORMAT:
        raise ManifestError(f"{mf} is not a {ROLLOUT_FORMAT} manifest")
    if meta.get("format_version") != ROLLOUT_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported rollout format version {meta.get('format_version')!r}")
    arr = {k: _binio.read_array(path, v) for k, v in meta["arrays"].items()}
    return RolloutResult(arr["node_volume"], arr["edge_flow"], arr["depth"], float(meta["seconds"]),
                         int(meta["start"]), int(meta.get("negative_volume_clamps", 0))), meta["event"]


def cmd_rollout(ns) -> int:
    ck = load_checkpoint(ns.checkpoint)
    graph, events = load_dataset(ns.dataset)
    _check_schema(ck, graph)
    (i,) = _select_events(events, "all", None, ns.event)
    ev = events[i]
    out = _prepare_out(Path(ns.out) if ns.out else output_root() / "rollout", ns.force)
    model = ck.build_model() if ck.kind == "model" else None
    res = _run_rollout(ck, model, graph, ev, _horizon(ck, ev, ns.steps))
    save_rollout(out, res, ev.name or str(i))
    print(f"rolled out {res.node_volume.shape[0] - 1} steps of {ev.name or i} in {res.seconds:.3f}s -> {out}")
    return EXIT_OK


def cmd_report(ns) -> int:
    res, name = load_rollout(Path(ns.rollout))
    graph, events = load_dataset(ns.dataset)
    names = [ev.name for ev in events]
    if name not in names:
        raise DataError(f"event {name!r} of the rollout is not in the dataset")
    ev = events[names.index(name)]
    if res.node_volume.shape[1] != graph.num_nodes or res.edge_flow.shape[1] != graph.num_edges:
        raise SchemaMismatchError("rollout arrays do not match the dataset graph")
    if not np.array_equal(res.depth, volume_to_depth(graph, res.node_volume)):
        raise DataError("rollout depths are inconsistent with the dataset's depth curves")
    out = _prepare_out(Path(ns.out) if ns.out else output_root() / "report", ns.force)
    rep = event_report(res, ev, graph, out, tuple(ns.thresholds or DEFAULT_THRESHOLDS), plots=not ns.no_plots)
    for k, v in rep.scalars().items():
        print(f"{k}: {v:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualflood", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic catchment and flood events")
    g.add_argument("--out")
    g.add_argument("--config")
    g.add_argument("--events", type=int)
    g.add_argument("--nodes", type=int)
    g.add_argument("--edges", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--dt", type=float)
    g.add_argument("--inflow-peak", type=float)
    g.add_argument("--rain-intensity", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model with the rollout curriculum")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--physics", choices=PHYSICS_CHOICES)
    t.add_argument("--no-inflow-feature", action="store_true", help="drop the boundary-flow input channels")
    t.add_argument("--lambda-global", type=float)
    t.add_argument("--lambda-local", type=float)
    t.add_argument("--local-boundary", choices=("ghost_flux", "exclude_nodes"))
    t.add_argument("--horizon", type=int, help="target rollout length O")
    t.add_argument("--curriculum-step", type=int, help="horizon increment C")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--max-epochs-per-stage", type=int)
    t.add_argument("--max-val-windows", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--latent", type=int)
    t.add_argument("--gnn-layers", type=int)
    t.add_argument("--mlp-layers", type=int)
    t.add_argument("--history", type=int)
    t.add_argument("--edge-update", choices=("residual", "overwrite"))
    t.add_argument("--neighborhood", choices=("in", "both"))
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--splits", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    t.add_argument("--folds", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--oracle-stub", action="store_true", help="write a checkpoint that replays recorded deltas")
    t.add_argument("--force", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out and score every event of a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--splits-file")
    e.add_argument("--out")
    e.add_argument("--config")
    e.add_argument("--steps", type=int)
    e.add_argument("--thresholds", type=float, nargs="+")
    e.add_argument("--no-plots", action="store_true")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="roll out one event and store the predictions")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--event", default="0", help="event name or index")
    r.add_argument("--steps", type=int)
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_rollout)

    p = sub.add_parser("report", help="metrics, tables and plots for a stored rollout")
    p.add_argument("--rollout", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, min(torch.get_num_threads(), os.cpu_count() or 1)))
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
