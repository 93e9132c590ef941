"""Engine configuration files, result exports, and the evaluator factory."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .arch import InputSpec, serialize
from .datasets import DatasetSpec, resolve_dataset
from .errors import ParseError, ValidationError
from .evaluators import AugmentConfig, OptimizerConfig, PruningConfig, TrainConfig
from .evaluators.micro import MicroEvaluator
from .evaluators.proxy import ProxyEvaluator
from .evolution import Candidate, HistoryRecord, SearchConfig, SearchState
from .objectives import BoundsConfig, ObjectiveVector
from .protocol import ProcessTransport, RemoteEvaluator, TcpTransport
from .space import SearchSpaceConfig


@dataclass
class EngineConfig:
    input: InputSpec
    bounds: BoundsConfig
    space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    search: SearchConfig | None = None
    train: TrainConfig | None = None
    evaluator: str = "proxy"
    dataset: str | None = None
    output_dir: str = "runs/search"
    checkpoint_every: int = 50
    data_root: str = "data"
    eval_timeout_seconds: float = 600.0


def _get(obj: dict, key: str, path: str, required: bool = True, default=None):
    if key not in obj:
        if required:
            raise ValidationError(f"config field '{path}.{key}' is missing", field=f"{path}.{key}")
        return default
    return obj[key]


def _pair(value, path) -> tuple:
    if not isinstance(value, list) or len(value) != 2:
        raise ValidationError(f"config field '{path}' must be a two-element list", field=path)
    return tuple(value)


def input_from_obj(obj: dict) -> InputSpec:
    return InputSpec(
        height=_get(obj, "height", "input"),
        width=_get(obj, "width", "input"),
        channels=_get(obj, "channels", "input"),
        num_classes=_get(obj, "num_classes", "input"),
    )


def bounds_from_obj(obj: dict) -> BoundsConfig:
    return BoundsConfig(
        error_bound=float(_get(obj, "error", "bounds")),
        peak_memory_bound=float(_get(obj, "peak_memory", "bounds")),
        model_size_bound=float(_get(obj, "model_size", "bounds")),
        macs_bound=float(_get(obj, "macs", "bounds")),
        peak_memory_enabled=_get(obj, "peak_memory_enabled", "bounds", False, True),
        model_size_enabled=_get(obj, "model_size_enabled", "bounds", False, True),
        macs_enabled=_get(obj, "macs_enabled", "bounds", False, True),
    )


def bounds_to_obj(b: BoundsConfig) -> dict:
    return {
        "error": b.error_bound,
        "peak_memory": b.peak_memory_bound,
        "model_size": b.model_size_bound,
        "macs": b.macs_bound,
        "peak_memory_enabled": b.peak_memory_enabled,
        "model_size_enabled": b.model_size_enabled,
        "macs_enabled": b.macs_enabled,
    }


_SPACE_DEFAULTS = SearchSpaceConfig()


def space_from_obj(obj: dict | None) -> SearchSpaceConfig:
    if obj is None:
        return SearchSpaceConfig()
    path = "search_space"
    return SearchSpaceConfig(
        blocks_range=_pair(obj.get("blocks", list(_SPACE_DEFAULTS.blocks_range)), f"{path}.blocks"),
        layers_range=_pair(obj.get("layers", list(_SPACE_DEFAULTS.layers_range)), f"{path}.layers"),
        kernel_options=tuple(obj.get("kernels", list(_SPACE_DEFAULTS.kernel_options))),
        channels_range=_pair(obj.get("channels", list(_SPACE_DEFAULTS.channels_range)), f"{path}.channels"),
        stride_options=tuple(obj.get("strides", list(_SPACE_DEFAULTS.stride_options))),
        pool_size_options=tuple(obj.get("pool_sizes", list(_SPACE_DEFAULTS.pool_size_options))),
        dense_count_range=_pair(obj.get("dense_count", list(_SPACE_DEFAULTS.dense_count_range)),
                                f"{path}.dense_count"),
        units_range=_pair(obj.get("units", list(_SPACE_DEFAULTS.units_range)), f"{path}.units"),
        sparsity_range=_pair(obj.get("sparsity", list(_SPACE_DEFAULTS.sparsity_range)), f"{path}.sparsity"),
    )


def space_to_obj(s: SearchSpaceConfig) -> dict:
    return {
        "blocks": list(s.blocks_range),
        "layers": list(s.layers_range),
        "kernels": list(s.kernel_options),
        "channels": list(s.channels_range),
        "strides": list(s.stride_options),
        "pool_sizes": list(s.pool_size_options),
        "dense_count": list(s.dense_count_range),
        "units": list(s.units_range),
        "sparsity": list(s.sparsity_range),
    }


def train_from_obj(obj: dict | None) -> TrainConfig | None:
    if obj is None:
        return None
    opt = _get(obj, "optimizer", "train")
    schedule = _get(opt, "lr_schedule", "train.optimizer")
    pruning = obj.get("pruning", {})
    aug = obj.get("augmentation", {})
    return TrainConfig(
        optimizer=OptimizerConfig(
            kind=_get(opt, "kind", "train.optimizer"),
            lr_schedule=tuple((int(e), float(lr)) for e, lr in schedule),
            momentum=opt.get("momentum", 0.9),
            weight_decay=opt.get("weight_decay", 0.0),
        ),
        epochs=_get(obj, "epochs", "train"),
        batch_size=_get(obj, "batch_size", "train"),
        pruning=PruningConfig(
            target_sparsity=pruning.get("target_sparsity", 0.0),
            prune_start_epoch=pruning.get("prune_start_epoch", 0),
            prune_end_epoch=pruning.get("prune_end_epoch", 0),
            mask_update_every_steps=pruning.get("mask_update_every_steps"),
        ),
        augmentation=AugmentConfig(
            shift_pixels=aug.get("shift_pixels", 0),
            flip_lr=aug.get("flip_lr", False),
        ),
        seed=obj.get("seed", 0),
        dropout_rate=obj.get("dropout_rate", 0.0),
    )


def train_to_obj(t: TrainConfig | None) -> dict | None:
    if t is None:
        return None
    return {
        "optimizer": {
            "kind": t.optimizer.kind,
            "lr_schedule": [list(p) for p in t.optimizer.lr_schedule],
            "momentum": t.optimizer.momentum,
            "weight_decay": t.optimizer.weight_decay,
        },
        "epochs": t.epochs,
        "batch_size": t.batch_size,
        "pruning": {
            "target_sparsity": t.pruning.target_sparsity,
            "prune_start_epoch": t.pruning.prune_start_epoch,
            "prune_end_epoch": t.pruning.prune_end_epoch,
            "mask_update_every_steps": t.pruning.mask_update_every_steps,
        },
        "augmentation": {
            "shift_pixels": t.augmentation.shift_pixels,
            "flip_lr": t.augmentation.flip_lr,
        },
        "seed": t.seed,
        "dropout_rate": t.dropout_rate,
    }


def engine_config_from_obj(obj: dict) -> EngineConfig:
    if not isinstance(obj, dict):
        raise ValidationError("config must be a JSON object")
    input_spec = input_from_obj(_get(obj, "input", "config"))
    bounds = bounds_from_obj(_get(obj, "bounds", "config"))
    space = space_from_obj(obj.get("search_space"))
    train = train_from_obj(obj.get("train"))
    search_obj = obj.get("search", {})
    search = SearchConfig(
        bounds=bounds,
        space=space,
        train=train,
        population_size=search_obj.get("population_size", 100),
        sample_size=search_obj.get("sample_size", 25),
        total_rounds=search_obj.get("total_rounds", 2000),
        max_parallel_evaluations=search_obj.get("max_parallel_evaluations", 1),
        seed=search_obj.get("seed", 0),
        peak_memory_node_cap=search_obj.get("peak_memory_node_cap", 64),
        add_aliasing=search_obj.get("add_aliasing", True),
    )
    return EngineConfig(
        input=input_spec,
        bounds=bounds,
        space=space,
        search=search,
        train=train,
        evaluator=obj.get("evaluator", "proxy"),
        dataset=obj.get("dataset"),
        output_dir=obj.get("output_dir", "runs/search"),
        checkpoint_every=obj.get("checkpoint_every", 50),
        data_root=obj.get("data_root", "data"),
        eval_timeout_seconds=obj.get("eval_timeout_seconds", 600.0),
    )


def engine_config_to_obj(cfg: EngineConfig) -> dict:
    return {
        "input": vars(cfg.input),
        "bounds": bounds_to_obj(cfg.bounds),
        "search_space": space_to_obj(cfg.space),
        "search": {
            "population_size": cfg.search.population_size,
            "sample_size": cfg.search.sample_size,
            "total_rounds": cfg.search.total_rounds,
            "max_parallel_evaluations": cfg.search.max_parallel_evaluations,
            "seed": cfg.search.seed,
            "peak_memory_node_cap": cfg.search.peak_memory_node_cap,
            "add_aliasing": cfg.search.add_aliasing,
        },
        "train": train_to_obj(cfg.train),
        "evaluator": cfg.evaluator,
        "dataset": cfg.dataset,
        "output_dir": cfg.output_dir,
        "checkpoint_every": cfg.checkpoint_every,
        "data_root": cfg.data_root,
        "eval_timeout_seconds": cfg.eval_timeout_seconds,
    }


def load_engine_config(path: str | Path) -> EngineConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: malformed config at line {exc.lineno} column {exc.colno}: {exc.msg}",
            position=exc.pos) from exc
    return engine_config_from_obj(obj)


def build_evaluator(cfg: EngineConfig, dataset: DatasetSpec | None = None):
    """Instantiate the evaluator named by the config selector."""
    selector = cfg.evaluator
    if selector == "proxy":
        return ProxyEvaluator(cfg.bounds, cfg.input)
    if selector == "micro":
        if cfg.train is None:
            raise ValidationError("config field 'train' is required for the micro evaluator",
                                  field="train")
        if dataset is None:
            if cfg.dataset is None:
                raise ValidationError("config field 'dataset' is required for the micro evaluator",
                                      field="dataset")
            dataset = resolve_dataset(cfg.dataset, cfg.data_root)
        return MicroEvaluator(cfg.train, dataset)
    if selector.startswith("exec:"):
        command = selector[len("exec:"):].split()
        return RemoteEvaluator(
            lambda: ProcessTransport(command), cfg.train, cfg.dataset or "",
            timeout=cfg.eval_timeout_seconds)
    if selector.startswith("tcp:"):
        host, _, port = selector[len("tcp:"):].partition(":")
        return RemoteEvaluator(
            lambda: TcpTransport(host, int(port)), cfg.train, cfg.dataset or "",
            timeout=cfg.eval_timeout_seconds)
    raise ValidationError(f"unknown evaluator selector {selector!r}", field="evaluator")


# --- exports ---

HISTORY_COLUMNS = [
    "round", "candidate_id", "parent_id", "morphism",
    "lambda_error", "lambda_peak_memory", "lambda_model_size", "lambda_macs",
    "error", "peak_memory_bytes", "model_size_bytes", "macs",
    "goal_value", "sparsity", "status", "evicted_id",
]


def _opt(value) -> str:
    return "" if value is None else str(value)


def write_history_csv(path: str | Path, history: list[HistoryRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for r in history:
            lambdas = r.lambdas or (None, None, None, None)
            obj = r.objectives
            writer.writerow([
                r.round_index, r.candidate_id, _opt(r.parent_id), _opt(r.morphism),
                _opt(lambdas[0]), _opt(lambdas[1]), _opt(lambdas[2]), _opt(lambdas[3]),
                _opt(obj.error if obj else None),
                _opt(obj.peak_memory_bytes if obj else None),
                _opt(obj.model_size_bytes if obj else None),
                _opt(obj.macs if obj else None),
                _opt(r.goal_value), r.sparsity, r.status, _opt(r.evicted_id),
            ])


def read_history_points(path: str | Path) -> list[tuple[int, ObjectiveVector]]:
    """Evaluated (id, objectives) pairs from a history CSV."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "candidate_id" not in reader.fieldnames:
            raise ParseError(f"{path}: not a history CSV")
        for row in reader:
            if row["status"] != "ok" or not row["error"]:
                continue
            points.append((
                int(row["candidate_id"]),
                ObjectiveVector(
                    error=float(row["error"]),
                    peak_memory_bytes=int(row["peak_memory_bytes"]),
                    model_size_bytes=int(row["model_size_bytes"]),
                    macs=int(row["macs"]),
                ),
            ))
    return points


ARCHIVE_COLUMNS = [
    "id", "error", "accuracy", "peak_memory_bytes", "model_size_bytes", "macs",
    "sparsity", "architecture_path",
]


def export_archive(out_dir: str | Path, state: SearchState) -> dict:
    """Write archive CSV + JSON and each member's architecture document."""
    out_dir = Path(out_dir)
    arch_dir = out_dir / "architectures"
    arch_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for cid, vec in sorted(state.archive.members()):
        cand = state.archive_candidates.get(cid)
        arch_path = ""
        sparsity = ""
        accuracy = ""
        if cand is not None:
            doc = serialize(cand.pruned_template or cand.template)
            arch_path = str(arch_dir / f"candidate_{cid}.json")
            Path(arch_path).write_bytes(doc)
            sparsity = cand.sparsity_target
            accuracy = cand.val_accuracy if cand.val_accuracy is not None else ""
        rows.append({
            "id": cid,
            "error": vec.error,
            "accuracy": accuracy,
            "peak_memory_bytes": vec.peak_memory_bytes,
            "model_size_bytes": vec.model_size_bytes,
            "macs": vec.macs,
            "sparsity": sparsity,
            "architecture_path": arch_path,
        })
    with open(out_dir / "archive.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ARCHIVE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    payload = {"version": "munas-archive/1", "members": rows}
    (out_dir / "archive.json").write_text(json.dumps(payload, indent=2) + "\n")
    return payload
