"""Experiment battery: evaluation, index sweeps, ablation, pruning, depth sweeps, attention export."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from agrifuse.analysis.metrics import MetricsReport
from agrifuse.data.assemble import Sample, check_indices
from agrifuse.data.colormap import resize_bilinear
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.errors import CheckpointError, ConfigError
from agrifuse.models.fusion import FusionModel
from agrifuse.models.vit import attention_map
from agrifuse.models.weather import WEATHER_FEATURES
from agrifuse.training.fusion_train import FusionTrainConfig, evaluate_model, to_data, train_fusion
from agrifuse.training.parallel import run_tasks

log = logging.getLogger(__name__)

PRUNE_FRACTIONS = (0.01, 0.05, 0.075, 0.10)
PRUNE_SCOPES = ("weather", "vit", "fusion", "global")
LAYER_GRID = (2, 4, 8, 12, 16)
ALL_COMBOS = tuple(
    combo for r in range(1, len(INDEX_ORDER) + 1) for combo in itertools.combinations(INDEX_ORDER, r)
)
# biases, normalisation parameters and embeddings are never pruned
_PRUNABLE_LEAVES = {"w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_w2", "patch_proj", "head_w", "expand_w"}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_report(directory, metrics: dict, rows: Optional[List[dict]] = None) -> Path:
    """``metrics.json`` plus, when rows are given, ``table.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    if rows:
        keys = list(rows[0])
        with open(directory / "table.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    return directory


# -- evaluation ------------------------------------------------------------------


def check_compatible(model: FusionModel, samples: Sequence[Sample], indices: Sequence[str],
                     available: Sequence[str] = INDEX_ORDER, features: Sequence[str] = WEATHER_FEATURES) -> None:
    if not samples:
        raise CheckpointError("no samples to evaluate")
    c = model.config
    image, weather = samples[0].image, samples[0].weather
    if c.branch != "weather_only":
        if image.shape[-3] != 3 * len(available) or image.shape[-1] != c.vit.image_size:
            raise CheckpointError(
                f"samples {image.shape} do not fit a model for {c.vit.channels}x{c.vit.image_size}x{c.vit.image_size}"
            )
        if c.vit.channels != 3 * len(indices):
            raise CheckpointError(f"model takes {c.vit.channels} channels but indices {list(indices)} give {3 * len(indices)}")
    if weather.shape[-1] != len(WEATHER_FEATURES):
        raise CheckpointError(f"samples carry {weather.shape[-1]} weather features, expected {len(WEATHER_FEATURES)}")
    if c.branch != "image_only" and len(features) != c.weather.in_features:
        raise CheckpointError(f"{len(features)} weather features selected, model expects {c.weather.in_features}")


def evaluate(model: FusionModel, samples: Sequence[Sample], indices: Sequence[str] = INDEX_ORDER,
             available: Sequence[str] = INDEX_ORDER, meta: Optional[dict] = None,
             features: Sequence[str] = WEATHER_FEATURES) -> MetricsReport:
    """Eval-mode metrics of ``model`` on ``samples``; a pure function of both."""
    indices = check_indices(indices)
    check_compatible(model, samples, indices, available, features)
    return evaluate_model(model, to_data(samples, indices, available, features), meta=meta)


# -- retraining sweeps -----------------------------------------------------------


def _train_task(args) -> dict:
    samples, config = args
    run = train_fusion(samples, config)
    out = {"config_hash": config_hash(config.to_dict()), "history": run.history}
    out.update(run.report.get("test", {}))
    return out


def _sweep(samples, configs: Sequence[FusionTrainConfig], workers: int, progress, label) -> List[dict]:
    return run_tasks(_train_task, [(samples, c) for c in configs], workers, progress=progress, label=label)


def sweep_indices(samples: Sequence[Sample], base: FusionTrainConfig, combos: Sequence[Sequence[str]] = ALL_COMBOS,
                  workers: int = 1, progress: Optional[Callable[[str], None]] = None) -> dict:
    """Retrain with each index subset (3 channels per index) and evaluate on the test years."""
    configs = []
    for combo in combos:
        if not combo:
            raise ConfigError("index combinations must be non-empty")
        configs.append(FusionTrainConfig.from_dict({**base.to_dict(), "indices": list(check_indices(combo))}))
    results = _sweep(samples, configs, workers, progress, "index combo")
    rows = []
    for cfg, res in zip(configs, results):
        rows.append({"indices": "+".join(cfg.indices), "channels": 3 * len(cfg.indices), **_summary(res)})
    return {"config_hash": config_hash(base.to_dict()), "base_config": base.to_dict(), "rows": rows, "runs": results}


def ablate(samples: Sequence[Sample], base: FusionTrainConfig, branches: Sequence[str] = ("fusion", "image_only", "weather_only"),
           workers: int = 1, progress: Optional[Callable[[str], None]] = None) -> dict:
    """Retrain each branch from scratch with the same protocol."""
    configs = [FusionTrainConfig.from_dict({**base.to_dict(), "branch": b}) for b in branches]
    results = _sweep(samples, configs, workers, progress, "branch")
    rows = [{"branch": b, "bottleneck_input": "28x14" if b == "fusion" else "14x14", **_summary(r)}
            for b, r in zip(branches, results)]
    return {"config_hash": config_hash(base.to_dict()), "base_config": base.to_dict(), "rows": rows, "runs": results}


def sweep_layers(samples: Sequence[Sample], base: FusionTrainConfig, layer_counts: Sequence[int] = LAYER_GRID,
                 include_vit: bool = False, workers: int = 1,
                 progress: Optional[Callable[[str], None]] = None) -> dict:
    """Accuracy against encoder depth, keyed by ascending layer count."""
    counts = sorted(set(int(n) for n in layer_counts))
    if not counts or counts[0] < 1:
        raise ConfigError("layer counts must be >= 1")
    configs = []
    for n in counts:
        update = {"layers": n, **({"vit_layers": n} if include_vit else {})}
        configs.append(FusionTrainConfig.from_dict({**base.to_dict(), **update}))
    results = _sweep(samples, configs, workers, progress, "depth")
    rows = [{"layers": n, **_summary(r)} for n, r in zip(counts, results)]
    return {"config_hash": config_hash(base.to_dict()), "include_vit": include_vit, "base_config": base.to_dict(),
            "rows": rows, "runs": results}


def _summary(res: dict) -> dict:
    return {k: res.get(k) for k in ("accuracy", "f1", "loss", "tp", "fp", "tn", "fn", "config_hash")}


# -- pruning ------------------------------------------------------------------------


def prunable(model: FusionModel, scope: str) -> List[Tuple[str, np.ndarray]]:
    if scope not in PRUNE_SCOPES:
        raise ConfigError(f"unknown pruning scope {scope!r}; expected one of {PRUNE_SCOPES}")
    out = []
    for name, p in model.named_parameters():
        if name.rsplit(".", 1)[-1] not in _PRUNABLE_LEAVES:
            continue
        if scope == "global" or name.split(".", 1)[0] == scope:
            out.append((name, p))
    if not out:
        raise ConfigError(f"model branch {model.config.branch!r} has no {scope} weights")
    return out


def magnitude_mask(model: FusionModel, scope: str, fraction: float) -> Dict[str, np.ndarray]:
    """Boolean keep-masks zeroing the floor(p * N) smallest-magnitude weights in scope.

    Ties are broken by parameter order, then flat index, so the mask is
    deterministic.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"pruning fraction must lie in [0, 1), got {fraction}")
    params = prunable(model, scope)
    flat = np.concatenate([np.abs(p.data).ravel() for _, p in params])
    k = int(np.floor(fraction * flat.size))
    drop = np.zeros(flat.size, dtype=bool)
    drop[np.argsort(flat, kind="stable")[:k]] = True
    masks, offset = {}, 0
    for name, p in params:
        masks[name] = ~drop[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    return masks


def apply_masks(model: FusionModel, masks: Dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for name, keep in masks.items():
        params[name].data[~keep] = 0.0


def prune_model(model: FusionModel, scope: str, fraction: float) -> Tuple[FusionModel, dict]:
    """Pruned deep copy plus counts; ``model`` is left untouched."""
    pruned = copy.deepcopy(model)
    masks = magnitude_mask(pruned, scope, fraction)
    params = pruned.parameters()
    n = sum(m.size for m in masks.values())
    before = sum(int(np.sum(params[name].data == 0)) for name in masks)
    apply_masks(pruned, masks)
    after = sum(int(np.sum(params[name].data == 0)) for name in masks)
    info = {
        "scope": scope,
        "fraction": fraction,
        "weights_in_scope": n,
        "pruned": int(sum(int((~m).sum()) for m in masks.values())),
        "expected": int(np.floor(fraction * n)),
        "zeros_before": before,
        "zeros_after": after,
        "per_tensor": {name: int((~m).sum()) for name, m in masks.items()},
    }
    return pruned, info


def prune_table(model: FusionModel, samples: Sequence[Sample], indices: Sequence[str] = INDEX_ORDER,
                scopes: Sequence[str] = PRUNE_SCOPES, fractions: Sequence[float] = PRUNE_FRACTIONS,
                available: Sequence[str] = INDEX_ORDER,
                on_pruned: Optional[Callable[[str, float, FusionModel], None]] = None,
                features: Sequence[str] = WEATHER_FEATURES) -> dict:
    """Evaluate the unpruned model and every (scope, fraction) without retraining."""
    baseline = evaluate(model, samples, indices, available, features=features)
    rows = [{"scope": "none", "fraction": 0.0, "pruned": 0, "weights_in_scope": 0, **_metric_cols(baseline)}]
    infos = []
    for scope in scopes:
        for p in fractions:
            pruned, info = prune_model(model, scope, p)
            if on_pruned:
                on_pruned(scope, p, pruned)
            rep = evaluate(pruned, samples, indices, available, features=features)
            infos.append(info)
            rows.append({"scope": scope, "fraction": p, "pruned": info["pruned"],
                         "weights_in_scope": info["weights_in_scope"], **_metric_cols(rep)})
    return {"baseline": baseline.to_dict(), "rows": rows, "masks": infos}


def _metric_cols(rep: MetricsReport) -> dict:
    return {"accuracy": rep.accuracy, "f1": rep.f1, "loss": rep.loss}


# -- attention -----------------------------------------------------------------------


def export_attention(model: FusionModel, image: np.ndarray, path, size: int = 224) -> dict:
    """Write the class-token attention map as an 8-bit grayscale PNG and raw JSON.

    The map is upsampled bilinearly to ``size`` x ``size`` and scaled so its
    maximum is 255; the JSON next to the PNG keeps the raw distribution.
    """
    if model.config.branch == "weather_only":
        raise CheckpointError("weather-only models have no image encoder")
    att = attention_map(np.asarray(image, dtype=np.float64), model.vit)
    if att.ndim != 2:
        raise ConfigError(f"export_attention takes one image, got attention of shape {att.shape}")
    up = resize_bilinear(att, size)
    top = up.max()
    pixels = np.zeros_like(up) if top <= 0 else np.round(255.0 * up / top)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)
        raw = {"grid": list(att.shape), "values": att.tolist(), "sum": float(att.sum())}
        path.with_suffix(".json").write_text(json.dumps(raw, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write attention map to {path}: {exc}") from exc
    return raw
