"""Command-line entry point: ``agrifuse <command> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure,
64 usage error.  Progress goes to stderr; results only to files.
"""

from __future__ import annotations

import argparse
import datetime as dt
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from agrifuse.analysis import experiments as ex
from agrifuse.data.assemble import assemble, select_channels
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.data.layout import DatasetDir, load_dataset, write_dataset
from agrifuse.data.synthetic import SyntheticSpec, synthesize_dataset
from agrifuse.data.weather_io import standardize_stats
from agrifuse.errors import ConfigError, InputError
from agrifuse.models.convlstm import predict_next
from agrifuse.series import REAL, ImageSeries, fill_gaps, generate_daily, per_season, split_by_year
from agrifuse.training.convlstm_train import ConvLSTMTrainConfig, load_convlstm, save_convlstm, train_convlstm
from agrifuse.training.fusion_train import FusionTrainConfig, load_fusion, save_fusion, train_fusion
from agrifuse.training.parallel import worker_count

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64
log = logging.getLogger("agrifuse")

_SECTIONS = ("convlstm", "fusion", "synthetic", "interpolate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- config handling -------------------------------------------------------------


def read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def section(cfg: dict, name: str, fields: Sequence[str]) -> dict:
    """Shared top-level keys that ``fields`` knows, overridden by ``cfg[name]``."""
    known = set(fields)
    allowed = set(_SECTIONS) | set(FusionTrainConfig.__dataclass_fields__) | set(ConvLSTMTrainConfig.__dataclass_fields__)
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {k: v for k, v in cfg.items() if k in known}
    out.update(cfg.get(name, {}))
    return out


def with_seed(d: dict, seed: Optional[int]) -> dict:
    if seed is not None:
        d = {**d, "seed": seed}
    return d


def write_resolved(out: Path, command: str, resolved: dict, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "data": args.data,
        "seed": args.seed,
        "config": resolved,
    }
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _progress(msg: str) -> None:
    log.info(msg)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


# -- dataset helpers --------------------------------------------------------------


def _derived_manifest(src: DatasetDir, stage: str, extra: dict) -> dict:
    manifest = {k: v for k, v in src.manifest.items() if k not in ("plots", "indices", "standardization")}
    manifest.setdefault("stages", [])
    manifest["stages"] = list(manifest["stages"]) + [{"stage": stage, **extra}]
    return manifest


def _check_daily(ds: DatasetDir) -> None:
    for plot, per_index in ds.series.items():
        for index, s in per_index.items():
            for year, part in split_by_year(s).items():
                if not part.is_complete():
                    raise InputError(
                        f"{plot}/{index} {year} is not daily; run interpolate or gen-daily first"
                    )


def _samples(ds: DatasetDir, train_years: Sequence[int], stats=None):
    _check_daily(ds)
    if stats is None:
        train_weather = [r for r in ds.weather if r.date.year in train_years]
        if not train_weather:
            raise InputError(f"no weather records in training years {list(train_years)}")
        stats = standardize_stats(np.stack([r.features() for r in train_weather]))
    return assemble(ds.series, ds.weather, ds.labels, stats=stats, indices=ds.indices), stats


# -- commands --------------------------------------------------------------------------


def cmd_synth_data(args, cfg) -> None:
    spec_dict = section(cfg, "synthetic", []) if "synthetic" in cfg else {k: v for k, v in cfg.items() if k != "seed"}
    spec = SyntheticSpec.from_dict(spec_dict)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    _progress(f"synthesizing {spec.plots} plots x {len(spec.years)} years (seed {seed})")
    data = synthesize_dataset(spec, np.random.default_rng(seed))
    series = {p: {k: data.observed_series(p, k) for k in INDEX_ORDER} for p in data.plots}
    out = Path(args.out)
    write_dataset(out, series, data.weather, data.labels, {"spec": spec.to_dict(), "seed": seed, "stage": "real"})
    if spec.write_truth:
        truth = {p: {k: data.truth_series(p, k) for k in INDEX_ORDER} for p in data.plots}
        write_dataset(out / "truth", truth, data.weather, data.labels, {"spec": spec.to_dict(), "seed": seed, "stage": "truth"})
    write_resolved(out, "synth-data", {"spec": spec.to_dict(), "seed": seed}, args)


def cmd_interpolate(args, cfg) -> None:
    _require(args, "data")
    opts = {"sigma": 0.0, **cfg.get("interpolate", {})}
    sigma = float(opts["sigma"])
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    src = load_dataset(args.data)
    out = {}
    for plot in src.plots:
        out[plot] = {}
        for index in src.indices:
            real = ImageSeries([f for f in src.series[plot][index].frames if f.provenance == REAL])
            out[plot][index] = per_season(real, lambda s: fill_gaps(s, sigma=sigma, rng=rng))
        _progress(f"interpolated {plot}")
    manifest = _derived_manifest(src, "interpolated", {"sigma": sigma, "seed": seed})
    write_dataset(args.out, out, src.weather, src.labels, manifest)
    write_resolved(Path(args.out), "interpolate", {"sigma": sigma, "seed": seed}, args)


def cmd_train_convlstm(args, cfg) -> None:
    _require(args, "data")
    conf = ConvLSTMTrainConfig.from_dict(with_seed(section(cfg, "convlstm", ConvLSTMTrainConfig.__dataclass_fields__), args.seed))
    src = load_dataset(args.data)
    if conf.per_index:
        groups = {k: {f"{p}/{k}": src.series[p][k] for p in src.plots} for k in src.indices}
    else:
        groups = {"all": {f"{p}/{k}": src.series[p][k] for p in src.plots for k in src.indices}}
    out = Path(args.out)
    reports, rows = {}, []
    for name, series in groups.items():
        _progress(f"cross-validating the {name} model")
        report, final = train_convlstm(series, conf, workers=worker_count(), progress=_progress)
        reports[name] = report
        rows.extend(
            {"model": name, "test_year": f["test_year"], "sigma": r["sigma"], "rmse": r["rmse"],
             "persistence_rmse": r["persistence_rmse"], "test_frames": r["test_frames"]}
            for f in report["folds"] for r in f["results"]
        )
        if final is not None:
            save_convlstm(out / "checkpoint" / name, final,
                          {"train_config": conf.to_dict(), "sigma": report["final"]["sigma"], "model": name})
    metrics = {"per_index": conf.per_index, "models": reports, "config_hash": ex.config_hash(conf.to_dict())}
    ex.write_report(out, metrics, rows)
    write_resolved(out, "train-convlstm", conf.to_dict(), args)


def load_generators(root) -> Dict[str, object]:
    """ConvLSTM checkpoints under ``root``: one per index, or a shared one named ``all``."""
    root = Path(root)
    if (root / "manifest.json").exists():
        return {"all": load_convlstm(root)[0]}
    models = {d.name: load_convlstm(d)[0] for d in sorted(root.iterdir()) if (d / "manifest.json").exists()}
    if not models:
        raise FileNotFoundError(f"no ConvLSTM checkpoints under {root}")
    return models


def cmd_gen_daily(args, cfg) -> None:
    _require(args, "data", "model")
    models = load_generators(args.model)
    src = load_dataset(args.data)
    out = {}
    for plot in src.plots:
        out[plot] = {}
        for index in src.indices:
            params = models.get(index, models.get("all"))
            if params is None:
                raise InputError(f"no ConvLSTM model for {index} under {args.model}")
            real = ImageSeries([f for f in src.series[plot][index].frames if f.provenance == REAL])
            predict = functools.partial(predict_next, p=params)
            out[plot][index] = per_season(real, lambda s: generate_daily(s, predict))
        _progress(f"generated daily frames for {plot}")
    manifest = _derived_manifest(src, "generated", {"models": sorted(models)})
    write_dataset(args.out, out, src.weather, src.labels, manifest)
    write_resolved(Path(args.out), "gen-daily", {"models": sorted(models)}, args)


def _fusion_config(args, cfg) -> FusionTrainConfig:
    return FusionTrainConfig.from_dict(with_seed(section(cfg, "fusion", FusionTrainConfig.__dataclass_fields__), args.seed))


def cmd_train_fusion(args, cfg) -> None:
    _require(args, "data")
    conf = _fusion_config(args, cfg)
    src = load_dataset(args.data)
    samples, stats = _samples(src, conf.train_years)
    run = train_fusion(samples, conf, available=src.indices, progress=_progress)
    out = Path(args.out)
    meta = {
        "train_config": conf.to_dict(),
        "indices": list(conf.indices),
        "available_indices": list(src.indices),
        "weather_features": list(conf.weather_features),
        "weather_mean": stats[0].tolist(),
        "weather_std": stats[1].tolist(),
        "best_epoch": run.history.get("best_epoch"),
    }
    save_fusion(out / "checkpoint", run.model, meta)
    run.report["config_hash"] = ex.config_hash(conf.to_dict())
    ex.write_report(out, run.report, [{"epoch": i, "train_loss": l, "val_loss": v} for i, (l, v) in
                                      enumerate(zip(run.history["train_loss"], run.history["val_loss"]))] or None)
    write_resolved(out, "train-fusion", conf.to_dict(), args)


def _load_for_eval(args):
    model, meta = load_fusion(args.model)
    src = load_dataset(args.data)
    stats = (np.array(meta["weather_mean"]), np.array(meta["weather_std"]))
    samples, _ = _samples(src, meta["train_config"]["train_years"], stats=stats)
    years = args.years or meta["train_config"]["test_years"]
    samples = [s for s in samples if s.date.year in years]
    if not samples:
        raise InputError(f"no samples in evaluation years {list(years)}")
    return model, meta, samples, src


def cmd_evaluate(args, cfg) -> None:
    _require(args, "data", "model")
    model, meta, samples, src = _load_for_eval(args)
    rep = ex.evaluate(model, samples, meta["indices"], src.indices, meta={"samples": len(samples)},
                      features=meta["weather_features"])
    out = Path(args.out)
    ex.write_report(out, {**rep.to_dict(), "config_hash": ex.config_hash(meta["train_config"])})
    write_resolved(out, "evaluate", {"model": str(args.model), "years": args.years}, args)


def cmd_sweep_indices(args, cfg) -> None:
    _require(args, "data")
    conf = _fusion_config(args, cfg)
    src = load_dataset(args.data)
    samples, _ = _samples(src, conf.train_years)
    combos = [c.split("+") for c in args.combos.split(",")] if args.combos else ex.ALL_COMBOS
    res = ex.sweep_indices(samples, conf, combos, workers=worker_count(), progress=_progress)
    ex.write_report(args.out, res, res["rows"])
    write_resolved(Path(args.out), "sweep-indices", conf.to_dict(), args)


def cmd_ablate(args, cfg) -> None:
    _require(args, "data")
    conf = _fusion_config(args, cfg)
    src = load_dataset(args.data)
    samples, _ = _samples(src, conf.train_years)
    branches = ("fusion", args.branch) if args.branch else ("fusion", "image_only", "weather_only")
    res = ex.ablate(samples, conf, branches, workers=worker_count(), progress=_progress)
    ex.write_report(args.out, res, res["rows"])
    write_resolved(Path(args.out), "ablate", conf.to_dict(), args)


def cmd_prune(args, cfg) -> None:
    _require(args, "data", "model")
    model, meta, samples, src = _load_for_eval(args)
    scopes = args.scopes.split(",") if args.scopes else ex.PRUNE_SCOPES
    fractions = [float(p) for p in args.fractions.split(",")] if args.fractions else ex.PRUNE_FRACTIONS
    out = Path(args.out)

    def keep(scope, p, pruned):
        if args.save_pruned:
            save_fusion(out / "pruned" / f"{scope}_{p:g}", pruned, {**meta, "pruned": {"scope": scope, "fraction": p}})

    res = ex.prune_table(model, samples, meta["indices"], scopes, fractions, src.indices, on_pruned=keep,
                         features=meta["weather_features"])
    res["config_hash"] = ex.config_hash(meta["train_config"])
    ex.write_report(out, res, res["rows"])
    write_resolved(out, "prune", {"model": str(args.model), "scopes": list(scopes), "fractions": list(fractions)}, args)


def cmd_sweep_layers(args, cfg) -> None:
    _require(args, "data")
    conf = _fusion_config(args, cfg)
    src = load_dataset(args.data)
    samples, _ = _samples(src, conf.train_years)
    counts = [int(n) for n in args.layers.split(",")] if args.layers else ex.LAYER_GRID
    res = ex.sweep_layers(samples, conf, counts, include_vit=args.include_vit, workers=worker_count(),
                          progress=_progress)
    ex.write_report(args.out, res, res["rows"])
    write_resolved(Path(args.out), "sweep-layers", conf.to_dict(), args)


def cmd_attention(args, cfg) -> None:
    _require(args, "data", "model")
    model, meta, samples, src = _load_for_eval(args)
    if args.plot or args.date:
        wanted = [s for s in samples if (not args.plot or s.plot_id == args.plot)
                  and (not args.date or s.date == dt.date.fromisoformat(args.date))]
        if not wanted:
            raise InputError(f"no sample for plot={args.plot} date={args.date}")
        samples = wanted
    sample = samples[0]
    image = select_channels(sample.image, meta["indices"], src.indices)
    out = Path(args.out)
    path = out / "attention" / f"{sample.plot_id}_{sample.date.isoformat()}.png"
    raw = ex.export_attention(model, image, path)
    ex.write_report(out, {"sample": {"plot_id": sample.plot_id, "date": sample.date.isoformat(),
                                     "label": sample.label}, "png": str(path.relative_to(out)), **raw})
    write_resolved(out, "attention", {"model": str(args.model)}, args)


COMMANDS = {
    "synth-data": cmd_synth_data,
    "interpolate": cmd_interpolate,
    "train-convlstm": cmd_train_convlstm,
    "gen-daily": cmd_gen_daily,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "sweep-indices": cmd_sweep_indices,
    "ablate": cmd_ablate,
    "prune": cmd_prune,
    "sweep-layers": cmd_sweep_layers,
    "attention": cmd_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agrifuse", description="Satellite + weather fusion pipeline for vine disease detection.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name == "synth-data"), help="JSON run configuration")
        p.add_argument("--data", help="input dataset directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        if name in ("gen-daily", "evaluate", "prune", "attention"):
            p.add_argument("--model", help="checkpoint directory")
        if name in ("evaluate", "prune", "attention"):
            p.add_argument("--years", type=lambda s: [int(y) for y in s.split(",")], help="years to evaluate")
        if name == "ablate":
            p.add_argument("--branch", choices=("image_only", "weather_only"))
        if name == "prune":
            p.add_argument("--scopes", help="comma-separated subset of " + ",".join(ex.PRUNE_SCOPES))
            p.add_argument("--fractions", help="comma-separated pruning fractions")
            p.add_argument("--save-pruned", action="store_true", help="also write every pruned checkpoint")
        if name == "sweep-indices":
            p.add_argument("--combos", help="e.g. NDVI,NDCI+NDVI")
        if name == "sweep-layers":
            p.add_argument("--layers", help="comma-separated layer counts")
            p.add_argument("--include-vit", action="store_true")
        if name == "attention":
            p.add_argument("--plot")
            p.add_argument("--date")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = read_config(args.config)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
