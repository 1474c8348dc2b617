"""Command-line entry points: featurize, train, eval, relabel, report.

Exit status: 0 success, 2 configuration error, 3 data error or partial
failure, 4 numeric failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import read_manifest
from .config import ConfigError, ExperimentConfig, load_config
from .data.cache import FeatureCache
from .data.crossval import cross_validate, summarize, FoldResult
from .data.manifest import DatasetManifest, ManifestEntry, ManifestError, load_manifest
from .metrics import METRIC_NAMES
from .model import DualBackboneModel, load_model, load_pretrained_global, save_model
from .relabel import ClipLabel, load_annotations, relabel_dataset
from .tensor import NonFiniteError
from .training import (TargetLayout, TrainConfig, TrainingDiverged, evaluate, fine_predictor, pad_frames,
                       train_model)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_FILE = "metrics.json"
CONFIG_SNAPSHOT = "config.ini"
HISTORY_FILE = "history.jsonl"

log = logging.getLogger("soundtag")


class DataError(RuntimeError):
    pass


# -- shared helpers -----------------------------------------------------------

def _layout(manifest: DatasetManifest) -> TargetLayout:
    return TargetLayout(manifest.n_classes, manifest.task_mode, manifest.taxonomy)


def _cache(cfg: ExperimentConfig) -> FeatureCache:
    return FeatureCache(cfg["data.cache_dir"], cfg.spectrogram(), cfg.target_samples())


@dataclass
class FeatureBatch:
    X: np.ndarray
    entries: list[ManifestEntry]


def _features(manifest: DatasetManifest, entries: list[ManifestEntry], cache: FeatureCache) -> FeatureBatch:
    specs, failures = [], []
    for e in entries:
        try:
            specs.append(cache.get_or_compute(manifest.resolve(e), e.sample_id).data)
        except (OSError, ValueError) as exc:
            failures.append(f"{e.sample_id}: {exc}")
    if failures:
        raise DataError("cannot featurize " + "; ".join(failures))
    shapes = {s.shape for s in specs}
    if len(shapes) > 1:
        raise DataError(f"clips yield different spectrogram shapes {sorted(shapes)}; set data.target_seconds")
    X = pad_frames(np.stack(specs)) if specs else np.zeros((0, 4, 64))
    return FeatureBatch(X, entries)


def _targets(manifest: DatasetManifest, entries, layout: TargetLayout) -> np.ndarray:
    return layout.targets(manifest.label_matrix(entries))


def _run_dir(out: str | None, cfg: ExperimentConfig) -> Path:
    if out is None:
        raise ConfigError("--out is required for this command")
    run = Path(out)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run / CONFIG_SNAPSHOT).write_text(cfg.dumps())
    handler = logging.FileHandler(run / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("soundtag").addHandler(handler)
    return run


def _new_model(cfg: ExperimentConfig, layout: TargetLayout) -> DualBackboneModel:
    model = DualBackboneModel(cfg.model_config(layout.n_outputs), seed=cfg.seed)
    if cfg["model.pretrained_global"]:
        load_pretrained_global(model, cfg["model.pretrained_global"])
    return model


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.values["train"]
    return TrainConfig(t["epochs"], t["batch_size"], t["seed"], t["max_steps"], t["best_metric"],
                       cfg["augment.enabled"], cfg.augment_policy(), t["eval_every"], t["eval_train"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _metrics_payload(ranking: str, values: dict[str, float], std: dict[str, float] | None = None,
                     **extra) -> dict:
    metrics = {k: {"mean": v, "std": None if std is None else std.get(k)} for k, v in values.items()}
    return {"ranking_metric": ranking, "metrics": metrics, **extra}


# -- commands -----------------------------------------------------------------

def cmd_featurize(cfg: ExperimentConfig, args) -> int:
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    cache = _cache(cfg)
    failures = 0
    for e in manifest.entries:
        try:
            cache.get_or_compute(manifest.resolve(e), e.sample_id)
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"FAILED {e.sample_id}: {exc}", file=sys.stderr)
    total = sum(p.stat().st_size for p in cache.entries())
    s = cache.stats
    print(f"{len(manifest.entries) - failures} entries ready ({s.computed} computed, {s.hits} cached, "
          f"{s.repaired} repaired), {failures} failed, {len(cache.entries())} cache files, {total} bytes")
    return EXIT_DATA if failures else EXIT_OK


def _fit(cfg, manifest, layout, train_entries, val_entries, cache, run: Path | None, tag: str = ""):
    train = _features(manifest, train_entries, cache)
    val = _features(manifest, val_entries, cache) if val_entries else None
    model = _new_model(cfg, layout)
    tcfg = _train_config(cfg)
    ckpt = run / "checkpoints" / tag if run is not None else None
    if tcfg.epochs == 0:
        if ckpt is not None:
            save_model(model, ckpt / "last", {"epoch": 0})
        return model, None, []
    history_path = run / (f"{tag}.{HISTORY_FILE}" if tag else HISTORY_FILE) if run is not None else None
    rows = []
    def on_epoch(row):
        rows.append(json.dumps(row, sort_keys=True))
        if history_path is not None:
            history_path.write_text("\n".join(rows) + "\n")
    result = train_model(model, train.X, _targets(manifest, train_entries, layout), cfg.optimizer(), tcfg,
                         layout, val.X if val else None,
                         _targets(manifest, val_entries, layout) if val else None, on_epoch=on_epoch)
    if ckpt is not None:
        save_model(model, ckpt / "last", {"epoch": len(result.history), "steps": result.steps})
        if result.best_state is not None:
            best = DualBackboneModel(model.cfg)
            best.load_state_dict(result.best_state)
            save_model(best, ckpt / "best", {"epoch": result.best_epoch})
    return model, result, result.history


def cmd_train(cfg: ExperimentConfig, args) -> int:
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    layout = _layout(manifest)
    ranking = cfg["train.best_metric"] or layout.default_best_metric()
    run = _run_dir(args.out, cfg)
    cache = _cache(cfg)
    validate = manifest.select(split="validate")
    if validate or manifest.n_folds < 2:
        _, result, history = _fit(cfg, manifest, layout, manifest.select(split="train"), validate, cache, run)
        if result is not None and result.best_epoch is not None:
            best_row = history[result.best_epoch - 1]
            values = {k: v for k, v in best_row.items() if "/" in k and not k.startswith("train:")}
            payload = _metrics_payload(ranking, values, mode="split", best_epoch=result.best_epoch)
        else:
            payload = _metrics_payload(ranking, {}, mode="split", best_epoch=None)
        payload["final_train_loss"] = history[-1]["train_loss"] if history else None
    else:
        def fit_and_score(train_entries, held, fold):
            _, _, history = _fit(cfg, manifest, layout, train_entries, held, cache, run, f"fold{fold}")
            return [{k: v for k, v in row.items() if "/" in k and not k.startswith("train:")} for row in history]
        cv = cross_validate(manifest, fit_and_score)
        payload = _metrics_payload(ranking, {k: m for k, (m, _) in cv.summary.items()},
                                   {k: s for k, (_, s) in cv.summary.items()}, mode="crossval",
                                   folds=[{"fold": r.fold, "best": r.best, "best_epoch": r.best_epoch}
                                          for r in cv.folds])
    _write_json(run / METRICS_FILE, payload)
    print(f"run written to {run}")
    return EXIT_OK


def _checkpoint_path(args) -> Path:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required for this command")
    path = Path(args.checkpoint)
    if (path / "checkpoints").is_dir():
        sub = path / "checkpoints"
        path = sub / "best" if (sub / "best").is_dir() else sub / "last"
    if not (path / "manifest.json").exists():
        raise ConfigError(f"{args.checkpoint} is not a checkpoint")
    return path


def _load_compatible(path: Path, layout: TargetLayout) -> DualBackboneModel:
    n = read_manifest(path)["meta"].get("model_config", {}).get("n_classes")
    if n != layout.n_outputs:
        raise ConfigError(f"checkpoint predicts {n} classes but the task needs {layout.n_outputs}")
    return load_model(path)


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    layout = _layout(manifest)
    ranking = cfg["train.best_metric"] or layout.default_best_metric()
    model = _load_compatible(_checkpoint_path(args), layout)
    cache = _cache(cfg)
    validate = manifest.select(split="validate")
    if validate or manifest.n_folds < 2:
        entries = validate or manifest.entries
        batch = _features(manifest, entries, cache)
        payload = _metrics_payload(ranking, evaluate(model, batch.X, _targets(manifest, entries, layout), layout),
                                   mode="split")
    else:
        results = []
        for k in manifest.fold_ids():
            entries = manifest.select(folds={k})
            batch = _features(manifest, entries, cache)
            scores = evaluate(model, batch.X, _targets(manifest, entries, layout), layout)
            results.append(FoldResult(k, scores, {name: 0 for name in scores}))
        summary = summarize(results)
        payload = _metrics_payload(ranking, {k: m for k, (m, _) in summary.items()},
                                   {k: s for k, (_, s) in summary.items()}, mode="crossval")
    print(render_table([("eval", payload)], ranking))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / METRICS_FILE, payload)
    return EXIT_OK


def cmd_relabel(cfg: ExperimentConfig, args) -> int:
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    layout = _layout(manifest)
    model = _load_compatible(_checkpoint_path(args), layout)
    if args.out is None:
        raise ConfigError("--out is required for relabel")
    experts = {e.sample_id for e in manifest.select(split="validate")}
    if cfg["data.annotations"]:
        ann_path = Path(cfg["data.annotations"])
        if not ann_path.exists():
            raise ConfigError(f"annotation file {ann_path} does not exist")
        experts |= load_annotations(ann_path, manifest.n_classes).expert_ids()
    cache = _cache(cfg)
    todo = [e for e in manifest.entries if e.sample_id not in experts]
    feats = dict(zip((e.sample_id for e in todo), _features(manifest, todo, cache).X)) if todo else {}
    fine = manifest.label_matrix()
    labels = {e.sample_id: ClipLabel(fine[i]) for i, e in enumerate(manifest.entries)}
    outcome = relabel_dataset(fine_predictor(model, layout), feats, labels, experts, cfg.relabel(),
                              manifest.taxonomy)
    new = manifest.with_labels({sid: lab.ids() for sid, lab in outcome.labels.items() if sid not in experts})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    new.save(out / "manifest.csv")
    stats = {"flips_per_class": outcome.flips_per_class.tolist(), "total_flips": outcome.total_flips,
             "changed_samples": outcome.changed_samples, "protected": len(experts & set(labels))}
    _write_json(out / "relabel_stats.json", stats)
    print("flips per class: " + " ".join(f"{c}:{n}" for c, n in enumerate(outcome.flips_per_class)))
    print(f"{outcome.total_flips} flips over {len(outcome.changed_samples)} samples; "
          f"{stats['protected']} protected samples unchanged")
    return EXIT_OK


# -- report -------------------------------------------------------------------

def _metric_order(name: str) -> tuple:
    gran, _, metric = name.partition("/")
    gran_rank = {"coarse": 0, "fine": 1, "all": 2}.get(gran, 3)
    return gran_rank, gran, METRIC_NAMES.index(metric) if metric in METRIC_NAMES else len(METRIC_NAMES), metric


def _cell(entry: dict | None) -> str:
    if entry is None:
        return "-"
    if entry.get("std") is None:
        return f"{entry['mean']:.4f}"
    return f"{entry['mean']:.4f} ± {entry['std']:.4f}"


def render_table(runs: Sequence[tuple[str, dict | None]], ranking: str | None = None) -> str:
    """Tab-delimited table: one row per granularity/metric, one column per run.
    A ``None`` payload renders as an error column."""
    names = sorted({k for _, p in runs if p for k in p["metrics"]}, key=_metric_order)
    rankings = {p["ranking_metric"] for _, p in runs if p} if ranking is None else {ranking}
    lines = ["\t".join(["metric"] + [label for label, _ in runs])]
    for name in names:
        flag = " *" if name in rankings else ""
        cells = [_cell(p["metrics"].get(name)) if p else "ERROR" for _, p in runs]
        lines.append("\t".join([name + flag] + cells))
    lines.append("# * ranking metric; ± is the population standard deviation across folds")
    return "\n".join(lines)


def load_run_metrics(run: Path) -> dict:
    path = Path(run) / METRICS_FILE
    if not path.exists():
        raise DataError(f"{run}: missing {METRICS_FILE}")
    try:
        payload = json.loads(path.read_text())
        for entry in payload["metrics"].values():
            float(entry["mean"])
        payload["ranking_metric"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{run}: malformed {METRICS_FILE} ({exc})") from None
    return payload


def cmd_report(args) -> int:
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    runs, failed = [], False
    for run in args.runs:
        try:
            runs.append((Path(run).name, load_run_metrics(Path(run))))
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            runs.append((Path(run).name, None))
            failed = True
    table = render_table(runs)
    print(table)
    if args.out is not None:
        Path(args.out).write_text(table + "\n")
    return EXIT_DATA if failed else EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soundtag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("featurize", "train", "eval", "relabel"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment configuration file")
        p.add_argument("--seed", type=int, help="overrides train.seed")
        p.add_argument("--out", help="run or output directory")
        p.add_argument("--checkpoint", help="checkpoint directory or run directory")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--out", help="also write the table to this file")
    return parser


def _dotted_flags(extra: list[str]) -> list[str]:
    """Turn ``--section.key value`` / ``--section.key=value`` leftovers into overrides."""
    out, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument {token}")
        key = token[2:]
        if "=" in key:
            out.append(key)
            i += 1
        elif i + 1 < len(extra):
            out.append(f"{key}={extra[i + 1]}")
            i += 2
        else:
            raise ConfigError(f"flag {token} needs a value")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    handlers = list(logging.getLogger("soundtag").handlers)
    try:
        if args.command == "report":
            if extra:
                raise ConfigError(f"unrecognized arguments {extra}")
            return cmd_report(args)
        overrides = list(args.override) + _dotted_flags(extra)
        if args.seed is not None:
            overrides.append(f"train.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        logging.getLogger("soundtag").setLevel(logging.INFO)
        command = {"featurize": cmd_featurize, "train": cmd_train, "eval": cmd_eval,
                   "relabel": cmd_relabel}[args.command]
        return command(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        logger = logging.getLogger("soundtag")
        for h in list(logger.handlers):
            if h not in handlers:
                logger.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
