"""Command-line entry point: ``train``, ``eval``, ``analyze`` and ``gradcheck``.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 numeric abort,
4 checkpoint error, 5 bad analysis inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import gradsuite
from .analysis import AnalysisError, CurvePoint, cam, emit_curves, miou, similarity_regions, threshold_mask, write_pgm
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_model, restore_into
from .config import ConfigError, RunConfig, build_datasets, load_config, parse_config
from .data import DataError, Dataset, load_csv
from .losses import divergence_weights, similarity_map
from .nn import Adapter, Model, apply_adapter
from .tensor import Tensor, no_grad
from .trainer import CSV_COLUMNS, NumericalError, PlanError, Trainer, evaluate, pretrain

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_ANALYSIS = range(6)
OUTPUT_ENV = "ADMKD_OUTPUT_DIR"
LOCK_NAME = ".lock"

log = logging.getLogger("admkd")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ----------------------------------------------------------------------
# train


class LockError(RuntimeError):
    pass


@contextmanager
def output_lock(directory: Path):
    """Sentinel file guarding an output directory against concurrent runs."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path: Path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])


def read_metrics(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            row = {"epoch": int(r["epoch"]), "model": r["model"]}
            row.update({c: float(r[c]) for c in CSV_COLUMNS[2:]})
            rows.append(row)
    return rows


def _latest_complete_epoch(ckpt_dir: Path, names: List[str]) -> Optional[int]:
    epochs = None
    for name in names:
        found = {int(m.group(1)) for p in ckpt_dir.glob(f"{name}_e*.json")
                 if (m := re.fullmatch(re.escape(name) + r"_e(\d+)\.json", p.name))}
        epochs = found if epochs is None else epochs & found
    return max(epochs) if epochs else None


def _build_models(cfg: RunConfig, train: Dataset) -> List[Model]:
    specs = cfg.model_specs(train.shape, train.num_classes)
    return [Model(spec, seed) for spec, seed in zip(specs, cfg.model_seeds())]


def _prepare_offline_teacher(cfg: RunConfig, models: List[Model], train: Dataset) -> None:
    t = [m["role"] for m in cfg.models].index("teacher")
    path = cfg.run["teacher_checkpoint"]
    if path:
        restore_into(models[t], load_checkpoint(cfg.base_dir / path))
    elif cfg.run["teacher_pretrain_epochs"] > 0:
        plan = cfg.plan()
        pretrain(models[t], train, plan.optim, cfg.run["teacher_pretrain_epochs"], plan.batch_size,
                 plan.seed, plan.augment)


def _write_reference(trainer: Trainer, ckpt_dir: Path, epoch: int) -> Optional[str]:
    """Copy the best teacher's checkpoint at ``epoch`` to reference.{json,bin}."""
    rows = [r for r in trainer.history if r["epoch"] == epoch - 1]
    best, best_acc = None, -math.inf
    for i, name in enumerate(trainer.names):
        if trainer.plan.roles[i] != "teacher":
            continue
        acc = next((r["top1-test"] for r in rows if r["model"] == name), math.nan)
        acc = -1.0 if math.isnan(acc) else acc
        if acc > best_acc:
            best, best_acc = name, acc
    if best is None:
        return None
    src = ckpt_dir / f"{best}_e{epoch:04d}"
    manifest = json.loads(src.with_suffix(".json").read_text())
    manifest["blob"] = "reference.bin"
    shutil.copyfile(src.with_suffix(".bin"), ckpt_dir / "reference.bin")
    (ckpt_dir / "reference.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return best


def cmd_train(config_path, resume: bool = False) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _err(f"config: {exc}")
        return EXIT_CONFIG
    out = Path(os.environ.get(OUTPUT_ENV) or cfg.run["output_dir"])
    if not out.is_absolute() and not os.environ.get(OUTPUT_ENV):
        out = cfg.base_dir / out
    try:
        train, test = cfg.datasets()
    except (DataError, OSError) as exc:
        _err(f"data: {exc}")
        return EXIT_CONFIG
    try:
        with output_lock(out):
            return _run_training(cfg, train, test, out, resume)
    except LockError as exc:
        _err(str(exc))
        return EXIT_CONFIG


def _run_training(cfg: RunConfig, train: Dataset, test: Dataset, out: Path, resume: bool) -> int:
    ckpt_dir = out / "checkpoints"
    metrics_path = out / "metrics.csv"
    try:
        models = _build_models(cfg, train)
        if cfg.run["mode"] == "offline" and not resume:
            _prepare_offline_teacher(cfg, models, train)
        trainer = Trainer(models, cfg.plan(), train, test, [m["name"] for m in cfg.models])
    except (PlanError, ValueError) as exc:
        _err(f"config: {exc}")
        return EXIT_CONFIG
    except CheckpointError as exc:
        _err(f"checkpoint: {exc}")
        return EXIT_CHECKPOINT

    rows: List[dict] = []
    if resume:
        epoch = _latest_complete_epoch(ckpt_dir, trainer.names) if ckpt_dir.exists() else None
        if epoch is None:
            _err(f"checkpoint: nothing to resume in {ckpt_dir}")
            return EXIT_CHECKPOINT
        try:
            trainer.load(ckpt_dir, epoch)
        except (CheckpointError, KeyError) as exc:
            _err(f"checkpoint: {exc}")
            return EXIT_CHECKPOINT
        if metrics_path.exists():
            rows = [r for r in read_metrics(metrics_path) if r["epoch"] < epoch]
            trainer.history = list(rows)
        log.info("resuming from epoch %d", epoch)
    else:
        (out / "config.json").write_text(cfg.dumps())
        trainer.save(ckpt_dir, 0)

    every = cfg.run["checkpoint_every"]

    def on_epoch_end(tr: Trainer, epoch: int, epoch_rows: List[dict]) -> None:
        rows.extend(epoch_rows)
        write_metrics(metrics_path, rows)
        done = epoch + 1
        if (every and done % every == 0) or done == tr.plan.epochs:
            tr.save(ckpt_dir, done)

    try:
        trainer.fit(on_epoch_end=on_epoch_end)
    except NumericalError as exc:
        write_metrics(metrics_path, rows)
        _err(f"numeric abort: {exc}")
        return EXIT_NUMERIC

    final = trainer.completed_epochs
    reference = _write_reference(trainer, ckpt_dir, final)
    last = {r["model"]: r for r in rows if r["epoch"] == final - 1}
    summary = {
        "mode": cfg.run["mode"],
        "epochs": final,
        "reference": reference,
        "models": {name: {"role": role, "top1-train": last.get(name, {}).get("top1-train"),
                          "top1-test": last.get(name, {}).get("top1-test")}
                   for name, role in zip(trainer.names, trainer.plan.roles)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------
# eval


def load_data_arg(path, split: str = "test") -> Dataset:
    """A run config (its data section), a bare data-section JSON, or a CSV file."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_csv(path, split=split)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read data description ({exc})") from None
    if "models" not in doc:
        doc = {"models": [{"name": "a", "role": "teacher", "preset": "tiny-b"},
                          {"name": "b", "role": "student", "preset": "tiny-b"}], "data": doc}
    cfg = parse_config(doc, path.parent)
    train, test = build_datasets(cfg.data, cfg.base_dir)
    return train if split == "train" else test


def cmd_eval(checkpoint, data, split: str = "test") -> int:
    try:
        model = load_model(checkpoint)
    except CheckpointError as exc:
        _err(f"checkpoint: {exc}")
        return EXIT_CHECKPOINT
    try:
        ds = load_data_arg(data, split)
        top1, loss = evaluate(model, ds)
    except (DataError, ConfigError, ValueError) as exc:
        _err(f"data: {exc}")
        return EXIT_CONFIG
    print(json.dumps({"top1": top1, "mean_ce": loss, "samples": len(ds), "split": split}, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------
# analyze


def _last_taps(model: Model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        feats, _ = model.forward(Tensor(images), train=False)
    return feats[-1].data


def _cam_masks(model: Model, feats: np.ndarray, labels: np.ndarray, t: float = 0.5):
    w = model.head.weight.data
    relu = np.maximum(feats, 0)
    return [threshold_mask(cam(relu[i], w[labels[i]]), "frac-of-max", t) for i in range(len(labels))]


def _scan_checkpoints(ckpt_dir: Path) -> Dict[str, Dict[int, Path]]:
    found: Dict[str, Dict[int, Path]] = {}
    for p in sorted(ckpt_dir.glob("*_e*.json")):
        m = re.fullmatch(r"(.+)_e(\d+)\.json", p.name)
        if m:
            found.setdefault(m.group(1), {})[int(m.group(2))] = p
    return found


def cmd_analyze(ckpt_dir, data, out_dir, samples: int = 64, dump_masks: int = 4) -> int:
    ckpt_dir, out_dir = Path(ckpt_dir), Path(out_dir)
    if (ckpt_dir / "checkpoints").is_dir():
        ckpt_dir = ckpt_dir / "checkpoints"
    ref_path = ckpt_dir / "reference.json"
    if not ref_path.exists():
        _err(f"analysis: no reference checkpoint at {ref_path}")
        return EXIT_ANALYSIS
    found = _scan_checkpoints(ckpt_dir)
    if not found:
        _err(f"analysis: no model checkpoints in {ckpt_dir}")
        return EXIT_ANALYSIS
    try:
        reference = load_model(ref_path)
        ds = load_data_arg(data, "test")
    except CheckpointError as exc:
        _err(f"checkpoint: {exc}")
        return EXIT_CHECKPOINT
    except (DataError, ConfigError, ValueError) as exc:
        _err(f"analysis: {exc}")
        return EXIT_ANALYSIS
    n = min(samples, len(ds))
    images, labels = ds.images[:n], ds.labels[:n]
    try:
        tor = _cam_masks(reference, _last_taps(reference, images), labels)
    except ValueError as exc:
        _err(f"analysis: reference does not fit the data ({exc})")
        return EXIT_ANALYSIS

    out_dir.mkdir(parents=True, exist_ok=True)
    cam_points: List[CurvePoint] = []
    region_points: List[CurvePoint] = []
    stats_rows: Dict[str, List[tuple]] = {}
    try:
        ckpts: Dict[str, Dict[int, Checkpoint]] = {
            name: {e: load_checkpoint(p) for e, p in by_epoch.items()} for name, by_epoch in found.items()}
    except CheckpointError as exc:
        _err(f"checkpoint: {exc}")
        return EXIT_CHECKPOINT
    roles = {name: next(iter(c.values())).role for name, c in ckpts.items()}
    taps: Dict[str, Dict[int, np.ndarray]] = {}
    for name, by_epoch in ckpts.items():
        taps[name] = {}
        for epoch, c in sorted(by_epoch.items()):
            model = Model(c.spec, 0)
            restore_into(model, c)
            try:
                taps[name][epoch] = _last_taps(model, images)
            except ValueError as exc:
                _err(f"analysis: {name} does not fit the data ({exc})")
                return EXIT_ANALYSIS
            masks = _cam_masks(model, taps[name][epoch], labels)
            score = float(np.mean([miou(a, b) for a, b in zip(masks, tor)]))
            cam_points.append(CurvePoint(epoch, f"cam-miou/{name}", score))

    teachers = [n for n, r in roles.items() if r == "teacher"]
    students = [n for n, r in roles.items() if r == "student"]
    for t in teachers:
        for s in students:
            pair = f"{t}-{s}"
            rows = []
            for epoch in sorted(set(taps[t]) & set(taps[s])):
                fs = taps[s][epoch]
                c = ckpts[s][epoch]
                key = f"adapter/{t}/{len(c.spec.stage_widths) - 1}"
                if key in c.arrays:
                    w = c.arrays[key]
                    with no_grad():
                        fs = apply_adapter(Adapter(w.shape[1], w.shape[0], weight=w), Tensor(fs)).data
                if fs.shape != taps[t][epoch].shape:
                    _err(f"analysis: {pair} features differ in shape at epoch {epoch}")
                    return EXIT_ANALYSIS
                sim = similarity_map(fs, taps[t][epoch])
                sim_scores, dis_scores = [], []
                for i in range(n):
                    similar, discrepancy = similarity_regions(sim.values[i])
                    sim_scores.append(miou(similar, tor[i]))
                    dis_scores.append(miou(discrepancy, tor[i]))
                    if i < dump_masks and epoch == max(taps[t]):
                        write_pgm(similar, out_dir / f"mask_{pair}_sample{i}_similar.pgm")
                        write_pgm(discrepancy, out_dir / f"mask_{pair}_sample{i}_discrepancy.pgm")
                region_points.append(CurvePoint(epoch, f"similar-miou/{pair}", float(np.mean(sim_scores))))
                region_points.append(CurvePoint(epoch, f"discrepancy-miou/{pair}", float(np.mean(dis_scores))))
                w_di = divergence_weights(sim).astype(np.float64)
                rows.append((epoch, float(w_di.min()), float(w_di.max()), float(w_di.var())))
            stats_rows[pair] = rows
    for i in range(min(dump_masks, n)):
        write_pgm(tor[i], out_dir / f"mask_reference_sample{i}.pgm")

    try:
        emit_curves(cam_points, out_dir / "cam_miou.csv")
        emit_curves(region_points, out_dir / "region_miou.csv")
        for pair, rows in stats_rows.items():
            with open(out_dir / f"sim_stats_{pair}.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["epoch", "min", "max", "variance"])
                for r in rows:
                    writer.writerow([r[0]] + [repr(v) for v in r[1:]])
    except (AnalysisError, OSError) as exc:
        _err(f"analysis: {exc}")
        return EXIT_ANALYSIS
    print(json.dumps({"cam_points": len(cam_points), "region_points": len(region_points),
                      "pairs": sorted(stats_rows)}, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(registry=None, seed: int = 0) -> int:
    reports = gradsuite.run_suite(registry, seed=seed)
    print(gradsuite.format_table(reports))
    failing = [r.op_name for r in reports if not r.passed]
    if failing:
        print(f"FAILED: {', '.join(failing)}")
        return EXIT_CHECK
    print(f"all {len(reports)} checks passed")
    return EXIT_OK


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admkd", description="Online distillation with asymmetric decision-making.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training configuration")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue from the latest complete checkpoint")

    p = sub.add_parser("eval", help="top-1 and mean CE of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data", help="run config, data-section JSON, or CSV file")
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("analyze", help="CAM / similarity-region curves over saved checkpoints")
    p.add_argument("ckpt_dir")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--samples", type=int, default=64)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.resume)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.data, args.split)
    if args.command == "analyze":
        return cmd_analyze(args.ckpt_dir, args.data, args.out, args.samples)
    return cmd_gradcheck(seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
