"""``emoscore`` command-line entry point.

    emoscore <synth|train|predict|fuse|evaluate> --config <path> [--seed N] [--dry-run]

Stages talk to each other only through files. Every command writes its
outputs atomically, holds a lock on its output directory, and removes
anything it wrote if it fails part-way.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from ._parallel import parallel_map
from .augment import NoiseBank
from .checkpoint import encode_checkpoint, load_checkpoint
from .config import ExperimentConfig, load_config
from .dataio import (
    N_EMOTIONS,
    DatasetManifest,
    ScoreTable,
    format_manifest,
    format_score_table,
    load_features,
    load_manifest,
    read_score_table,
    split_dataset,
)
from .errors import EmoscoreError, ValidationError
from .evaluation import EvalReport, format_comparison, rmse
from .fusion import assign_weights_by_val_rmse, fuse
from .model import ModelParams, model_forward
from .synthdata import generate
from .train import best_val_rmse, format_history, train

log = logging.getLogger("emoscore")

LOCK_NAME = ".emoscore.lock"
VAL_RMSE_FILE = "val_rmse.tsv"


class Outputs:
    """Tracks files written by one command so a failure can roll them back."""

    def __init__(self, dry_run: bool = False):
        self.dry_run = dry_run
        self.written: list[Path] = []
        self.created_dirs: list[Path] = []

    def mkdir(self, path: Path) -> None:
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.created_dirs += reversed(missing)

    def write(self, path: Path, data: bytes | str) -> None:
        if self.dry_run:
            log.info("dry run: would write %s", path)
            return
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.mkdir(path.parent)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(path)

    def rollback(self) -> None:
        for p in reversed(self.written):
            p.unlink(missing_ok=True)
        for d in reversed(self.created_dirs):
            try:
                d.rmdir()
            except OSError:
                pass


@contextmanager
def locked_outputs(directory: Path, dry_run: bool) -> Iterator[Outputs]:
    out = Outputs(dry_run)
    if dry_run:
        yield out
        return
    out.mkdir(directory)
    lock = FileLock(str(directory / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise EmoscoreError(f"{directory} is locked by another emoscore process") from None
    try:
        yield out
    except BaseException:
        out.rollback()
        raise
    finally:
        lock.release()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, args) -> None:
    spec, out_dir = cfg.synth_spec()
    if args.output_dir:
        out_dir = Path(args.output_dir)
    if args.dry_run:
        log.info("synth spec valid: %d train-pool + %d test utterances -> %s",
                 spec.n_train_pool, spec.n_test, out_dir)
        return
    with tempfile.TemporaryDirectory(prefix="emoscore-synth-") as tmp, locked_outputs(out_dir, False) as outs:
        generate(spec, tmp)
        for src in sorted(Path(tmp).rglob("*")):
            if src.is_file():
                outs.write(out_dir / src.relative_to(tmp), src.read_bytes())
    log.info("wrote corpus with %d utterances to %s", spec.n_train_pool + spec.n_test, out_dir)


def _prepare_run_manifest(path: Path, val_fraction: float, seed: int) -> DatasetManifest:
    manifest = load_manifest(path)
    if any(r.split == "val" for r in manifest):
        return DatasetManifest([r for r in manifest if r.split != "test"], manifest.base_dir)
    pool = manifest.subset("train")
    return split_dataset(pool, val_fraction, seed)


def _rebase(manifest: DatasetManifest, new_base: Path) -> DatasetManifest:
    """Rewrite feature paths so they resolve from ``new_base``."""
    records = [replace(r, feature_path=os.path.relpath(manifest.resolve(r), new_base)) for r in manifest]
    return DatasetManifest(records, new_base)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    settings = cfg.train_settings()
    runs = cfg.runs()
    model_cfg = cfg.model_config()
    plans = []
    # validate everything before any training starts
    bank = None
    if any(r.noise_probability > 0 for r in runs):
        if settings["noise_dir"] is None:
            raise ValidationError("runs with noise_probability > 0 need [train].noise_dir")
        bank = NoiseBank.from_dir(settings["noise_dir"])
    for run in runs:
        train_cfg = cfg.train_config(run)
        if not run.manifest.exists():
            raise ValidationError(f"run {run.label!r}: manifest {run.manifest} does not exist")
        manifest = _prepare_run_manifest(run.manifest, settings["val_fraction"], cfg.run_seed(run))
        features = load_features(manifest, model_cfg.input_dim)
        plans.append((run, train_cfg, manifest, features))
    if args.dry_run:
        for run, train_cfg, manifest, _ in plans:
            log.info("run %s valid: %d train / %d val, p=%g", run.label, len(manifest.subset("train")),
                     len(manifest.subset("val")), train_cfg.augment.noise_probability)
        return
    init = ModelParams.init(model_cfg)
    out_dir = settings["output_dir"]
    val_lines = []
    with locked_outputs(out_dir, False) as outs:
        for run, train_cfg, manifest, features in plans:
            log.info("training run %s (p=%g, %d epochs)", run.label, train_cfg.augment.noise_probability,
                     train_cfg.max_epochs)
            params, history = train(manifest, bank, model_cfg, init, train_cfg, features)
            run_dir = out_dir / run.label
            meta = {"run": run.label, "noise_probability": train_cfg.augment.noise_probability,
                    "best_val_rmse": best_val_rmse(history)}
            outs.write(run_dir / "checkpoint.emoc", encode_checkpoint(model_cfg, params, meta))
            outs.write(run_dir / "history.tsv", "# epoch\ttrain_loss\tval_rmse\tlr\n" + format_history(history))
            outs.write(run_dir / "split.tsv", format_manifest(_rebase(manifest, run_dir)))
            val_lines.append(f"{run.label}\t{best_val_rmse(history)!r}")
        outs.write(out_dir / VAL_RMSE_FILE, "# run\tval_rmse\n" + "".join(line + "\n" for line in val_lines))


def cmd_predict(cfg: ExperimentConfig, args) -> None:
    sec = cfg.section("predict")
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.path(sec.get("checkpoint"))
    manifest_path = Path(args.manifest) if args.manifest else cfg.path(sec.get("manifest"))
    output = Path(args.output) if args.output else cfg.path(sec.get("output"))
    split = args.split or sec.get("split")
    if checkpoint is None or manifest_path is None or output is None:
        raise ValidationError("predict needs checkpoint, manifest and output")
    model_cfg, params, meta = load_checkpoint(checkpoint)
    manifest = load_manifest(manifest_path)
    if split:
        manifest = manifest.subset(split)
    features = load_features(manifest, model_cfg.input_dim)
    if args.dry_run:
        log.info("predict inputs valid: %d utterances", len(manifest))
        return
    scores = parallel_map(lambda rec: model_forward(features[rec.id], params, model_cfg, clamp=True).scores,
                          list(manifest))
    table = ScoreTable.from_matrix(meta.get("run", checkpoint.stem), manifest.ids,
                                   np.array(scores).reshape(len(manifest), N_EMOTIONS),
                                   {r.id: r.feature_path for r in manifest})
    with locked_outputs(output.parent, False) as outs:
        outs.write(output, format_score_table(table, [f"checkpoint: {checkpoint.name}"]))


def read_val_rmse(path: Path) -> dict[str, float]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{lineno}: expected label<TAB>val_rmse")
        out[parts[0]] = float(parts[1])
    return out


def cmd_fuse(cfg: ExperimentConfig, args) -> None:
    sec = cfg.section("fuse")
    method = cfg.fuse_method(args.method)
    inputs = [Path(p) for p in args.inputs] if args.inputs else [cfg.path(p) for p in sec.get("inputs", [])]
    output = Path(args.output) if args.output else cfg.path(sec.get("output"))
    if not inputs or output is None:
        raise ValidationError("fuse needs input score files and an output path")
    tables = []
    for p in inputs:
        try:
            tables.append(read_score_table(p))
        except (OSError, EmoscoreError) as exc:
            raise EmoscoreError(f"{p}: {exc}") from None
    header = [f"method: {method}", "inputs: " + ", ".join(p.name for p in inputs)]
    weights = None
    if method == "weighted":
        val_path = Path(args.val_rmse) if args.val_rmse else cfg.path(sec.get("val_rmse"))
        if val_path is None:
            raise ValidationError("weighted fusion needs a val-rmse file")
        val = read_val_rmse(val_path)
        missing = [t.label for t in tables if t.label not in val]
        if missing:
            raise ValidationError(f"{val_path}: no validation RMSE for runs {missing}")
        weights = assign_weights_by_val_rmse([(t.label, val[t.label]) for t in tables])
        header.append("weights: " + ", ".join(f"{t.label}={w!r}" for t, w in zip(tables, weights)))
    try:
        fused = fuse(method, tables, weights, label=f"{method}({'+'.join(t.label for t in tables)})")
    except EmoscoreError as exc:
        raise EmoscoreError(f"fusing {', '.join(map(str, inputs))}: {exc}") from None
    if args.dry_run:
        log.info("fusion inputs valid: %d tables x %d utterances", len(tables), len(fused.scores))
        return
    with locked_outputs(output.parent, False) as outs:
        outs.write(output, format_score_table(fused, header))


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    sec = cfg.section("evaluate")
    preds = [Path(p) for p in args.predictions] if args.predictions else [cfg.path(p) for p in sec.get("predictions", [])]
    truth_path = Path(args.truth) if args.truth else cfg.path(sec.get("truth"))
    out_dir = Path(args.output_dir) if args.output_dir else cfg.path(sec.get("output_dir", "reports"))
    split = args.split or sec.get("split")
    if not preds or truth_path is None:
        raise ValidationError("evaluate needs prediction files and a truth manifest")
    truth_m = load_manifest(truth_path)
    if split:
        truth_m = truth_m.subset(split)
    unlabeled = [r.id for r in truth_m if r.labels is None]
    if unlabeled:
        raise ValidationError(f"{truth_path}: records without labels: {', '.join(unlabeled[:5])}")
    truth = truth_m.labels()
    reports: list[tuple[Path, EvalReport]] = []
    for p in preds:
        table = read_score_table(p)
        try:
            reports.append((p, rmse(table, truth, label=table.label)))
        except EmoscoreError as exc:
            raise EmoscoreError(f"{p}: {exc}") from None
    if args.dry_run:
        return
    with locked_outputs(out_dir, False) as outs:
        for p, rep in reports:
            outs.write(out_dir / f"{p.stem}.report.txt", rep.format_table())
            outs.write(out_dir / f"{p.stem}.metrics.tsv", rep.format_metrics())
            sys.stdout.write(rep.format_table())
        if len(reports) > 1:
            comparison = format_comparison([r for _, r in reports])
            outs.write(out_dir / "comparison.txt", comparison)
            sys.stdout.write(comparison)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emoscore", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override the config's base seed")
        p.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("synth", "generate a synthetic corpus")
    p.add_argument("--output-dir")
    add("train", "fine-tune the classifier head for every configured run")
    p = add("predict", "write clamped scores for a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--output")
    p.add_argument("--split", choices=("train", "val", "test"))
    p = add("fuse", "fuse score tables")
    p.add_argument("--method", choices=("average", "weighted", "max"))
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--val-rmse")
    p.add_argument("--output")
    p = add("evaluate", "RMSE reports against a labeled manifest")
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--truth")
    p.add_argument("--output-dir")
    p.add_argument("--split", choices=("train", "val", "test"))
    return parser


def apply_seed(cfg: ExperimentConfig, seed: int | None) -> None:
    if seed is None:
        return
    if seed < 0:
        raise ValidationError("--seed must be non-negative")
    cfg.seed = seed
    for name in ("synth", "train", "model"):
        cfg.raw.setdefault(name, {})["seed"] = seed


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.dry_run else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        apply_seed(cfg, args.seed)
        COMMANDS[args.command](cfg, args)
    except (EmoscoreError, OSError, ValueError) as exc:
        print(f"emoscore {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
