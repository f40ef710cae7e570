"""``synthct`` command line: phantom, preprocess, train, synthesize, evaluate, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 failed checks.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradsuite, metrics
from .checkpoint import CheckpointError
from .config import RunConfig, RunConfigError, dump, resolve
from .model import ConfigError
from .phantom import PhantomConfig, PhantomConfigError, generate_dataset, read_manifest
from .preprocess import MANIFEST_FILE, DatasetError, load_dataset, load_stats, preprocess_dataset
from .sampler import sliding_window_predict
from .trainer import TrainError, load_checkpoint, train
from .volume import IntensitySpace, VolumeError, denormalize, load_mask, load_volume, save_volume

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKS = 0, 2, 3, 4

log = logging.getLogger("synthct")


class ChecksFailed(RuntimeError):
    pass


def _select(records: list[dict], split: str, cases: list[str]) -> list[dict]:
    if cases:
        known = {r["case_id"] for r in records}
        missing = [c for c in cases if c not in known]
        if missing:
            raise DatasetError(f"unknown case ids {missing}")
        return [r for r in records if r["case_id"] in cases]
    if split == "all":
        return records
    if split not in ("train", "test"):
        raise RunConfigError(f"split: expected train, test or all, got {split!r}")
    return [r for r in records if r.get("split") == split]


def cmd_phantom(cfg: RunConfig, out: Path) -> None:
    p = cfg.phantom
    pc = PhantomConfig(tuple(p.shape), tuple(p.spacing_mm), cfg.seed, p.n_bone_shells, p.n_air_pockets,
                       p.ct_noise_sigma, p.mri_noise_sigma, p.bias_field_amplitude)
    records = generate_dataset(p.n_cases, pc, out)
    n_test = sum(r["split"] == "test" for r in records)
    log.info("wrote %d cases (%d train / %d test) to %s", len(records), len(records) - n_test, n_test, out)


def cmd_preprocess(cfg: RunConfig, out: Path) -> None:
    p = cfg.preprocess
    data = preprocess_dataset(p.raw_dir, out, p.clip_lo, p.clip_hi, p.stats_in_outline)
    log.info("CT stats from %d train cases: mean %.3f HU, std %.3f HU",
             len(data.split("train")), data.ct_stats.mean, data.ct_stats.std)


def cmd_train(cfg: RunConfig, out: Path) -> None:
    data = load_dataset(cfg.train.data_dir)
    tc = cfg.train.train_config()

    def progress(rec):
        log.info("epoch %d lr %.3e loss %.3f", rec["epoch"], rec["lr"], rec["loss"])

    result = train(tc, data, out, resume_from=cfg.train.resume_from, progress=progress)
    for v in result.validation:
        log.info("validation after %d epochs: wMAE %.2f HU", v["epochs_trained"], v["val_wmae"])
    log.info("final checkpoint %s", result.final_checkpoint)


def cmd_synthesize(cfg: RunConfig, out: Path) -> None:
    s = cfg.synthesize
    stats = load_stats(s.data_dir)
    model, _, _ = load_checkpoint(s.checkpoint)
    root = Path(s.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in _select(read_manifest(root / MANIFEST_FILE), s.split, s.cases):
        mri, _ = load_volume(root / rec["mri"])
        if mri.intensity_space is not IntensitySpace.NORMALIZED:
            raise DatasetError(f"{rec['mri']}: synthesize expects preprocessed MRI")
        pred = sliding_window_predict(model, mri, model.config.patch_size, s.overlap)
        sct = denormalize(pred, stats)
        save_volume(sct, out / f"{rec['case_id']}_sct")
        log.info("%s: sCT range [%.1f, %.1f] HU", rec["case_id"], float(sct.data.min()), float(sct.data.max()))


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    e = cfg.evaluate
    ref_root, pred_root = Path(e.ref_dir), Path(e.pred_dir)
    reports = []
    for rec in _select(read_manifest(ref_root / MANIFEST_FILE), e.split, e.cases):
        cid = rec["case_id"]
        ref, _ = load_volume(ref_root / rec["ct"])
        pred, _ = load_volume(pred_root / f"{cid}_sct")
        if pred.intensity_space is not IntensitySpace.HU or ref.intensity_space is not IntensitySpace.HU:
            raise DatasetError(f"{cid}: evaluation needs HU volumes")
        outline = load_mask(ref_root / rec["outline"])
        reports.append(metrics.evaluate_case(cid, pred, ref, outline, e.ms_ssim_scales, e.masked))
    if not reports:
        raise DatasetError("no cases selected for evaluation")
    agg = metrics.write_reports(reports, out)
    print(agg.format())


def cmd_gradcheck(cfg: RunConfig, out: Path) -> None:
    g = cfg.gradcheck
    outcomes = gradsuite.run_suite(cfg.seed, g.tol, g.checks or None)
    lines = [o.line() for o in outcomes]
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        raise ChecksFailed(f"{len(failed)} gradient check(s) failed: {failed}")


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}

CONFIG_ERRORS = (RunConfigError, PhantomConfigError, ConfigError)
RUNTIME_ERRORS = (TrainError, CheckpointError, VolumeError, OSError, ValueError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthct", description="MRI-to-CT synthesis on synthetic phantoms.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=20 (repeatable)")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--sequential", action="store_true",
                        help="single-threaded BLAS for bit-reproducible runs")
    parser.add_argument("--out", help="output directory (default runs/<command>)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.config, args.set, args.seed)
        cfg.train.train_config().validate()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or f"runs/{args.command}")
    limits = threadpool_limits(1) if args.sequential else contextlib.nullcontext()
    try:
        with limits:
            dump(cfg, out)
            COMMANDS[args.command](cfg, out)
    except ChecksFailed as exc:
        print(f"checks failed: {exc}", file=sys.stderr)
        return EXIT_CHECKS
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
