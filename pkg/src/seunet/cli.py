"""Command-line interface: ``seunet <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error / unknown command,
3 invalid configuration. Every file is written below the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, load_config
from .data.manifest import load_cases, save_case, write_manifest
from .data.nifti import volume_read, volume_write
from .data.phantom import generate_phantom
from .data.volume import Volume, crop_bbox, preprocess_case
from .gradchecks import REGISTRY, run_gradchecks
from .inference import EvaluationReport, ensemble_probabilities, evaluate, make_splits, threshold_mask
from .model import ConfigError
from .train import load_params, train
from .viz import export_slices

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _out(cfg: RunConfig, *parts) -> Path:
    path = Path(cfg.output_dir, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(cfg: RunConfig, args) -> Path:
    chosen = getattr(args, "manifest", None) or cfg.manifest
    return Path(chosen) if chosen else Path(cfg.output_dir, "data", "manifest.csv")


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_phantom(cfg: RunConfig, args) -> None:
    data = _out(cfg, "data")
    entries = []
    for i in range(args.cases):
        case = generate_phantom(cfg.train.seed + i, args.extent, args.lesions)
        entries.append(save_case(case, data))
    write_manifest(entries, data / "manifest.csv")
    _say(f"wrote {len(entries)} phantom cases to {data / 'manifest.csv'}")


def cmd_preprocess(cfg: RunConfig, args) -> None:
    out = _out(cfg, "preprocessed")
    entries = [save_case(preprocess_case(c, cfg.spacing), out) for c in load_cases(_manifest(cfg, args))]
    write_manifest(entries, out / "manifest.csv")
    _say(f"preprocessed {len(entries)} cases to {out / 'manifest.csv'}")


def _cases(cfg: RunConfig, args):
    return [preprocess_case(c, cfg.spacing) for c in load_cases(_manifest(cfg, args))]


def cmd_train(cfg: RunConfig, args) -> None:
    cases = _cases(cfg, args)
    train_cases = val_cases = cases
    run_dir = _out(cfg, "train")
    if cfg.split.fold is not None:
        plan = make_splits(cases, cfg.split.kind, cfg.split.n_random_folds, cfg.train.seed, cfg.split.val_fraction)
        folds = {f.name: f for f in plan.folds}
        if cfg.split.fold not in folds:
            raise ConfigError(f"fold {cfg.split.fold!r} not in {sorted(folds)}")
        fold = folds[cfg.split.fold]
        by_id = {c.case_id: c for c in cases}
        train_cases = [by_id[i] for i in fold.train]
        val_cases = [by_id[i] for i in fold.validation]
        run_dir = _out(cfg, "train", fold.name)
    resume = load_checkpoint(args.resume, cfg.model.to_dict()) if args.resume else None
    (run_dir / "config.json").write_text(cfg.dumps() + "\n")
    with open(run_dir / "train.log", "a" if resume else "w") as log:
        result = train(cfg.model, train_cases, val_cases, cfg.train, out_dir=run_dir, resume=resume, log=log)
    last = result.history[-1] if result.history else None
    _say(
        f"trained {result.state.optimizer.step} steps; "
        + (f"final loss {last.total:.4f}; " if last else "")
        + f"best validation DSC {result.state.best_dsc:.4f} at step {result.state.best_step}; checkpoints in {run_dir}"
    )


def _default_checkpoint(cfg: RunConfig) -> list[str]:
    best = Path(cfg.output_dir, "train", "best.ckpt")
    last = Path(cfg.output_dir, "train", "last.ckpt")
    return [str(best if best.exists() else last)]


def _predict(cfg: RunConfig, args, checkpoints: list[str], subdir: str) -> None:
    members = [load_params(path) for path in checkpoints]
    out = _out(cfg, subdir)
    kw = dict(max_voxels=cfg.inference.max_voxels, window=cfg.inference.window, stride=cfg.inference.stride)
    for case in _cases(cfg, args):
        prob = ensemble_probabilities(members, case, cfg.ensemble, **kw)
        mask = Volume(threshold_mask(prob.data, cfg.ensemble.threshold), prob.spacing, prob.origin, "MASK")
        volume_write(prob, out / f"{case.case_id}_prob.nii.gz")
        volume_write(mask, out / f"{case.case_id}_pred.nii.gz")
        if args.png:
            export_slices(mask, crop_bbox(case).ct, out / f"{case.case_id}_montage.png")
        _say(f"{case.case_id}\t{int(mask.data.sum())} voxels")


def cmd_infer(cfg: RunConfig, args) -> None:
    _predict(cfg, args, [args.checkpoint] if args.checkpoint else _default_checkpoint(cfg), "predictions")


def cmd_ensemble(cfg: RunConfig, args) -> None:
    checkpoints = args.checkpoints or cfg.ensemble.checkpoints
    if not checkpoints:
        raise ConfigError("ensemble needs at least one checkpoint (--checkpoints or ensemble.checkpoints)")
    _predict(cfg, args, checkpoints, "ensemble")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    pred_dir = Path(args.predictions) if args.predictions else Path(cfg.output_dir, "predictions")
    masks, gts, grouping = {}, {}, {}
    for case in _cases(cfg, args):
        path = pred_dir / f"{case.case_id}_pred.nii.gz"
        if not path.exists():
            raise FileNotFoundError(f"no prediction for case {case.case_id} at {path}")
        crop = crop_bbox(case)
        if crop.gtv is None:
            raise ValueError(f"case {case.case_id} has no ground truth")
        masks[case.case_id] = volume_read(path, "MASK").data
        gts[case.case_id] = crop.gtv.data
        grouping[case.case_id] = case.center_id
    report: EvaluationReport = evaluate(masks, gts, grouping)
    out = _out(cfg) / "evaluation.txt"
    with open(out, "w") as fh:
        report.write(fh)
    a = report.average
    _say(f"Average DSC {a['dsc']:.3f} precision {a['precision']:.3f} recall {a['recall']:.3f} over {len(masks)} cases; report {out}")


def cmd_split(cfg: RunConfig, args) -> None:
    cases = load_cases(_manifest(cfg, args))
    plan = make_splits(cases, cfg.split.kind, cfg.split.n_random_folds, cfg.train.seed, cfg.split.val_fraction)
    out = _out(cfg) / "splits.json"
    out.write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    for fold in plan.folds:
        _say(f"{fold.name}\ttrain {len(fold.train)}\tvalidation {len(fold.validation)}")


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_gradchecks(args.ops or None, range(args.seeds))
    worst: dict[str, tuple[float, float]] = {}
    for r in results:
        prev = worst.get(r.name, (0.0, r.tolerance))
        worst[r.name] = (max(prev[0], r.error), r.tolerance)
    for name, (err, tol) in worst.items():
        _say(f"{'PASS' if err < tol else 'FAIL'}\t{name}\tmax rel err {err:.3e}\t(tol {tol:.0e})")
    return 0 if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_defaults(cfg: RunConfig, args) -> None:
    _say(RunConfig().dumps())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seunet", description="SE-normalized residual U-Net for PET/CT tumour segmentation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override train.seed (all randomness derives from it)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic cases")
    p.add_argument("--cases", type=int, default=4)
    p.add_argument("--extent", type=int, default=48)
    p.add_argument("--lesions", type=int, default=1)
    p.set_defaults(func=cmd_phantom)

    for name, func, text in (
        ("preprocess", cmd_preprocess, "resample and normalize a dataset"),
        ("train", cmd_train, "train one model"),
        ("infer", cmd_infer, "predict with one checkpoint"),
        ("ensemble", cmd_ensemble, "predict with the mean of several checkpoints"),
        ("evaluate", cmd_evaluate, "score predictions against ground truth"),
        ("split", cmd_split, "write cross-validation folds"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest", help="dataset manifest CSV (default: <output_dir>/data/manifest.csv)")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "infer":
            p.add_argument("--checkpoint")
        if name == "ensemble":
            p.add_argument("--checkpoints", nargs="+")
        if name in ("infer", "ensemble"):
            p.add_argument("--png", action="store_true", help="also write slice montages")
        if name == "evaluate":
            p.add_argument("--predictions", help="directory of <case>_pred.nii.gz files")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ops", nargs="+", choices=sorted(REGISTRY), metavar="OP")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("defaults", parents=[common], help="print the default configuration")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status = args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
