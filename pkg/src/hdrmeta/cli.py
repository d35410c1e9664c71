"""Command line interface: train, eval, adapt, gradcheck.

Settings resolve in three layers: dataclass defaults, then a ``--config``
file of ``key=value`` lines, then explicit flags.  The resolved settings
are echoed into ``manifest.txt`` next to every training run so results are
reproducible from the artifacts alone.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, data, meta, unet
from .loss import LossConfig, psnr, ssim
from .tensor import core
from .tensor import gradcheck as gradcheck_mod

__all__ = ["RunConfig", "ConfigError", "main"]


class ConfigError(ValueError):
    """Bad config file or inconsistent command line settings."""


@dataclass
class RunConfig:
    """Every tunable the CLI exposes, with its default."""

    dataset: str | None = None
    out: str = "run_out"
    seed: int = 0
    iterations: int = 200
    meta_batch: int = 5
    outer_lr: float = 0.005
    alpha: float = 0.01
    steps: int = 3
    mode: str = "so"  # 'fo' (first order) or 'so' (second order)
    lam: float = 5.0
    depth: int = 4
    base_channels: int = 32
    crop: int | None = None
    downscale: int | None = None
    eval_mode: str = "all"
    labels_dir: str | None = None
    synthetic: int | None = None
    synth_size: int = 64
    optimizer: str = "adam"
    val_interval: int = 25
    threads: int = 1


_FIELD_TYPES = {
    "dataset": str,
    "out": str,
    "seed": int,
    "iterations": int,
    "meta_batch": int,
    "outer_lr": float,
    "alpha": float,
    "steps": int,
    "mode": str,
    "lam": float,
    "depth": int,
    "base_channels": int,
    "crop": int,
    "downscale": int,
    "eval_mode": str,
    "labels_dir": str,
    "synthetic": int,
    "synth_size": int,
    "optimizer": str,
    "val_interval": int,
    "threads": int,
}


def load_config_file(path) -> dict:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "lambda":  # file spelling matches the --lambda flag
            key = "lam"
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown setting {key!r}")
        try:
            values[key] = _FIELD_TYPES[key](val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "config", None):
        rc = replace(rc, **load_config_file(args.config))
    overrides = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    rc = replace(rc, **overrides)
    if rc.mode not in ("fo", "so"):
        raise ConfigError(f"mode must be 'fo' or 'so', got {rc.mode!r}")
    if rc.eval_mode != "all" and rc.eval_mode not in meta.MODES:
        raise ConfigError(f"eval_mode must be 'all' or one of {meta.MODES}, got {rc.eval_mode!r}")
    return rc


def _adapt_cfg(rc: RunConfig) -> meta.AdaptConfig:
    mode = "first_order" if rc.mode == "fo" else "second_order"
    return meta.AdaptConfig(inner_lr=rc.alpha, steps=rc.steps, mode=mode)


def _meta_cfg(rc: RunConfig) -> meta.MetaConfig:
    return meta.MetaConfig(
        outer_lr=rc.outer_lr,
        meta_batch=rc.meta_batch,
        iterations=rc.iterations,
        seed=rc.seed,
        optimizer=rc.optimizer,
        val_interval=rc.val_interval,
    )


def _net_cfg(rc: RunConfig) -> unet.UNetConfig:
    return unet.UNetConfig(depth=rc.depth, base_channels=rc.base_channels)


def _loss_cfg(rc: RunConfig) -> LossConfig:
    return LossConfig(lam=rc.lam)


def _load_scene_splits(rc: RunConfig):
    """(train, val, test) scene lists from --dataset or --synthetic.

    Synthetic scenes are generated from seeds rc.seed + i and split with the
    same seed, so train and eval commands given the same --synthetic and
    --seed agree on which scenes are held out.
    """
    if rc.synthetic:
        scenes = data.make_synthetic_dataset(rc.synthetic, base_seed=rc.seed, size=rc.synth_size)
    elif rc.dataset:
        scenes = data.load_dataset(rc.dataset, crop=rc.crop, downscale=rc.downscale)
    else:
        raise ConfigError("either --dataset or --synthetic is required")
    if rc.synthetic and (rc.crop or rc.downscale):
        scenes = [data.preprocess_scene(s, crop=rc.crop, downscale=rc.downscale) for s in scenes]
    return data.split_scenes(scenes, seed=rc.seed)


def _training_provider(rc: RunConfig):
    if rc.labels_dir:
        return meta.make_label_provider("file_pseudo", rc.labels_dir)
    return meta.make_label_provider("true_hdr")


def _write_history_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_manifest(path, rc: RunConfig, extra: dict) -> None:
    lines = [f"version={__version__}"]
    for f in fields(RunConfig):
        lines.append(f"{f.name}={getattr(rc, f.name)}")
    for k, v in extra.items():
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    rc = resolve_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes, val_scenes, _ = _load_scene_splits(rc)
    print(
        f"training: {len(train_scenes)} train / {len(val_scenes)} val scenes, "
        f"depth={rc.depth} base={rc.base_channels}, {rc.iterations} iterations, mode={rc.mode}"
    )

    def progress(it, loss_val):
        print(f"iter {it}/{rc.iterations} loss={loss_val:.6f}")

    result = meta.train(
        train_scenes,
        val_scenes,
        _net_cfg(rc),
        _meta_cfg(rc),
        _adapt_cfg(rc),
        provider=_training_provider(rc),
        loss_cfg=_loss_cfg(rc),
        threads=rc.threads,
        progress=progress,
    )
    unet.save_params(out / "final.params", result.params)
    unet.save_params(out / "best.params", result.best_params)
    _write_history_csv(
        out / "loss_history.csv",
        ["iteration", "loss"],
        [(i + 1, v) for i, v in enumerate(result.history)],
    )
    _write_history_csv(out / "val_history.csv", ["iteration", "val_ssim"], result.val_history)
    _write_manifest(out / "manifest.txt", rc, {"best_val_ssim": result.best_val_ssim})
    if result.best_val_ssim is not None:
        print(f"best validation ssim: {result.best_val_ssim:.4f}")
    print(f"wrote {out / 'final.params'} and {out / 'best.params'}")
    return 0


def _load_checkpoint(args, rc: RunConfig) -> unet.ParamSet:
    params = unet.load_params(args.checkpoint)
    # explicit net flags must agree with the checkpoint
    if getattr(args, "depth", None) is not None or getattr(args, "base_channels", None) is not None:
        want = unet.UNetConfig(
            depth=args.depth if args.depth is not None else params.config.depth,
            base_channels=args.base_channels if args.base_channels is not None else params.config.base_channels,
        )
        unet.verify_schema(params, want)
    return params


def cmd_eval(args) -> int:
    rc = resolve_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_checkpoint(args, rc)
    if rc.synthetic:
        _, _, scenes = _load_scene_splits(rc)
    elif rc.dataset:
        scenes = data.load_dataset(rc.dataset, crop=rc.crop, downscale=rc.downscale)
    else:
        raise ConfigError("either --dataset or --synthetic is required")
    if not scenes:
        raise data.DataError("no scenes to evaluate")
    pseudo = meta.make_label_provider("file_pseudo", rc.labels_dir) if rc.labels_dir else None
    report = meta.evaluate(
        params,
        scenes,
        _adapt_cfg(rc),
        eval_mode=rc.eval_mode,
        pseudo_provider=pseudo,
        loss_cfg=_loss_cfg(rc),
    )
    report.write_summary_csv(out / "summary.csv")
    report.write_details_csv(out / "details.csv")
    print(f"{'mode':<16} {'ssim':>8} {'psnr_db':>9} {'n':>4}")
    for row in report.summary():
        print(f"{row['mode']:<16} {row['mean_ssim']:>8.4f} {row['mean_psnr_db']:>9.3f} {row['count']:>4}")
    for scene_id, reason in report.skipped:
        print(f"skipped {scene_id}: {reason}", file=sys.stderr)
    if args.previews:
        _write_previews(out / "previews", params, scenes, rc)
        print(f"previews under {out / 'previews'}")
    print(f"wrote {out / 'summary.csv'} and {out / 'details.csv'}")
    return 0


def _write_previews(preview_dir: Path, params, scenes, rc: RunConfig) -> None:
    """Reconstruction PNGs for eyeballing: adapted prediction vs input vs target."""
    preview_dir.mkdir(parents=True, exist_ok=True)
    acfg = _adapt_cfg(rc)
    lcfg = _loss_cfg(rc)
    for scene in scenes:
        for ev in data.EXPOSURE_EVS:
            task = meta.make_task(scene, ev)
            phi = meta.adapt(params, task.support, acfg, loss_cfg=lcfg)
            with core.no_grad():
                pred = unet.forward(phi, core.Tensor(task.query[0][None])).data[0]
            tag = f"{scene.scene_id}_ev{ev:+d}"
            data.write_png(preview_dir / f"{tag}_pred.png", pred)
            data.write_png(preview_dir / f"{tag}_input.png", task.query[0])
            data.write_png(preview_dir / f"{tag}_target.png", task.query[1])


def cmd_adapt(args) -> int:
    rc = resolve_config(args)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _load_checkpoint(args, rc)
    scene = data.load_scene(args.scene_dir)
    if rc.crop or rc.downscale:
        scene = data.preprocess_scene(scene, crop=rc.crop, downscale=rc.downscale)
    provider = _training_provider(rc)
    task = meta.make_task(scene, args.holdout_ev, provider)
    phi = meta.adapt(params, task.support, _adapt_cfg(rc), loss_cfg=_loss_cfg(rc))
    unet.save_params(out / "adapted.params", phi)
    with core.no_grad():
        pred = unet.forward(phi, core.Tensor(task.query[0][None])).data[0]
    data.write_png(out / "recon.png", pred)
    s = ssim(pred, scene.hdr_norm)
    p = psnr(pred, scene.hdr_norm)
    print(f"scene {scene.scene_id} holdout ev{args.holdout_ev:+d}: ssim={s:.4f} psnr={p:.3f} dB")
    _write_history_csv(out / "metrics.csv", ["scene_id", "holdout_ev", "ssim", "psnr_db"], [(scene.scene_id, args.holdout_ev, s, p)])
    print(f"wrote {out / 'adapted.params'} and {out / 'recon.png'}")
    return 0


def cmd_gradcheck(args) -> int:
    suites = {
        "ops": gradcheck_mod.run_op_checks,
        "net": gradcheck_mod.run_network_check,
        "meta": gradcheck_mod.run_second_order_checks,
        "all": gradcheck_mod.run_all,
    }
    results = suites[args.suite](seed=args.seed)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}  {status}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser

_OPTS = {
    "config": (("--config",), {"metavar": "FILE", "help": "key=value settings file; flags override it"}),
    "dataset": (("--dataset",), {"metavar": "DIR", "help": "dataset root of scene directories"}),
    "out": (("--out",), {"metavar": "DIR", "help": "output directory (default run_out)"}),
    "seed": (("--seed",), {"type": int, "help": "seed for init, task sampling, and splits (default 0)"}),
    "iterations": (("--iterations",), {"type": int, "help": "outer steps (default 200)"}),
    "meta_batch": (("--meta-batch",), {"type": int, "help": "tasks per outer step (default 5)"}),
    "outer_lr": (("--outer-lr",), {"type": float, "help": "outer optimizer learning rate (default 0.005)"}),
    "alpha": (("--alpha",), {"type": float, "help": "inner-loop learning rate (default 0.01)"}),
    "steps": (("--steps",), {"type": int, "help": "inner-loop steps (default 3)"}),
    "mode": (("--mode",), {"choices": ["fo", "so"], "help": "meta-gradient mode: first or second order (default so)"}),
    "lam": (("--lambda",), {"type": float, "dest": "lam", "help": "cosine-term weight in the loss (default 5.0)"}),
    "depth": (("--depth",), {"type": int, "help": "contracting blocks (default 4)"}),
    "base_channels": (("--base-channels",), {"type": int, "help": "width of the first block (default 32)"}),
    "crop": (("--crop",), {"type": int, "help": "center-crop scenes to this size"}),
    "downscale": (("--downscale",), {"type": int, "help": "integer downscale factor"}),
    "eval_mode": (("--eval-mode",), {"choices": ["all", *meta.MODES], "help": "restrict evaluation to one mode"}),
    "labels_dir": (("--labels-dir",), {"metavar": "DIR", "help": "sidecar tree of precomputed label images"}),
    "synthetic": (
        ("--synthetic",),
        {"type": int, "nargs": "?", "const": 60, "metavar": "N", "help": "use N generated scenes instead of --dataset (default N=60)"},
    ),
    "synth_size": (("--synth-size",), {"type": int, "help": "synthetic scene size in pixels (default 64)"}),
    "optimizer": (("--optimizer",), {"choices": ["adam", "sgd"], "help": "outer optimizer (default adam)"}),
    "val_interval": (("--val-interval",), {"type": int, "help": "iterations between validation passes (default 25)"}),
    "threads": (("--threads",), {"type": int, "help": "worker threads for per-task gradients (default 1)"}),
}


def _add(parser: argparse.ArgumentParser, *names: str) -> None:
    for n in names:
        flags, kw = _OPTS[n]
        parser.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrmeta",
        description="Meta-learned LDR-to-HDR reconstruction: train an adaptable initialization, "
        "evaluate it, adapt it to a single scene, or verify gradients.",
    )
    parser.add_argument("--version", action="version", version=f"hdrmeta {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train an initialization")
    _add(
        p, "config", "dataset", "out", "seed", "iterations", "meta_batch", "outer_lr", "alpha",
        "steps", "mode", "lam", "depth", "base_channels", "crop", "downscale", "labels_dir",
        "synthetic", "synth_size", "optimizer", "val_interval", "threads",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint over scenes")
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="parameter checkpoint to evaluate")
    p.add_argument("--previews", action="store_true", help="write reconstruction PNGs")
    _add(
        p, "config", "dataset", "out", "seed", "alpha", "steps", "mode", "lam", "depth",
        "base_channels", "crop", "downscale", "eval_mode", "labels_dir", "synthetic", "synth_size",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="adapt a checkpoint to one scene and reconstruct")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--scene-dir", required=True, metavar="DIR", help="directory of one scene")
    p.add_argument("--holdout-ev", type=int, default=0, choices=[-2, 0, 2], help="exposure to reconstruct (default 0)")
    _add(p, "config", "out", "seed", "alpha", "steps", "mode", "lam", "depth", "base_channels", "crop", "downscale", "labels_dir")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--suite", choices=["ops", "net", "meta", "all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        data.DataError,
        data.ParseError,
        unet.SchemaError,
        unet.CheckpointError,
        meta.LabelError,
        meta.TrainingError,
        core.ShapeError,
        core.NonFiniteError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
