"""Command-line surface: dataset generation, training, sampling, probes.

Every command accepts ``--config FILE`` (JSON whose keys are the command's
flag names); explicit flags override file values, and the effective
configuration is echoed into the output directory as ``config.json`` so a
run can be reproduced by pointing ``--config`` at it.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import flowmatch, formats, probes, synthdata, trainer
from .guidance import GUIDANCE_RULES, GuidanceConfig
from .jamdit import ModelConfig
from .synthdata import DatasetConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are validation errors
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _effective_config(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge defaults, config-file values, and explicit flags (in that order)."""
    merged = {}
    file_values = {}
    if getattr(args, "config", None):
        file_values = json.loads(Path(args.config).read_text())
        unknown = set(file_values) - set(keys)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in keys:
        merged[key] = getattr(args, key)
        if key in file_values and key not in args._explicit:
            merged[key] = file_values[key]
    return merged


def _echo_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


class _TrackExplicit(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        if not hasattr(namespace, "_explicit"):
            namespace._explicit = set()
        namespace._explicit.add(self.dest)
        setattr(namespace, self.dest, values)


class _TrackExplicitTrue(argparse.Action):
    def __init__(self, option_strings, dest, **kwargs):
        super().__init__(option_strings, dest, nargs=0, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        if not hasattr(namespace, "_explicit"):
            namespace._explicit = set()
        namespace._explicit.add(self.dest)
        setattr(namespace, self.dest, True)


def _add(parser: _Parser, flag: str, **kwargs) -> None:
    if kwargs.get("action") == "store_true":
        kwargs["action"] = _TrackExplicitTrue
        kwargs.setdefault("default", False)
    else:
        kwargs["action"] = _TrackExplicit
    parser.add_argument(flag, **kwargs)


def _guidance_from(cfg: dict) -> GuidanceConfig:
    return GuidanceConfig(
        w1=cfg["w1"], w2=cfg["w2"], rule=cfg["rule"], motion_gate_fraction=cfg["gate"]
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    keys = ["out", "seed", "train", "holdout", "frames", "height", "width", "overwrite"]
    cfg = _effective_config(args, keys)
    dataset_config = DatasetConfig(
        n_train=cfg["train"],
        n_holdout=cfg["holdout"],
        frames=cfg["frames"],
        height=cfg["height"],
        width=cfg["width"],
    )
    out_dir = Path(cfg["out"])
    manifest = synthdata.build_dataset(
        out_dir, dataset_config, seed=cfg["seed"], overwrite=cfg["overwrite"]
    )
    _echo_config(out_dir, cfg)
    print(manifest)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    keys = [
        "data", "out", "mode", "from_ckpt", "resume", "steps", "batch_size", "lr", "seed",
        "p_drop_text", "p_drop_flow", "checkpoint_interval", "motion_loss_weight",
        "embed_dim", "n_blocks", "n_heads",
    ]
    cfg = _effective_config(args, keys)
    if cfg["data"] is None:
        raise ValueError("--data is required")
    train_config = trainer.TrainConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        seed=cfg["seed"],
        p_drop_text=cfg["p_drop_text"],
        p_drop_flow=cfg["p_drop_flow"],
        checkpoint_interval=cfg["checkpoint_interval"],
        mode=cfg["mode"],
        motion_loss_weight=cfg["motion_loss_weight"],
    )
    model_config = ModelConfig(
        embed_dim=cfg["embed_dim"], n_blocks=cfg["n_blocks"], n_heads=cfg["n_heads"]
    )
    manifest = Path(cfg["data"])
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    out_dir = Path(cfg["out"])
    result = trainer.train(
        train_config,
        manifest,
        out_dir,
        model_config=model_config,
        init_from=cfg["from_ckpt"],
        resume_from=cfg["resume"],
    )
    _echo_config(out_dir, cfg)
    print(result.checkpoint)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    keys = [
        "ckpt", "out", "steps", "w1", "w2", "gate", "schedule", "rule", "class_id",
        "n", "seed", "frames", "height", "width", "dump_frames",
    ]
    cfg = _effective_config(args, keys)
    model, _ = trainer.load_checkpoint(cfg["ckpt"])
    if not model.joint_mode:
        raise ValueError("sampling requires a joint checkpoint (train with --mode videojam)")
    guidance = _guidance_from(cfg)
    schedule = flowmatch.make_schedule(cfg["steps"], cfg["schedule"])
    shape = (cfg["frames"], cfg["height"], cfg["width"], model.config.in_channels)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(cfg["n"]):
        video, flow_video = flowmatch.euler_sample(
            model, shape, cfg["class_id"], guidance, schedule,
            seed=trainer.derive_seed(cfg["seed"], "sample", i),
        )
        formats.save_tensor(out_dir / f"sample_{i:03d}_video.vjt", video.astype(np.float32))
        formats.save_tensor(out_dir / f"sample_{i:03d}_flow.vjt", flow_video.astype(np.float32))
        if cfg["dump_frames"]:
            formats.save_video_frames(out_dir / f"sample_{i:03d}_frames", video)
            formats.save_video_frames(out_dir / f"sample_{i:03d}_flow_frames", flow_video)
    _echo_config(out_dir, cfg)
    print(out_dir)
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    keys = [
        "probe", "ckpt", "data", "out", "seed", "steps", "w1", "w2", "gate", "rule",
        "n_buckets", "samples_per_bucket", "start_ts", "n_sources", "n_per_class", "classes",
    ]
    cfg = _effective_config(args, keys)
    model, _ = trainer.load_checkpoint(cfg["ckpt"])
    dataset = synthdata.load_dataset(
        Path(cfg["data"]) / "manifest.json" if Path(cfg["data"]).is_dir() else cfg["data"]
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    guidance = _guidance_from(cfg)
    schedule = flowmatch.make_schedule(cfg["steps"])
    shape = (dataset.frames, dataset.height, dataset.width, model.config.in_channels)

    if cfg["probe"] == "shuffle":
        curve = probes.shuffle_loss_probe(
            model, dataset.holdout,
            n_buckets=cfg["n_buckets"],
            samples_per_bucket=cfg["samples_per_bucket"],
            seed=cfg["seed"],
        )
        curve.to_csv(out_dir / f"shuffle_{curve.tag}.csv")
        summary = (
            f"tag={curve.tag} mean_delta[0,0.6]={curve.mean_delta_between(0.0, 0.6):.6f} "
            f"mean_delta(0.6,1]={curve.mean_delta_between(0.6, 1.0):.6f}\n"
        )
        (out_dir / f"shuffle_{curve.tag}_summary.txt").write_text(summary)
        print(summary, end="")
    elif cfg["probe"] == "sdedit":
        if not model.joint_mode:
            raise ValueError("sdedit probe requires a joint checkpoint")
        sources = dataset.holdout[: cfg["n_sources"]]
        if not sources:
            raise ValueError("no holdout sources available")
        rows = []
        for si, item in enumerate(sources):
            results = probes.sdedit_probe(
                model, item.video, item.flow, cfg["start_ts"], guidance, schedule,
                class_id=item.class_id, seed=trainer.derive_seed(cfg["seed"], "src", si),
            )
            rows.extend((si, r.t_start, r.endpoint_err) for r in results)
        with open(out_dir / "sdedit.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source", "t_start", "endpoint_error"])
            writer.writerows(rows)
        lines = []
        for t_star in cfg["start_ts"]:
            errs = [e for _, t, e in rows if t == t_star]
            lines.append(f"t_start={t_star}: mean endpoint error {np.mean(errs):.6f} (n={len(errs)})")
        summary = "\n".join(lines) + "\n"
        (out_dir / "sdedit_summary.txt").write_text(summary)
        print(summary, end="")
    elif cfg["probe"] == "coherence":
        class_ids = cfg["classes"] if cfg["classes"] else list(range(model.config.n_classes))
        report = probes.coherence_report(
            model, shape, class_ids, cfg["n_per_class"], schedule=schedule, seed=cfg["seed"]
        )
        report.to_csv(out_dir / "coherence.csv")
        summary = report.summary_text()
        (out_dir / "coherence_summary.txt").write_text(summary)
        print(summary, end="")
    else:
        raise ValueError(f"unknown probe {cfg['probe']!r}")
    _echo_config(out_dir, cfg)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="videojam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic video corpus")
    _add(p, "--config", type=str, default=None)
    _add(p, "--out", type=str, required=True)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--train", type=int, default=512)
    _add(p, "--holdout", type=int, default=64)
    _add(p, "--frames", type=int, default=8)
    _add(p, "--height", type=int, default=16)
    _add(p, "--width", type=int, default=16)
    _add(p, "--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a base or joint model")
    _add(p, "--config", type=str, default=None)
    _add(p, "--data", type=str, default=None)
    _add(p, "--out", type=str, required=True)
    _add(p, "--mode", type=str, default="base", choices=list(trainer.TRAIN_MODES))
    _add(p, "--from", dest="from_ckpt", type=str, default=None,
         help="base checkpoint to extend (videojam mode)")
    _add(p, "--resume", type=str, default=None)
    _add(p, "--steps", type=int, default=2000)
    _add(p, "--batch-size", type=int, default=4)
    _add(p, "--lr", type=float, default=1e-3)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--p-drop-text", type=float, default=0.3)
    _add(p, "--p-drop-flow", type=float, default=0.2)
    _add(p, "--checkpoint-interval", type=int, default=1000)
    _add(p, "--motion-loss-weight", type=float, default=0.5)
    _add(p, "--embed-dim", type=int, default=64)
    _add(p, "--n-blocks", type=int, default=4)
    _add(p, "--n-heads", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate videos from a joint checkpoint")
    _add(p, "--config", type=str, default=None)
    _add(p, "--ckpt", type=str, required=True)
    _add(p, "--out", type=str, required=True)
    _add(p, "--steps", type=int, default=20)
    _add(p, "--w1", type=float, default=5.0)
    _add(p, "--w2", type=float, default=3.0)
    _add(p, "--gate", type=float, default=0.5)
    _add(p, "--schedule", type=str, default="uniform", choices=list(flowmatch.SCHEDULE_KINDS))
    _add(p, "--rule", type=str, default="inner", choices=list(GUIDANCE_RULES))
    _add(p, "--class-id", type=int, default=None)
    _add(p, "--n", type=int, default=1)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--frames", type=int, default=8)
    _add(p, "--height", type=int, default=16)
    _add(p, "--width", type=int, default=16)
    _add(p, "--dump-frames", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("probe", help="run a diagnostic probe")
    _add(p, "--probe", type=str, required=True, choices=["shuffle", "sdedit", "coherence"])
    _add(p, "--config", type=str, default=None)
    _add(p, "--ckpt", type=str, required=True)
    _add(p, "--data", type=str, required=True)
    _add(p, "--out", type=str, required=True)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--steps", type=int, default=20)
    _add(p, "--w1", type=float, default=5.0)
    _add(p, "--w2", type=float, default=3.0)
    _add(p, "--gate", type=float, default=0.5)
    _add(p, "--rule", type=str, default="inner", choices=list(GUIDANCE_RULES))
    _add(p, "--n-buckets", type=int, default=10)
    _add(p, "--samples-per-bucket", type=int, default=16)
    _add(p, "--start-ts", type=float, nargs="+", default=[0.2, 0.6, 0.8])
    _add(p, "--n-sources", type=int, default=16)
    _add(p, "--n-per-class", type=int, default=3)
    _add(p, "--classes", type=int, nargs="*", default=None)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "_explicit"):
        args._explicit = set()
    try:
        return args.func(args)
    except ValueError as exc:  # includes container FormatError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
