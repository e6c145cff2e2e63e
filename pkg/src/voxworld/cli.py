"""Command-line entry point wiring every stage into reproducible runs.

Every subcommand resolves its configuration (dataclass defaults, then an
optional --config JSON file, then explicit flags), echoes the resolved
config and input hashes beside its outputs, logs line-delimited JSON to
stderr, and prints a short human summary to stdout. Timestamps live only
in run_meta.json so all other artifacts are byte-reproducible under a
fixed seed. Failures exit nonzero after emitting one machine-readable
error object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import amvae as amvae_mod
from . import gradcheck as gradcheck_mod
from . import imgio
from . import metrics as metrics_mod
from . import worldmodel as wm
from .errors import ConfigError, VoxworldError
from .geometry import load_rig, save_rig
from .img2occ import Img2OccConfig, save_gaussians, train_img2occ
from .metrics import evaluate_forecast
from .occupancy import load_grid, save_grid
from .splat import argmax_occupancy, rasterize
from .synthetic import (
    SceneConfig,
    generate_rig,
    generate_sequence,
    load_sequence,
    save_sequence,
)


def log_event(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _hash_inputs(paths) -> dict:
    hashes = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    hashes[str(f)] = _sha256(f)
        elif p.is_file():
            hashes[str(p)] = _sha256(p)
    return hashes


class _RunContext:
    """Output directory plus config echo and a timestamps-only metadata file."""

    def __init__(self, out_dir, config: dict, inputs=()):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.time()
        self.config = config
        self.inputs = list(inputs)
        (self.out / "config.json").write_text(
            json.dumps(config, indent=1, sort_keys=True) + "\n"
        )

    def finish(self, workers: int) -> None:
        meta = {
            "started_utc": time.strftime(
                "%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.started)
            ),
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "elapsed_s": round(time.time() - self.started, 3),
            "workers": workers,
            "input_hashes": _hash_inputs(self.inputs),
        }
        (self.out / "run_meta.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True) + "\n"
        )


def _resolve(dataclass_type, args: argparse.Namespace, key_map: dict):
    """dataclass defaults <- --config file <- explicit flags."""
    values = {}
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - {f.name for f in dataclasses.fields(dataclass_type)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values.update(loaded)
    for field_name, arg_name in key_map.items():
        val = getattr(args, arg_name, None)
        if val is not None:
            values[field_name] = val
    if dataclass_type is SceneConfig:
        return SceneConfig.from_dict(values) if values else SceneConfig()
    return dataclass_type(**values)


def _write_csv(path, header: str, rows) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _dataset_sequences(dataset: Path):
    seq_dirs = sorted(p for p in Path(dataset).glob("seq_*") if p.is_dir())
    if not seq_dirs:
        raise ConfigError(f"no seq_* directories under {dataset}")
    return seq_dirs


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve(
        SceneConfig,
        args,
        {
            "seed": "seed",
            "frames": "frames",
            "class_count": "class_count",
            "n_static": "static",
            "n_moving": "moving",
            "ego_speed_mps": "ego_speed",
            "ego_turn_rate_rps": "ego_turn_rate",
            "voxel_size": "voxel_size",
        },
    )
    if args.dims:
        cfg = dataclasses.replace(cfg, dims=tuple(int(v) for v in args.dims.split(",")))
    doc = {
        "command": "gen-data",
        "scene": cfg.to_dict(),
        "sequences": args.sequences,
        "cameras": args.cameras,
    }
    ctx = _RunContext(args.out, doc)
    for i in range(args.sequences):
        seq_cfg = dataclasses.replace(cfg, seed=cfg.seed + i)
        seq = generate_sequence(seq_cfg)
        save_sequence(seq, ctx.out / f"seq_{i:04d}")
        log_event("sequence", index=i, frames=len(seq.frames))
    rig = generate_rig(args.cameras)
    save_rig(rig, ctx.out / "rig.json")
    ctx.finish(args.workers)
    print(f"wrote {args.sequences} sequences x {cfg.frames} frames and a "
          f"{args.cameras}-camera rig to {ctx.out}")
    return 0


def cmd_train_img2occ(args) -> int:
    cfg = _resolve(
        Img2OccConfig,
        args,
        {
            "steps": "steps",
            "lr": "lr",
            "seed": "seed",
            "init_opacity": "init_opacity",
            "init_scale_fraction": "init_scale_fraction",
        },
    )
    dataset = Path(args.dataset)
    seq_dir = _dataset_sequences(dataset)[args.sequence]
    grid = load_grid(seq_dir / f"frame_{args.frame:04d}.occ")
    cameras = load_rig(dataset / "rig.json")
    doc = {"command": "train-img2occ", "config": cfg.to_dict(),
           "dataset": str(dataset), "sequence": args.sequence, "frame": args.frame}
    ctx = _RunContext(args.out, doc, inputs=[seq_dir, dataset / "rig.json"])

    gaussians, curve = train_img2occ(
        grid, cameras, cfg,
        callback=lambda s, lt, ls, ld: log_event(
            "step", step=s, loss_total=lt, loss_sem=ls, loss_dep=ld
        ) if s % 10 == 0 else None,
    )
    _write_csv(ctx.out / "loss.csv", "step,loss_total,loss_sem,loss_dep", curve)
    save_gaussians(gaussians, ctx.out / "gaussians", cfg)

    recon = argmax_occupancy(gaussians, grid)
    save_grid(recon, ctx.out / "recon.occ")
    per_class, mean = metrics_mod.miou(recon.labels, grid.labels, grid.class_count)
    for i, cam in enumerate(cameras):
        view = rasterize(gaussians, cam)
        imgio.write_pfm(ctx.out / f"view_{i}_depth.pfm", view.depth)
        classes = view.class_argmax()
        imgio.write_pgm(ctx.out / f"view_{i}_class.pgm", classes, grid.class_count - 1)
        imgio.write_ppm(ctx.out / f"view_{i}_class.ppm", imgio.class_map_to_rgb(classes))
    report = {"recon_miou": mean, "final_loss": curve[-1][1] if curve else None}
    (ctx.out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    ctx.finish(args.workers)
    print(f"img2occ: {len(gaussians)} gaussians, final loss "
          f"{curve[-1][1]:.4f}, readout mIoU {mean:.4f}")
    return 0


def _load_dataset_grids(dataset: Path):
    grids = []
    for seq_dir in _dataset_sequences(dataset):
        grids.extend(load_sequence(seq_dir).frames)
    return grids


def cmd_train_vae(args) -> int:
    cfg = _resolve(
        amvae_mod.AmvaeConfig,
        args,
        {
            "steps": "steps",
            "lr": "lr",
            "beta": "beta",
            "codebook_size": "codebook_size",
            "latent_dim": "latent_dim",
            "seed": "seed",
        },
    )
    if args.no_air_mask:
        cfg = dataclasses.replace(cfg, air_mask=False)
    dataset = Path(args.dataset)
    grids = _load_dataset_grids(dataset)
    doc = {"command": "train-vae", "config": cfg.to_dict(), "dataset": str(dataset)}
    ctx = _RunContext(args.out, doc, inputs=[dataset])

    model, curve = amvae_mod.train_amvae(
        grids, cfg,
        callback=lambda s, lr_, lc, lt: log_event(
            "step", step=s, loss_recon=lr_, loss_commit=lc, loss_total=lt
        ) if s % 50 == 0 else None,
    )
    _write_csv(ctx.out / "loss.csv", "step,loss_recon,loss_commit,loss_total",
               [(s, a, b, c) for s, a, b, c in curve])
    amvae_mod.save_model(model, ctx.out / "vae")
    mious = [
        metrics_mod.miou(model.reconstruct_labels(g), g.labels, g.class_count)[1]
        for g in grids
    ]
    report = {"recon_miou_mean": float(np.mean(mious)),
              "recon_miou_min": float(np.min(mious)),
              "grids": len(grids),
              "air_mask": cfg.air_mask}
    (ctx.out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    ctx.finish(args.workers)
    print(f"vae ({'dual-branch' if cfg.air_mask else 'single-branch'}): "
          f"recon mIoU mean {report['recon_miou_mean']:.4f} over {len(grids)} grids")
    return 0


def cmd_train_world(args) -> int:
    cfg = _resolve(
        wm.WorldModelConfig,
        args,
        {
            "embed_dim": "embed_dim",
            "heads": "heads",
            "layers": "layers",
            "scales": "scales",
            "context": "context",
            "stage2_steps": "stage2_steps",
            "stage2_lr": "stage2_lr",
            "lambda2": "lambda2",
            "seed": "seed",
        },
    )
    dataset = Path(args.dataset)
    codec = amvae_mod.load_model(args.vae)
    sequences = [load_sequence(d) for d in _dataset_sequences(dataset)]
    grids = [f for s in sequences for f in s.frames]
    doc = {
        "command": "train-world",
        "config": cfg.to_dict(),
        "stage1_steps": args.stage1_steps,
        "stage1_lr": args.stage1_lr,
        "lambda1": args.lambda1,
        "dataset": str(dataset),
        "vae": str(args.vae),
    }
    ctx = _RunContext(args.out, doc,
                      inputs=[dataset, Path(str(args.vae) + ".json"),
                              Path(str(args.vae) + ".bin")])

    codec, curve1 = wm.stage1_train(
        grids, codec, lambda1=args.lambda1, steps=args.stage1_steps,
        lr=args.stage1_lr, seed=cfg.seed,
        callback=lambda s, ce, lov, tot: log_event(
            "stage1", step=s, loss_ce=ce, loss_lovasz=lov, loss_total=tot
        ) if s % 50 == 0 else None,
    )
    _write_csv(ctx.out / "stage1_loss.csv", "step,loss_ce,loss_lovasz,loss_total",
               curve1)
    amvae_mod.save_model(codec, ctx.out / "tokenizer")

    model, curve2 = wm.stage2_train(
        sequences, codec, cfg,
        callback=lambda s, lt, le, tot: log_event(
            "stage2", step=s, loss_token=lt, loss_ego=le, loss_total=tot
        ) if s % 50 == 0 else None,
    )
    _write_csv(ctx.out / "stage2_loss.csv", "step,loss_token,loss_ego,loss_total",
               curve2)
    wm.save_world_model(model, ctx.out / "worldmodel")
    ctx.finish(args.workers)
    print(f"world model trained: stage-1 final {curve1[-1][3]:.4f}, "
          f"stage-2 final {curve2[-1][3]:.4f}")
    return 0


def cmd_forecast(args) -> int:
    ckpt = Path(args.ckpt)
    codec = amvae_mod.load_model(ckpt / "tokenizer")
    model = wm.load_world_model(ckpt / "worldmodel")
    seq = load_sequence(args.sequence)
    if args.history < 1 or args.history > len(seq.frames):
        raise ConfigError(
            f"history {args.history} outside the sequence length {len(seq.frames)}"
        )
    doc = {
        "command": "forecast",
        "ckpt": str(ckpt),
        "sequence": str(args.sequence),
        "history": args.history,
        "horizon": args.horizon,
    }
    ctx = _RunContext(args.out, doc, inputs=[Path(args.sequence), ckpt])
    history = seq.frames[: args.history]
    grids, disp = wm.forecast(model, codec, history, args.horizon)
    for i, grid in enumerate(grids):
        save_grid(grid, ctx.out / f"frame_{i:04d}.occ")
        toks = amvae_mod.encode_scene(grid, codec)
        amvae_mod.save_tokens(ctx.out / f"frame_{i:04d}.tok", toks,
                              codec.config.codebook_size)
    traj = {"dt_s": seq.frame_period_s,
            "displacements_m": [[float(a), float(b)] for a, b in disp]}
    (ctx.out / "trajectory.json").write_text(json.dumps(traj, indent=1, sort_keys=True) + "\n")
    ctx.finish(args.workers)
    print(f"forecast: {args.horizon} frames from {args.history} history frames -> {ctx.out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt = load_sequence(args.gt)
    history = args.history
    if history is None:
        cfg_path = pred_dir / "config.json"
        if cfg_path.exists():
            history = json.loads(cfg_path.read_text()).get("history")
    if history is None:
        raise ConfigError("--history is required when the prediction directory "
                          "carries no config.json")
    pred = load_sequence(pred_dir) if (pred_dir / "trajectory.json").exists() else None
    if pred is None:
        raise ConfigError(f"{pred_dir} is not a forecast directory")
    horizon = len(pred.frames)
    gt_future = gt.frames[history : history + horizon]
    if len(gt_future) < max(metrics_mod.HORIZON_MARKS):
        raise ConfigError(
            "ground-truth sequence too short for the 1s/2s/3s marks after history"
        )
    gt_disp = gt.displacements[history - 1 : history - 1 + horizon]
    report = evaluate_forecast(
        pred.frames,
        gt_future,
        pred_disp=pred.displacements[: len(gt_disp)],
        gt_disp=gt_disp,
        last_observed=gt.frames[history - 1],
    )
    out_json = report.to_json()
    out_table = report.to_table()
    if args.out:
        ctx = _RunContext(args.out, {"command": "eval", "pred": str(args.pred),
                                     "gt": str(args.gt), "history": history},
                          inputs=[pred_dir, Path(args.gt)])
        (ctx.out / "report.json").write_text(out_json + "\n")
        (ctx.out / "report.txt").write_text(out_table + "\n")
        ctx.finish(args.workers)
    log_event("eval", miou_avg=report.miou_at.get("avg"),
              iou_avg=report.iou_at.get("avg"))
    print(out_table)
    return 0


def cmd_gradcheck(args) -> int:
    modules = [args.module] if args.module != "all" else ["splat", "vae", "world"]
    all_passed = True
    for name in modules:
        report = gradcheck_mod.SUITES[name](seed=args.seed or 0)
        log_event("gradcheck", **report)
        status = "PASS" if report["passed"] else "FAIL"
        print(f"{status} {name}: {report['checks']} checks, "
              f"max rel err {report['max_rel_err']:.3e} "
              f"(tol {report['rel_tol']:g}, {report['runtime_s']:.1f}s)")
        all_passed &= report["passed"]
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxworld",
        description="Synthetic occupancy rendering, coding, and forecasting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--workers", type=int, default=1,
                       help="upper bound on parallel workers inside stages")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=4)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--dims", help="grid dims as X,Y,Z")
    p.add_argument("--class-count", dest="class_count", type=int, default=None)
    p.add_argument("--static", type=int, default=None)
    p.add_argument("--moving", type=int, default=None)
    p.add_argument("--ego-speed", dest="ego_speed", type=float, default=None)
    p.add_argument("--ego-turn-rate", dest="ego_turn_rate", type=float, default=None)
    p.add_argument("--voxel-size", dest="voxel_size", type=float, default=None)
    p.add_argument("--cameras", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-img2occ", help="fit anchored gaussians to 2D views")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sequence", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--init-opacity", dest="init_opacity", type=float, default=None)
    p.add_argument("--init-scale-fraction", dest="init_scale_fraction",
                   type=float, default=None)
    p.set_defaults(func=cmd_train_img2occ)

    p = sub.add_parser("train-vae", help="train the occupancy codec")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--codebook-size", dest="codebook_size", type=int, default=None)
    p.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p.add_argument("--no-air-mask", dest="no_air_mask", action="store_true",
                   help="train the single-branch ablation variant")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-world", help="train the forecasting model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--vae", required=True, help="codec checkpoint base path")
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-steps", dest="stage1_steps", type=int, default=400)
    p.add_argument("--stage1-lr", dest="stage1_lr", type=float, default=1e-3)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--stage2-steps", dest="stage2_steps", type=int, default=None)
    p.add_argument("--stage2-lr", dest="stage2_lr", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--scales", type=int, default=None)
    p.add_argument("--context", type=int, default=None)
    p.set_defaults(func=cmd_train_world)

    p = sub.add_parser("forecast", help="autoregressive rollout")
    common(p)
    p.add_argument("--ckpt", required=True, help="train-world output directory")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", type=int, default=4)
    p.add_argument("--horizon", type=int, default=6)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("eval", help="score a forecast against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--history", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    common(p)
    p.add_argument("--module", choices=["splat", "vae", "world", "all"],
                   default="all")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print(json.dumps({"error": {"type": "ConfigError",
                                    "message": "--workers must be >= 1"}}),
              file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 2
    except (VoxworldError, ValueError, FileNotFoundError, IndexError) as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
