"""Command-line entry points: gen, train, sample, eval, interp, sweep.

Exit codes: 2 bad arguments, 3 I/O failure, 4 non-finite training loss,
5 generation-mode mismatch with the checkpoint, 6 shape mismatch between
checkpoint and data.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as vdata
from . import metrics
from .config import ConfigError, RunConfig
from .flow import PathParams
from .model import init_params
from .rngutil import substream
from .sample import ModeMismatchError, SampleConfig, interpolate, rollout
from .train import CheckpointFormatError, CheckpointShapeError, \
    CheckpointTruncatedError, OptimizerState, TrainingDivergedError, \
    load_checkpoint, save_checkpoint, train_loop
from .tensor import ShapeError

EXIT_BADARGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MODE = 5
EXIT_SHAPE = 6


def _echo(cfg: RunConfig, out_dir: str, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}.config"), "w") as f:
        f.write(cfg.echo_text())


def _load_cfg(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.strict_sequential:
        cfg["strict_sequential"] = True
    return cfg


def _generate(cfg: RunConfig) -> vdata.Dataset:
    seed = cfg["seed"]
    if cfg["data.kind"] == "const-velocity":
        return vdata.gen_constant_velocity(
            cfg["data.clips"], cfg["data.frames"], cfg["data.grid"],
            seed=substream(seed, "data").integers(2**31),
            channels=cfg["data.channels"], square=cfg["data.square"],
            max_speed=cfg["data.max_speed"])
    if cfg["data.kind"] == "bouncing-balls":
        return vdata.gen_bouncing_balls(
            cfg["data.clips"], cfg["data.frames"], cfg["data.grid"],
            cfg["data.balls"], (cfg["data.speed_min"], cfg["data.speed_max"]),
            seed=substream(seed, "data").integers(2**31),
            channels=cfg["data.channels"], radius=cfg["data.radius"])
    raise ConfigError(f"unknown data.kind {cfg['data.kind']!r}")


def _codec(cfg: RunConfig):
    return vdata.make_codec(cfg["data.codec"], cfg["data.pool"])


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    if cfg["data.codec"] == "avgpool" and cfg["data.grid"] % cfg["data.pool"]:
        print(f"error: grid {cfg['data.grid']} not divisible by avgpool "
              f"factor {cfg['data.pool']}", file=sys.stderr)
        return EXIT_BADARGS
    clips = _generate(cfg)
    path = args.path or os.path.join(args.out, "dataset.fvds")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    vdata.save_dataset(clips, path)
    _echo(cfg, args.out, "gen")
    n, c, h, w = clips[0].frames.shape if clips else (0, 0, 0, 0)
    print(f"wrote {path}: clips={len(clips)} frames={n} "
          f"channels={c} size={h}x{w}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    dataset = vdata.load_dataset(args.data)
    codec = _codec(cfg)
    latent = [vdata.encode_clip(c, codec) for c in dataset]
    if cfg["train.mode"] == "interpolate":
        # the planning variant drops the reference and conditions on both sides
        cfg["model.use_reference"] = False
        cfg["model.condition_slots"] = 2
    mcfg = cfg.model_config(latent[0].frames.shape[1:])
    tcfg = cfg.train_config()
    params = init_params(mcfg, substream(tcfg.seed, "init"))
    opt = OptimizerState()
    ckpt_path = args.ckpt or os.path.join(args.out, "model.fckp")
    if args.resume:
        params, opt, mcfg, tcfg = load_checkpoint(args.resume)
        # the checkpoint pins everything that affects replay except the
        # stopping point, which the caller may extend
        tcfg = replace(tcfg, iterations=cfg["train.iterations"])
    os.makedirs(args.out, exist_ok=True)
    _echo(cfg, args.out, "train")
    log_path = os.path.join(args.out, "train_log.csv")
    log_every = cfg["train.log_every"]
    with open(log_path, "a" if args.resume else "w", newline="") as logf:
        w = csv.writer(logf)
        if not args.resume:
            w.writerow(["iteration", "loss", "lr"])

        def cb(it, loss, lr):
            w.writerow([it, f"{loss:.6f}", f"{lr:.8f}"])
            if log_every and it % log_every == 0:
                print(f"iter {it}  loss {loss:.5f}  lr {lr:.6f}")

        params, opt = train_loop(latent, mcfg, tcfg, params, opt, callback=cb,
                                 checkpoint_path=ckpt_path,
                                 checkpoint_every=cfg["train.checkpoint_every"])
    save_checkpoint(params, opt, mcfg, tcfg, ckpt_path)
    print(f"wrote {ckpt_path} at step {opt.step}")
    return 0


def _load_model(path: str):
    params, opt, mcfg, tcfg = load_checkpoint(path)
    return params, mcfg, tcfg


def _check_shapes(mcfg, latent_clips) -> None:
    got = latent_clips[0].frames.shape[1:]
    if tuple(got) != mcfg.latent_shape:
        raise ShapeError(f"checkpoint expects latents {mcfg.latent_shape}, "
                         f"dataset encodes to {tuple(got)}")


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    params, mcfg, tcfg = _load_model(args.ckpt)
    if tcfg.mode != "predict":
        raise ModeMismatchError("sample requires a predict-mode checkpoint")
    dataset = vdata.load_dataset(args.data)
    codec = _codec(cfg)
    latent = [vdata.encode_clip(c, codec) for c in dataset]
    _check_shapes(mcfg, latent)
    clip = latent[args.clip]
    context = [clip.frames[i] for i in range(args.context)]
    scfg = cfg.sample_config()
    ro = rollout(context, args.n_future, params, mcfg, scfg,
                 PathParams(tcfg.sigma_min), substream(cfg["seed"], "sample"))
    os.makedirs(args.out, exist_ok=True)
    decoded = [np.clip(codec.decode(f), 0.0, 1.0) for f in ro.frames]
    for i, f in enumerate(decoded, start=1):
        vdata.save_pgm(f, os.path.join(args.out, f"frame_{i:03d}.pgm"))
    ctx_px = [codec.decode(f) for f in context]
    vdata.save_montage(ctx_px + decoded, os.path.join(args.out, "montage.pgm"))
    _echo(cfg, args.out, "sample")
    print(f"generated {len(ro.frames)} frames, {ro.network_evals} network evals")
    return 0


def _run_eval(cfg: RunConfig, dataset, params, mcfg, tcfg, scfg,
              baseline: str | None) -> metrics.EvalReport:
    codec = _codec(cfg)
    k, n = cfg["eval.context"], cfg["eval.horizon"]
    predicted, truth = [], []
    pathp = PathParams(tcfg.sigma_min if tcfg else cfg["train.sigma_min"])
    for idx, clip in enumerate(dataset):
        lat = vdata.encode_clip(clip, codec)
        context = [lat.frames[i] for i in range(k)]
        if baseline == "copy-last":
            pred_lat = metrics.copy_last_baseline(context, n)
        else:
            rng = substream(cfg["seed"], f"eval/{idx}")
            pred_lat = rollout(context, n, params, mcfg, scfg, pathp,
                               rng).frames
        pred_px = [np.clip(codec.decode(f), 0.0, 1.0) for f in pred_lat]
        true_px = [clip.frames[k + j] for j in range(n)]
        if cfg["eval.against"] == "ae-gt":
            true_px = [codec.decode(codec.encode(f)) for f in true_px]
        predicted.append(pred_px)
        truth.append(true_px)
    report = metrics.evaluate_predictions(predicted, truth)
    report.config_echo = {"eval.context": k, "eval.horizon": n,
                          "eval.against": cfg["eval.against"],
                          "sample.n_steps": scfg.n_steps,
                          "sample.warm_start_s": scfg.warm_start_s,
                          "sample.solver": scfg.solver,
                          "seed": cfg["seed"],
                          "baseline": baseline or "none"}
    return report


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    dataset = vdata.load_dataset(args.data)
    if args.baseline:
        params = mcfg = tcfg = None
    else:
        if not args.ckpt:
            print("error: --ckpt or --baseline required", file=sys.stderr)
            return EXIT_BADARGS
        params, mcfg, tcfg = _load_model(args.ckpt)
        if tcfg.mode != "predict":
            raise ModeMismatchError("eval requires a predict-mode checkpoint")
        codec = _codec(cfg)
        _check_shapes(mcfg, [vdata.encode_clip(dataset[0], codec)])
    report = _run_eval(cfg, dataset, params, mcfg, tcfg, cfg.sample_config(),
                       args.baseline)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.txt"), "w") as f:
        f.write(report.as_kv_text())
    with open(os.path.join(args.out, "eval_curves.csv"), "w") as f:
        f.write(report.curves_csv())
    _echo(cfg, args.out, "eval")
    print(report.as_kv_text(), end="")
    return 0


def cmd_interp(args) -> int:
    cfg = _load_cfg(args)
    params, mcfg, tcfg = _load_model(args.ckpt)
    if tcfg.mode != "interpolate":
        raise ModeMismatchError("interp requires an interpolate-mode checkpoint")
    dataset = vdata.load_dataset(args.data)
    codec = _codec(cfg)
    lat = vdata.encode_clip(dataset[args.clip], codec)
    _check_shapes(mcfg, [lat])
    source = lat.frames[0]
    target = lat.frames[args.n_between + 1]
    scfg = cfg.sample_config()
    ro = interpolate(source, target, args.n_between, params, mcfg, scfg,
                     PathParams(tcfg.sigma_min),
                     substream(cfg["seed"], "interp"))
    os.makedirs(args.out, exist_ok=True)
    frames_px = [codec.decode(source)] \
        + [np.clip(codec.decode(f), 0.0, 1.0) for f in ro.frames] \
        + [codec.decode(target)]
    for i, f in enumerate(frames_px):
        vdata.save_pgm(f, os.path.join(args.out, f"frame_{i:03d}.pgm"))
    vdata.save_montage(frames_px, os.path.join(args.out, "montage.pgm"))
    _echo(cfg, args.out, "interp")
    print(f"infilled {len(ro.frames)} frames, {ro.network_evals} network evals")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    dataset = vdata.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = [("setting", "network_evals", "psnr", "ssim")]
    n_per_clip = cfg["eval.horizon"]

    def evals_used(scfg: SampleConfig) -> int:
        return len(dataset) * n_per_clip * scfg.steps_per_frame \
            * scfg.evals_per_step

    if args.kind == "warm-start":
        params, mcfg, tcfg = _load_model(args.ckpt)
        for s in [float(v) for v in args.values.split(",")]:
            scfg = cfg.sample_config()
            scfg = SampleConfig(n_steps=scfg.n_steps, warm_start_s=s,
                                context_limit=scfg.context_limit,
                                seed=scfg.seed, solver=scfg.solver)
            rep = _run_eval(cfg, dataset, params, mcfg, tcfg, scfg, None)
            rows.append((f"s={s}", evals_used(scfg),
                         f"{rep.mean_psnr:.4f}", f"{rep.mean_ssim:.4f}"))
    elif args.kind == "context":
        params, mcfg, tcfg = _load_model(args.ckpt)
        for limit in [int(v) for v in args.values.split(",")]:
            scfg = cfg.sample_config()
            scfg = SampleConfig(n_steps=scfg.n_steps,
                                warm_start_s=scfg.warm_start_s,
                                context_limit=limit, seed=scfg.seed,
                                solver=scfg.solver)
            rep = _run_eval(cfg, dataset, params, mcfg, tcfg, scfg, None)
            rows.append((f"context={limit}", evals_used(scfg),
                         f"{rep.mean_psnr:.4f}", f"{rep.mean_ssim:.4f}"))
    elif args.kind == "reference":
        for label, path in (("with-reference", args.ckpt),
                            ("without-reference", args.ckpt_noref)):
            if not path:
                print("error: reference sweep needs --ckpt and --ckpt-noref",
                      file=sys.stderr)
                return EXIT_BADARGS
            params, mcfg, tcfg = _load_model(path)
            scfg = cfg.sample_config()
            rep = _run_eval(cfg, dataset, params, mcfg, tcfg, scfg, None)
            rows.append((label, evals_used(scfg),
                         f"{rep.mean_psnr:.4f}", f"{rep.mean_ssim:.4f}"))
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    _echo(cfg, args.out, "sweep")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowvid",
                                 description="randomized conditional flow "
                                 "matching for video prediction, desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--strict-sequential", action="store_true",
                       help="bit-exact sequential execution (the default; "
                       "flag kept for reproducibility scripts)")
        p.add_argument("-o", "--override", action="append", default=[],
                       metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--path", help="dataset file (default <out>/dataset.fvds)")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the vector-field model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint path (default <out>/model.fckp)")
    p.add_argument("--resume", help="resume from an existing checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="roll out future frames")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--context", type=int, default=2)
    p.add_argument("--n-future", type=int, default=5)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate rollouts against ground truth")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", choices=["copy-last"],
                   help="evaluate a trivial baseline instead of a model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interp", help="infill frames between source and target")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--n-between", type=int, default=1)
    p.set_defaults(fn=cmd_interp)

    p = sub.add_parser("sweep", help="ablation sweeps (warm start, context, "
                       "reference)")
    common(p)
    p.add_argument("--kind", required=True,
                   choices=["warm-start", "context", "reference"])
    p.add_argument("--ckpt")
    p.add_argument("--ckpt-noref")
    p.add_argument("--data", required=True)
    p.add_argument("--values", default="0,0.2,0.4,0.6,0.8")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BADARGS
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModeMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODE
    except (ShapeError, CheckpointShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (CheckpointFormatError, CheckpointTruncatedError,
            vdata.DatasetFormatError, vdata.DatasetTruncatedError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
