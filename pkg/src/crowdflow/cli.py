"""Command-line entry point: synth, preprocess, train, simulate, evaluate, bench."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baseline import SfmParams, SocialForceModel
from .core import DEFAULT_DT, CrowdState, integrate_step
from .data import (ScenarioSpec, load_scene, make_episodes, parse_trajectory_file, resample_cubic,
                   scene_to_json, split, synth_scenario, write_trajectory_file)
from .errors import ConfigError, CrowdflowError, DataError
from .estimator import load_checkpoint, save_checkpoint
from .metrics import ALL_METRICS, evaluate
from .simulate import (ARRIVAL_RADIUS, accumulated_error_curve, autoregressive_rollout,
                       state_from_trajectories, write_curve_csv, zero_model)
from .training import TrainConfig, Trainer

log = logging.getLogger("crowdflow")


def _scene_path(out: Path) -> Path:
    return out.with_name(out.stem + ".scene.json")


def cmd_synth(args) -> int:
    spec = ScenarioSpec(args.scenario, args.peds, args.speed, args.noise, args.frames, args.seed)
    traj, scene, dest = synth_scenario(spec)
    echo = {"command": "synth", "scenario": spec.to_dict()}
    out = Path(args.out)
    write_trajectory_file(out, traj, header=echo)
    scene_out = Path(args.scene_out) if args.scene_out else _scene_path(out)
    scene_out.write_text(scene_to_json(scene, dest, spec.dt, {"config": echo}) + "\n", encoding="utf-8")
    print(f"wrote {len(traj)} pedestrians x {spec.duration} frames to {out} (scene: {scene_out})")
    return 0


def cmd_preprocess(args) -> int:
    src = parse_trajectory_file(args.inp, dt=args.source_dt)
    out = resample_cubic(src, args.target_dt, source_dt=args.source_dt)
    echo = {"command": "preprocess", "source_dt": args.source_dt, "target_dt": args.target_dt,
            "method": "natural cubic spline", "input": Path(args.inp).name}
    write_trajectory_file(args.out, out, header=echo)
    print(f"resampled {len(out)} pedestrians to dt={args.target_dt} -> {args.out}")
    return 0


def _load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.epochs is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "epochs": args.epochs})
    scene, dest, scene_doc = load_scene(args.scene)
    traj = parse_trajectory_file(args.data, dt=scene_doc.get("dt", DEFAULT_DT))
    episodes = make_episodes(traj, scene, config.h, config.tau, config.stride, dest)
    if len(episodes) < 2:
        raise DataError(f"{args.data}: only {len(episodes)} episodes of {config.h + config.tau} frames")
    train, test = split(episodes, config.split_ratio)
    trainer = Trainer(config, scene)

    def progress(stats):
        log.info("epoch %d  l_nn=%.6g  l_ode=%.6g  l_joint=%.6g", stats.epoch + 1, stats.l_nn,
                 stats.l_ode, stats.l_joint)

    report = trainer.fit(train, callback=progress)
    extra = {"train_episodes": len(train), "test_episodes": len(test),
             "final_l_joint": report.l_joint[-1] if report.epochs else None}
    save_checkpoint(args.out, trainer, extra)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    report.write_csv(log_path, header={"command": "train", "config": config.to_dict()})
    print(f"trained {len(report.epochs)} epochs on {len(train)} episodes; "
          f"checkpoint {args.out}, log {log_path}")
    return 0


def _model_for(kind: str, model_path):
    if kind == "zero":
        return zero_model, {"model_kind": "zero"}
    if kind == "sfm":
        params = SfmParams()
        return SocialForceModel(params), {"model_kind": "sfm", "sfm": asdict(params)}
    if model_path is None:
        raise ConfigError("--model is required for --model-kind stddn")
    trainer, meta = load_checkpoint(model_path)
    return trainer.model, {"model_kind": "stddn", "train_config": meta["config"]}


def cmd_simulate(args) -> int:
    scene, dest, scene_doc = load_scene(args.scene)
    dt = scene_doc.get("dt", DEFAULT_DT)
    init = parse_trajectory_file(args.init, dt=dt)
    if len(init) == 0:
        raise DataError(f"{args.init}: no trajectories")
    model, echo = _model_for(args.model_kind, args.model)
    h = echo.get("train_config", {}).get("h", 8)
    frame = init.frame_range()[1] if args.frame is None else args.frame
    state = state_from_trajectories(init, frame, h, dest)
    if state.n_pedestrians == 0:
        raise DataError(f"{args.init}: nobody observed at frame {frame}")
    pred = autoregressive_rollout(model, state, scene, args.horizon, ARRIVAL_RADIUS)
    echo.update({"command": "simulate", "start_frame": frame, "horizon": args.horizon,
                 "arrival_radius": ARRIVAL_RADIUS, "init": Path(args.init).name})
    write_trajectory_file(args.out, pred, header=echo)
    print(f"simulated {state.n_pedestrians} pedestrians for {args.horizon} frames -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(metrics) - set(ALL_METRICS)
    if bad:
        raise ConfigError(f"unknown metrics {sorted(bad)}; choose from {','.join(ALL_METRICS)}")
    pred = parse_trajectory_file(args.pred, dt=args.dt)
    gt = parse_trajectory_file(args.gt, dt=args.dt)
    if args.restrict:
        first, last = pred.frame_range()
        gt = gt.restrict(pred.ids, first, last)
    report = evaluate(pred, gt, metrics)
    report.config.update({"command": "evaluate", "pred": Path(args.pred).name,
                          "gt": Path(args.gt).name, "dt": args.dt})
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())
    if args.curve:
        frames, values = accumulated_error_curve(pred, gt, args.curve_metric)
        write_curve_csv(args.curve, frames, values, args.curve_metric,
                        header={"command": "evaluate", "curve_metric": args.curve_metric,
                                "pred": Path(args.pred).name, "gt": Path(args.gt).name})
    return 0


def cmd_bench(args) -> int:
    trainer, meta = load_checkpoint(args.model)
    model = trainer.model
    rng = np.random.default_rng(args.seed)
    scene = trainer.scene
    lo = np.array(scene.bounds[:2])
    hi = np.array(scene.bounds[2:])
    pos = rng.uniform(lo, hi, size=(args.peds, 2))
    vel = rng.normal(0.0, 1.0, size=(args.peds, 2))
    dest = rng.uniform(lo, hi, size=(args.peds, 2))
    state = CrowdState.from_arrays(pos, vel, destinations=dest, h=model.config.history)
    latencies = []
    for _ in range(args.frames):
        t0 = time.perf_counter()
        accel = model.forward(state, scene).value
        latencies.append(time.perf_counter() - t0)
        state = integrate_step(state, accel)
    lat = np.array(latencies)
    doc = {"command": "bench", "peds": args.peds, "frames": args.frames,
           "n_parameters": model.n_parameters, "n_parameters_total": trainer.store.n_parameters,
           "latency_s": {"mean": float(lat.mean()), "median": float(np.median(lat)),
                         "p95": float(np.percentile(lat, 95)), "min": float(lat.min())},
           "fps": float(len(lat) / lat.sum()), "config": meta["config"]}
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdflow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"crowdflow {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--scenario", choices=("corridor", "crossing", "circle"), default="crossing")
    p.add_argument("--peds", type=int, default=20)
    p.add_argument("--frames", type=int, default=150)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--speed", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scene-out", help="scene JSON path (default: <out>.scene.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="cubic resampling onto a fixed frame interval")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--source-dt", type=float, required=True)
    p.add_argument("--target-dt", type=float, default=DEFAULT_DT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="joint training from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training-log CSV (default: <out>.log.csv)")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="autoregressive rollout")
    p.add_argument("--model")
    p.add_argument("--model-kind", choices=("stddn", "sfm", "zero"), default="stddn")
    p.add_argument("--init", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--frame", type=int, help="start frame (default: last frame of --init)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="metric report for predicted vs ground-truth trajectories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="write the per-frame error curve CSV here")
    p.add_argument("--curve-metric", choices=("mae", "ot", "mmd"), default="mae")
    p.add_argument("--dt", type=float, default=DEFAULT_DT)
    p.add_argument("--restrict", action="store_true",
                   help="clip ground truth to the predicted pedestrians and frames")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="parameter count, latency and throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--peds", type=int, default=20)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit():
    raw = os.environ.get("CROWDFLOW_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CROWDFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CROWDFLOW_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (CrowdflowError, OSError, KeyError, ValueError) as exc:
        print(f"crowdflow {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
