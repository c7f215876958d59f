"""Autoregressive rollouts and per-frame error bookkeeping."""
from __future__ import annotations

import csv
import json
from collections.abc import Callable

import numpy as np

from .core import CrowdState, Scene, TrajectorySet, integrate_step, velocities_from_positions
from .errors import ContractError, RolloutError, TrainingError
from .predictor import PredictorModel, predict_next

ARRIVAL_RADIUS = 0.5

AccelFn = Callable[[CrowdState, Scene], np.ndarray]


def zero_model(state: CrowdState, scene: Scene | None = None) -> np.ndarray:
    """Constant-velocity reference: zero acceleration for everyone."""
    return np.zeros((state.n_pedestrians, 2))


def as_accel_fn(model) -> AccelFn:
    if isinstance(model, PredictorModel):
        return lambda state, scene: predict_next(model, state, scene)
    if hasattr(model, "accelerations"):
        return model.accelerations
    if callable(model):
        return model
    raise ContractError(f"cannot use {type(model).__name__} as an acceleration model")


def _freeze(new: CrowdState, old: CrowdState, frozen: np.ndarray) -> CrowdState:
    if not frozen.any():
        return new
    pos = new.positions.copy()
    vel = new.velocities.copy()
    acc = new.accelerations.copy()
    pos[frozen] = old.positions[frozen]
    vel[frozen] = 0.0
    acc[frozen] = 0.0
    hist = new.history.copy()
    hist[frozen, -1] = np.concatenate([pos[frozen], vel[frozen], acc[frozen]], axis=1)
    return new.replace(positions=pos, velocities=vel, accelerations=acc, history=hist)


def autoregressive_rollout(model, initial: CrowdState, scene: Scene | None, horizon: int,
                           arrival_radius: float = ARRIVAL_RADIUS, return_states: bool = False):
    """Iterate predict -> integrate for up to ``horizon`` frames.

    Pedestrians within ``arrival_radius`` of their destination are frozen in
    place; the loop ends early once everyone has arrived. The output holds
    the simulated frames only (not the initial one).
    """
    accel_fn = as_accel_fn(model)
    state = initial
    arrived = np.linalg.norm(state.positions - state.destinations, axis=1) <= arrival_radius
    out = TrajectorySet(dt=state.dt)
    frames: list[int] = []
    positions: list[np.ndarray] = []
    states = [state]
    for _ in range(horizon):
        if arrived.all():
            break
        try:
            accel = np.asarray(accel_fn(state, scene), dtype=np.float64)
        except TrainingError as exc:
            raise RolloutError(f"model failed: {exc}", frame=state.time_index + 1) from exc
        if accel.shape != (state.n_pedestrians, 2) or not np.all(np.isfinite(accel)):
            raise RolloutError("non-finite or malformed prediction", frame=state.time_index + 1)
        accel = np.where(arrived[:, None], 0.0, accel)
        new = _freeze(integrate_step(state, accel), state, arrived)
        arrived = arrived | (np.linalg.norm(new.positions - new.destinations, axis=1) <= arrival_radius)
        state = new
        frames.append(state.time_index)
        positions.append(state.positions)
        states.append(state)
    if frames:
        stacked = np.stack(positions)
        for c, pid in enumerate(initial.ids):
            out.add(int(pid), frames, stacked[:, c])
    return (out, states) if return_states else out


def state_from_trajectories(traj: TrajectorySet, frame: int, h: int = 8,
                            destinations: dict | None = None) -> CrowdState:
    """CrowdState at ``frame`` for pedestrians observed then, with up to ``h`` frames of history.

    Destinations default to each pedestrian's last observed position.
    """
    kin, _ = velocities_from_positions(traj, warn=False)
    ids, pos, vel, acc, dest, hist, valid = [], [], [], [], [], [], []
    for pid in traj.ids:
        if pid not in kin:
            continue
        k = kin[pid]
        idx = np.searchsorted(k.frames, frame)
        if idx >= len(k.frames) or k.frames[idx] != frame:
            continue
        lo = max(0, idx - h + 1)
        prev_acc = np.concatenate([k.accelerations[:1], k.accelerations[:-1]])
        rows = np.concatenate([k.positions[lo:idx + 1], k.velocities[lo:idx + 1],
                               prev_acc[lo:idx + 1]], axis=1)
        n = len(rows)
        hist.append(np.concatenate([np.repeat(rows[:1], h - n, axis=0), rows]))
        valid.append(n)
        ids.append(pid)
        pos.append(k.positions[idx])
        vel.append(k.velocities[idx])
        acc.append(prev_acc[idx])
        d = (destinations or {}).get(pid)
        dest.append(k.positions[-1] if d is None else d)
    m = len(ids)
    return CrowdState(frame, traj.dt, np.array(ids, dtype=np.int64), np.reshape(pos, (m, 2)),
                      np.reshape(vel, (m, 2)), np.reshape(acc, (m, 2)), np.reshape(dest, (m, 2)),
                      np.reshape(hist, (m, h, 6)), np.array(valid, dtype=np.int64))


def accumulated_error_curve(pred: TrajectorySet, gt: TrajectorySet, metric="mae"
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Error of the rollout at each frame, over pedestrians present in both sets.

    ``metric`` is ``"mae"``, ``"ot"``, ``"mmd"`` or a callable taking two
    ``(n, 2)`` position arrays. Returns ``(frames, values)``; both are empty
    when the sets share no pedestrian.
    """
    from . import metrics

    if callable(metric):
        fn = metric
    elif metric == "mae":
        fn = lambda a, b: float(np.linalg.norm(a - b, axis=1).mean())  # noqa: E731
    elif metric == "ot":
        fn = metrics.ot_sinkhorn
    elif metric == "mmd":
        fn = metrics.mmd_gaussian
    else:
        raise ContractError(f"unsupported curve metric {metric!r}")
    common = sorted(set(pred.ids) & set(gt.ids))
    if not common:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    frames = sorted(set(np.concatenate([pred[p][0] for p in common]).tolist())
                    & set(np.concatenate([gt[p][0] for p in common]).tolist()))
    out_frames, values = [], []
    for f in frames:
        a, b = [], []
        for pid in common:
            fp, pp = pred[pid]
            fg, pg = gt[pid]
            ip, ig = np.searchsorted(fp, f), np.searchsorted(fg, f)
            if ip < len(fp) and fp[ip] == f and ig < len(fg) and fg[ig] == f:
                a.append(pp[ip])
                b.append(pg[ig])
        if a:
            out_frames.append(f)
            values.append(fn(np.array(a), np.array(b)))
    return np.array(out_frames, dtype=np.int64), np.array(values, dtype=np.float64)


def write_curve_csv(path, frames, values, metric: str = "value", header: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["frame", metric])
        for f, v in zip(frames, values):
            writer.writerow([int(f), repr(float(v))])


def rollout_episode(model, episode, scene: Scene | None = None,
                    arrival_radius: float = ARRIVAL_RADIUS) -> tuple[TrajectorySet, TrajectorySet]:
    """Roll out from the last history frame of ``episode``; returns ``(pred, gt)`` over its horizon."""
    initial = episode.state_at(episode.h - 1)
    pred = autoregressive_rollout(model, initial, scene if scene is not None else episode.scene,
                                  episode.tau, arrival_radius)
    return pred, episode.ground_truth(episode.h)


def rollout_mae(model, episodes, scene: Scene | None = None) -> float:
    """Mean position error of autoregressive rollouts pooled over ``episodes``."""
    total, count = 0.0, 0
    for ep in episodes:
        pred, gt = rollout_episode(model, ep, scene)
        for pid in pred.ids:
            fp, pp = pred[pid]
            fg, pg = gt[pid]
            _, ip, ig = np.intersect1d(fp, fg, return_indices=True)
            total += float(np.linalg.norm(pp[ip] - pg[ig], axis=1).sum())
            count += len(ip)
    if count == 0:
        raise ContractError("rollout_mae: no aligned samples")
    return total / count
