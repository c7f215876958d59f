"""Trajectory ingestion, resampling, episode windows and synthetic scenes."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .core import DEFAULT_DT, CrowdState, Scene, TrajectorySet, velocities_from_positions
from .errors import ConfigError, ContractError, DataError, ParseError

log = logging.getLogger(__name__)

SCENARIOS = ("corridor", "crossing", "circle")


def parse_trajectory_text(text: str, dt: float = DEFAULT_DT) -> TrajectorySet:
    """Parse ``frame_id ped_id x y`` lines; ``#`` starts a comment line."""
    rows: dict[int, list[tuple[int, float, float]]] = {}
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields 'frame ped x y', got {len(parts)}", line=lineno)
        try:
            frame_f, pid_f = float(parts[0]), float(parts[1])
            x, y = float(parts[2]), float(parts[3])
        except ValueError:
            raise ParseError(f"non-numeric field in {stripped!r}", line=lineno) from None
        if not (frame_f.is_integer() and pid_f.is_integer()):
            raise ParseError("frame and pedestrian ids must be integers", line=lineno)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError("coordinates must be finite", line=lineno)
        frame, pid = int(frame_f), int(pid_f)
        if (frame, pid) in seen:
            raise DataError(f"line {lineno}: duplicate sample for pedestrian {pid} at frame {frame}")
        seen.add((frame, pid))
        rows.setdefault(pid, []).append((frame, x, y))
    traj = TrajectorySet(dt=dt)
    for pid, samples in rows.items():
        samples.sort()
        arr = np.array(samples, dtype=np.float64)
        traj.add(pid, arr[:, 0].astype(np.int64), arr[:, 1:])
    return traj


def parse_trajectory_file(path, dt: float = DEFAULT_DT) -> TrajectorySet:
    return parse_trajectory_text(Path(path).read_text(encoding="utf-8"), dt=dt)


def format_trajectories(traj: TrajectorySet, header: dict | None = None) -> str:
    lines = []
    if header is not None:
        lines.append("# " + json.dumps(header, sort_keys=True))
    for frame, pid, x, y in traj.to_rows():
        lines.append(f"{int(frame)} {int(pid)} {float(x)!r} {float(y)!r}")
    return "\n".join(lines) + "\n"


def write_trajectory_file(path, traj: TrajectorySet, header: dict | None = None) -> None:
    Path(path).write_text(format_trajectories(traj, header), encoding="utf-8")


def frame_step(traj: TrajectorySet) -> int:
    """Greatest common divisor of all per-pedestrian frame gaps (1 if undetermined)."""
    gaps = [int(g) for _, (f, _) in traj.items() for g in np.diff(f)]
    return reduce(math.gcd, gaps) if gaps else 1


def resample_cubic(traj: TrajectorySet, target_dt: float, source_dt: float | None = None
                   ) -> TrajectorySet:
    """Natural cubic spline resampling of every pedestrian onto a ``target_dt`` lattice.

    Sample times are ``frame * traj.dt``; when ``source_dt`` is given, it is the
    time between consecutive samples and ``traj.dt`` is recomputed from the
    frame-id step (e.g. ids advancing by 10 per 0.4 s sample). The lattice
    starts at each pedestrian's first sample; samples that coincide with
    original instants take the original values exactly. Pedestrians with
    fewer than four samples pass through unresampled with a warning.
    """
    if not target_dt > 0:
        raise ContractError(f"target_dt must be positive, got {target_dt}")
    unit = traj.dt if source_dt is None else source_dt / frame_step(traj)
    out = TrajectorySet(dt=target_dt)
    for pid in traj.ids:
        frames, pos = traj[pid]
        times = frames * unit
        if len(frames) < 4:
            warnings.warn(f"pedestrian {pid}: {len(frames)} samples (<4), not resampled", stacklevel=2)
            out.add(pid, np.rint(times / target_dt).astype(np.int64), pos)
            continue
        n_steps = int(math.floor((times[-1] - times[0]) / target_dt + 1e-9))
        t_new = times[0] + target_dt * np.arange(n_steps + 1)
        spline = CubicSpline(times, pos, axis=0, bc_type="natural")
        values = spline(t_new)
        # snap lattice points that coincide with original sample instants
        idx = np.searchsorted(times, t_new)
        for k, (tk, j) in enumerate(zip(t_new, idx)):
            for cand in (j - 1, j):
                if 0 <= cand < len(times) and abs(times[cand] - tk) <= 1e-9 * max(1.0, abs(tk)):
                    values[k] = pos[cand]
        if abs(t_new[-1] - times[-1]) <= 1e-9 * max(1.0, abs(times[-1])):
            values[-1] = pos[-1]
        out.add(pid, np.rint(t_new / target_dt).astype(np.int64), values)
    return out


@dataclass
class Episode:
    """A window of ``h + tau`` ground-truth frames.

    Arrays are indexed ``[frame_in_window, pedestrian]``. ``present`` marks the
    frames where a pedestrian was observed; only pedestrians present for the
    whole window are ``active``. Velocities and accelerations come from
    forward differences over the full source trajectory.
    """

    scene: Scene
    start_frame: int
    h: int
    tau: int
    dt: float
    ids: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    destinations: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        if self.positions.shape[0] != self.h + self.tau:
            raise ContractError(f"episode has {self.positions.shape[0]} frames, expected h + tau")

    @property
    def n_frames(self) -> int:
        return self.h + self.tau

    @property
    def active(self) -> np.ndarray:
        return self.present.all(axis=0)

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.start_frame, self.start_frame + self.n_frames - 1

    def state_at(self, k: int, active_only: bool = True) -> CrowdState:
        """CrowdState at window frame ``k`` with up to ``h`` frames of history.

        The state's acceleration is the one applied on the way into frame
        ``k`` (``a[k-1]``), so it carries no information about frame ``k+1``.
        """
        cols = np.flatnonzero(self.active) if active_only else np.arange(len(self.ids))
        prev_acc = np.concatenate([self.accelerations[:1], self.accelerations[:-1]])
        lo = max(0, k - self.h + 1)
        rows = np.concatenate([self.positions[lo:k + 1], self.velocities[lo:k + 1],
                               prev_acc[lo:k + 1]], axis=-1)[:, cols]
        hist = np.transpose(rows, (1, 0, 2))
        n = hist.shape[1]
        hist = np.concatenate([np.repeat(hist[:, :1], self.h - n, axis=1), hist], axis=1)
        return CrowdState(self.start_frame + k, self.dt, self.ids[cols], self.positions[k, cols],
                          self.velocities[k, cols], prev_acc[k, cols], self.destinations[cols],
                          hist, np.full(len(cols), n))

    @property
    def frames(self) -> list[CrowdState]:
        return [self.state_at(k) for k in range(self.n_frames)]

    def ground_truth(self, first: int | None = None) -> TrajectorySet:
        """Active pedestrians' positions from window frame ``first`` on."""
        first = self.h - 1 if first is None else first
        out = TrajectorySet(dt=self.dt)
        frames = self.start_frame + np.arange(first, self.n_frames)
        for c in np.flatnonzero(self.active):
            out.add(int(self.ids[c]), frames, self.positions[first:, c])
        return out


def destinations_from(traj: TrajectorySet, overrides: dict | None = None) -> dict[int, np.ndarray]:
    dest = {pid: traj[pid][1][-1].copy() for pid in traj.ids}
    for pid, d in (overrides or {}).items():
        dest[int(pid)] = np.asarray(d, dtype=np.float64)
    return dest


def make_episodes(traj: TrajectorySet, scene: Scene, h: int = 8, tau: int = 10,
                  stride: int | None = None, destinations: dict | None = None) -> list[Episode]:
    """Sliding windows of ``h + tau`` frames with stride ``tau`` by default."""
    if h < 1 or tau < 1:
        raise ContractError(f"h and tau must be >= 1, got {h}, {tau}")
    stride = tau if stride is None else stride
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if len(traj) == 0:
        return []
    kin, _ = velocities_from_positions(traj, warn=False)
    dest = destinations_from(traj, destinations)
    first, last = traj.frame_range()
    length = h + tau
    episodes = []
    for start in range(first, last - length + 2, stride):
        stop = start + length - 1
        ids = [pid for pid in traj.ids if pid in kin
               and kin[pid].frames[0] <= stop and kin[pid].frames[-1] >= start]
        m = len(ids)
        pos = np.zeros((length, m, 2))
        vel = np.zeros((length, m, 2))
        acc = np.zeros((length, m, 2))
        present = np.zeros((length, m), dtype=bool)
        for c, pid in enumerate(ids):
            k = kin[pid]
            sel = (k.frames >= start) & (k.frames <= stop)
            rows = k.frames[sel] - start
            present[rows, c] = True
            # fill unobserved frames with the nearest observation to stay finite
            nearest = np.clip(np.searchsorted(k.frames, start + np.arange(length)), 0, len(k.frames) - 1)
            pos[:, c] = k.positions[nearest]
            vel[:, c] = k.velocities[nearest]
            acc[:, c] = k.accelerations[nearest]
            pos[rows, c] = k.positions[sel]
            vel[rows, c] = k.velocities[sel]
            acc[rows, c] = k.accelerations[sel]
        episodes.append(Episode(
            scene, start, h, tau, traj.dt, np.array(ids, dtype=np.int64), pos, vel, acc,
            np.array([dest[pid] for pid in ids]).reshape(m, 2), present))
    return episodes


def split(episodes: list, ratio: float = 0.8) -> tuple[list, list]:
    """Temporal split: the first ``floor(ratio * n)`` episodes train, the rest test."""
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train = int(math.floor(ratio * len(episodes) + 1e-9))
    return list(episodes[:n_train]), list(episodes[n_train:])


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "crossing"
    n_pedestrians: int = 20
    speed: float = 1.2
    noise: float = 0.01
    duration: int = 150
    seed: int = 0
    dt: float = DEFAULT_DT
    min_duration: int = field(default=18, repr=False)

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.kind!r}; choose from {SCENARIOS}")
        if self.n_pedestrians < 1:
            raise ConfigError("scenario needs at least one pedestrian")
        if self.duration < self.min_duration:
            raise ConfigError(f"duration {self.duration} shorter than h + tau = {self.min_duration}")
        if self.speed <= 0 or self.noise < 0 or self.dt <= 0:
            raise ConfigError(f"invalid scenario parameters {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def _straight_paths(starts, velocities, n_frames, dt):
    t = np.arange(n_frames) * dt
    return starts[None] + t[:, None, None] * velocities[None]


def synth_scenario(spec: ScenarioSpec) -> tuple[TrajectorySet, Scene, dict[int, np.ndarray]]:
    """Straight-line synthetic crowd with seeded Gaussian position noise.

    Returns the trajectories, an enclosing scene, and per-pedestrian
    destinations (each pedestrian's final position).
    """
    rng = np.random.default_rng(spec.seed)
    n, T, dt = spec.n_pedestrians, spec.duration, spec.dt
    travel = spec.speed * (T - 1) * dt
    if spec.kind == "circle":
        radius = travel / 2.0
        angles = 2.0 * np.pi * np.arange(n) / n
        starts = radius * np.column_stack([np.cos(angles), np.sin(angles)])
        paths = _straight_paths(starts, -2.0 * starts / ((T - 1) * dt), T, dt)
    else:
        speeds = spec.speed * rng.uniform(0.8, 1.2, size=n)
        lane = rng.uniform(-1.0, 1.0, size=n)
        offset = rng.uniform(0.0, 0.25 * travel, size=n)
        starts = np.zeros((n, 2))
        vel = np.zeros((n, 2))
        first_group = np.arange(n) % 2 == 0
        for k in range(n):
            along = -0.5 * travel - offset[k]
            if spec.kind == "corridor":
                if first_group[k]:
                    starts[k] = (along, 1.0 + lane[k] * 0.5)
                    vel[k] = (speeds[k], 0.0)
                else:
                    starts[k] = (-along, -1.0 + lane[k] * 0.5)
                    vel[k] = (-speeds[k], 0.0)
            else:
                if first_group[k]:
                    starts[k] = (along, 1.5 * lane[k])
                    vel[k] = (speeds[k], 0.0)
                else:
                    starts[k] = (1.5 * lane[k], along)
                    vel[k] = (0.0, speeds[k])
        paths = _straight_paths(starts, vel, T, dt)
    if spec.noise > 0:
        paths = paths + rng.normal(0.0, spec.noise, size=paths.shape)
    traj = TrajectorySet(dt=dt)
    frames = np.arange(T)
    for k in range(n):
        traj.add(k, frames, paths[:, k])
    scene = Scene.enclosing(paths.reshape(-1, 2), margin=1.0)
    dest = {k: paths[-1, k].copy() for k in range(n)}
    return traj, scene, dest


def scene_to_json(scene: Scene, destinations: dict | None = None, dt: float | None = None,
                  extra: dict | None = None) -> str:
    doc = scene.to_dict()
    if dt is not None:
        doc["dt"] = dt
    if destinations is not None:
        doc["destinations"] = {str(k): [float(x) for x in v] for k, v in sorted(destinations.items())}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True)


def load_scene(path) -> tuple[Scene, dict[int, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "bounds" not in doc:
        raise DataError(f"{path}: scene document lacks 'bounds'")
    dest = {int(k): np.asarray(v, dtype=np.float64) for k, v in doc.get("destinations", {}).items()}
    return Scene.from_dict(doc), dest, doc
