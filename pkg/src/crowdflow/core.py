"""Pedestrian, scene and trajectory types plus the kinematic update rule."""
from __future__ import annotations

import math
import warnings
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEFAULT_DT = 0.08
DEFAULT_HISTORY = 8

# history channels: position (2), velocity (2), acceleration (2)
HISTORY_CHANNELS = 6


def _frozen(arr, dtype=np.float64, shape_tail=None, name="array") -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    if shape_tail is not None and out.shape[1:] != shape_tail:
        raise ContractError(f"{name}: expected trailing shape {shape_tail}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ContractError(f"Vec2 components must be finite, got ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Scene:
    """Static environment: axis-aligned bounds ``(xmin, ymin, xmax, ymax)`` and obstacle points."""

    bounds: tuple[float, float, float, float]
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        xmin, ymin, xmax, ymax = (float(b) for b in self.bounds)
        if not (xmax > xmin and ymax > ymin):
            raise ContractError(f"scene bounds must have positive area, got {self.bounds}")
        obs = np.array(self.obstacles, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(obs)):
            raise ContractError("obstacle coordinates must be finite")
        inside = ((obs[:, 0] >= xmin) & (obs[:, 0] <= xmax)
                  & (obs[:, 1] >= ymin) & (obs[:, 1] <= ymax))
        if not np.all(inside):
            raise ContractError("all obstacle points must lie inside the scene bounds")
        obs.setflags(write=False)
        object.__setattr__(self, "bounds", (xmin, ymin, xmax, ymax))
        object.__setattr__(self, "obstacles", obs)

    @property
    def width(self) -> float:
        return self.bounds[2] - self.bounds[0]

    @property
    def height(self) -> float:
        return self.bounds[3] - self.bounds[1]

    def to_dict(self) -> dict:
        return {"bounds": list(self.bounds), "obstacles": self.obstacles.tolist()}

    @classmethod
    def from_dict(cls, doc: Mapping) -> Scene:
        return cls(tuple(doc["bounds"]), np.array(doc.get("obstacles", []), dtype=np.float64))

    @classmethod
    def enclosing(cls, points: np.ndarray, margin: float = 1.0) -> Scene:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        return cls((lo[0], lo[1], hi[0], hi[1]))


@dataclass(frozen=True)
class PedestrianState:
    id: int
    position: Vec2
    velocity: Vec2
    acceleration: Vec2
    destination: Vec2
    history: tuple = ()   # ((frame, position, velocity, acceleration), ...), oldest first


@dataclass(frozen=True)
class CrowdState:
    """State of all active pedestrians at one frame.

    ``history`` is ``(M, h, 6)`` holding (p, v, a) per frame, oldest first, the
    last entry being the current frame. Pedestrians with fewer than ``h``
    observed frames are padded by repeating their earliest frame;
    ``history_valid`` counts the real entries.
    """

    time_index: int
    dt: float
    ids: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    destinations: np.ndarray
    history: np.ndarray
    history_valid: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        ids = _frozen(self.ids, dtype=np.int64, name="ids").reshape(-1)
        if len(np.unique(ids)) != len(ids):
            raise ContractError("pedestrian ids must be unique")
        m = len(ids)
        arrays = {}
        for name in ("positions", "velocities", "accelerations", "destinations"):
            arr = _frozen(np.reshape(getattr(self, name), (m, 2)), name=name)
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} must be finite")
            arrays[name] = arr
        hist = np.array(self.history, dtype=np.float64)
        if hist.ndim != 3 or hist.shape[0] != m or hist.shape[2] != HISTORY_CHANNELS:
            raise ContractError(f"history must be (M, h, 6), got {hist.shape}")
        hist.setflags(write=False)
        valid = _frozen(np.reshape(self.history_valid, (m,)), dtype=np.int64, name="history_valid")
        if np.any(valid < 1) or np.any(valid > hist.shape[1]):
            raise ContractError("history_valid must lie in [1, h]")
        object.__setattr__(self, "ids", ids)
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "history_valid", valid)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "time_index", int(self.time_index))

    @property
    def n_pedestrians(self) -> int:
        return len(self.ids)

    @property
    def history_length(self) -> int:
        return self.history.shape[1]

    @property
    def pedestrians(self) -> list[PedestrianState]:
        peds = []
        h = self.history_length
        for k, pid in enumerate(self.ids):
            n = int(self.history_valid[k])
            rows = self.history[k, h - n:]
            hist = tuple(
                (self.time_index - (n - 1 - r), Vec2(*row[0:2]), Vec2(*row[2:4]), Vec2(*row[4:6]))
                for r, row in enumerate(rows)
            )
            peds.append(PedestrianState(
                int(pid), Vec2(*self.positions[k]), Vec2(*self.velocities[k]),
                Vec2(*self.accelerations[k]), Vec2(*self.destinations[k]), hist))
        return peds

    @classmethod
    def from_arrays(cls, positions, velocities, accelerations=None, destinations=None, *,
                    ids=None, dt: float = DEFAULT_DT, time_index: int = 0,
                    history: np.ndarray | None = None, history_valid=None,
                    h: int = DEFAULT_HISTORY) -> CrowdState:
        """Build a state; without ``history`` every pedestrian gets a padded one-frame history."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        m = len(p)
        v = np.asarray(velocities, dtype=np.float64).reshape(m, 2)
        a = np.zeros((m, 2)) if accelerations is None else np.asarray(accelerations, float).reshape(m, 2)
        d = p.copy() if destinations is None else np.asarray(destinations, float).reshape(m, 2)
        ids = np.arange(m) if ids is None else np.asarray(ids)
        if history is None:
            frame = np.concatenate([p, v, a], axis=1)
            history = np.repeat(frame[:, None, :], h, axis=1)
            history_valid = np.ones(m, dtype=np.int64)
        elif history_valid is None:
            history_valid = np.full(m, np.asarray(history).shape[1])
        return cls(time_index, dt, ids, p, v, a, d, history, history_valid)

    @classmethod
    def from_pedestrians(cls, pedestrians: Iterable[PedestrianState], *, dt: float = DEFAULT_DT,
                         time_index: int = 0, h: int = DEFAULT_HISTORY) -> CrowdState:
        peds = list(pedestrians)
        m = len(peds)
        hist = np.zeros((m, h, HISTORY_CHANNELS))
        valid = np.ones(m, dtype=np.int64)
        for k, ped in enumerate(peds):
            rows = [np.r_[p.as_array(), v.as_array(), a.as_array()] for _, p, v, a in ped.history[-h:]]
            frames = [f for f, *_ in ped.history[-h:]]
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise ContractError(f"pedestrian {ped.id}: history timestamps must increase")
            if not rows:
                rows = [np.r_[ped.position.as_array(), ped.velocity.as_array(),
                              ped.acceleration.as_array()]]
            rows = np.array(rows)
            valid[k] = len(rows)
            hist[k] = np.concatenate([np.repeat(rows[:1], h - len(rows), axis=0), rows])
        return cls(
            time_index, dt, np.array([p.id for p in peds], dtype=np.int64),
            np.array([p.position.as_array() for p in peds]).reshape(m, 2),
            np.array([p.velocity.as_array() for p in peds]).reshape(m, 2),
            np.array([p.acceleration.as_array() for p in peds]).reshape(m, 2),
            np.array([p.destination.as_array() for p in peds]).reshape(m, 2),
            hist, valid)

    def replace(self, **changes) -> CrowdState:
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return CrowdState(**fields)

    def subset(self, mask) -> CrowdState:
        mask = np.asarray(mask)
        return CrowdState(self.time_index, self.dt, self.ids[mask], self.positions[mask],
                          self.velocities[mask], self.accelerations[mask],
                          self.destinations[mask], self.history[mask], self.history_valid[mask])


def integrate_step(state: CrowdState, accel) -> CrowdState:
    """Advance one frame: ``v' = v + a dt`` and ``p' = p + v dt`` with the pre-update ``v``."""
    a = np.asarray(accel, dtype=np.float64)
    if a.shape != (state.n_pedestrians, 2):
        raise ContractError(
            f"integrate_step: {state.n_pedestrians} pedestrians but acceleration shape {a.shape}")
    dt = state.dt
    p_new = state.positions + state.velocities * dt
    v_new = state.velocities + a * dt
    frame = np.concatenate([p_new, v_new, a], axis=1)
    hist = np.concatenate([state.history[:, 1:], frame[:, None, :]], axis=1)
    valid = np.minimum(state.history_valid + 1, state.history_length)
    return CrowdState(state.time_index + 1, dt, state.ids, p_new, v_new, a,
                      state.destinations, hist, valid)


class TrajectorySet:
    """Per-pedestrian position sequences on an integer frame lattice.

    ``dt`` is the time between consecutive frame indices, in seconds.
    """

    def __init__(self, tracks: Mapping[int, tuple] | None = None, dt: float = DEFAULT_DT):
        if not dt > 0:
            raise ContractError(f"frame interval must be positive, got {dt}")
        self.dt = float(dt)
        self._tracks: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for pid, (frames, positions) in (tracks or {}).items():
            self.add(pid, frames, positions)

    def add(self, pid: int, frames, positions) -> None:
        frames = np.asarray(frames, dtype=np.int64).reshape(-1)
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if len(frames) != len(positions):
            raise ContractError(f"pedestrian {pid}: {len(frames)} frames vs {len(positions)} positions")
        if np.any(np.diff(frames) <= 0):
            raise ContractError(f"pedestrian {pid}: frames must be strictly increasing")
        if not np.all(np.isfinite(positions)):
            raise ContractError(f"pedestrian {pid}: positions must be finite")
        frames.setflags(write=False)
        positions.setflags(write=False)
        self._tracks[int(pid)] = (frames, positions)

    def __len__(self) -> int:
        return len(self._tracks)

    def __iter__(self):
        return iter(self._tracks)

    def __contains__(self, pid) -> bool:
        return pid in self._tracks

    def __getitem__(self, pid: int) -> tuple[np.ndarray, np.ndarray]:
        return self._tracks[pid]

    def items(self):
        return self._tracks.items()

    @property
    def ids(self) -> list[int]:
        return sorted(self._tracks)

    @property
    def n_samples(self) -> int:
        return int(np.sum([len(f) for f, _ in self._tracks.values()], dtype=np.int64))

    def frame_range(self) -> tuple[int, int]:
        if not self._tracks:
            raise ContractError("empty trajectory set has no frame range")
        return (min(int(f[0]) for f, _ in self._tracks.values()),
                max(int(f[-1]) for f, _ in self._tracks.values()))

    def frames(self) -> np.ndarray:
        if not self._tracks:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([f for f, _ in self._tracks.values()]))

    def at_frame(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Ids and positions of pedestrians present at ``frame`` (ids ascending)."""
        ids, pos = [], []
        for pid in self.ids:
            frames, positions = self._tracks[pid]
            k = np.searchsorted(frames, frame)
            if k < len(frames) and frames[k] == frame:
                ids.append(pid)
                pos.append(positions[k])
        return np.array(ids, dtype=np.int64), np.array(pos, dtype=np.float64).reshape(-1, 2)

    def to_rows(self) -> np.ndarray:
        """``(n, 4)`` array of ``frame, id, x, y`` sorted by frame then id."""
        rows = [np.column_stack([f, np.full(len(f), pid), p]) for pid, (f, p) in self._tracks.items()]
        if not rows:
            return np.zeros((0, 4))
        table = np.concatenate(rows).astype(np.float64)
        order = np.lexsort((table[:, 1], table[:, 0]))
        return table[order]

    def restrict(self, pids: Iterable[int] | None = None, first: int | None = None,
                 last: int | None = None) -> TrajectorySet:
        out = TrajectorySet(dt=self.dt)
        for pid in (self.ids if pids is None else pids):
            if pid not in self._tracks:
                continue
            f, p = self._tracks[pid]
            keep = np.ones(len(f), bool)
            if first is not None:
                keep &= f >= first
            if last is not None:
                keep &= f <= last
            if keep.any():
                out.add(pid, f[keep], p[keep])
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectorySet):
            return NotImplemented
        return (self.dt == other.dt and self.ids == other.ids and all(
            np.array_equal(self[k][0], other[k][0]) and np.array_equal(self[k][1], other[k][1])
            for k in self.ids))

    def __repr__(self) -> str:
        return f"TrajectorySet({len(self)} pedestrians, {self.n_samples} samples, dt={self.dt})"


@dataclass(frozen=True)
class Kinematics:
    frames: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray


def velocities_from_positions(traj: TrajectorySet, *, warn: bool = True
                              ) -> tuple[dict[int, Kinematics], list[str]]:
    """Forward-difference velocities and accelerations per pedestrian.

    ``v[t] = (p[t+1] - p[t]) / dt`` and ``a[t] = (v[t+1] - v[t]) / dt``; the last
    frame copies the previous frame's derivatives. Pedestrians with fewer than
    three frames are skipped and reported in the returned warning list.
    """
    out: dict[int, Kinematics] = {}
    skipped: list[str] = []
    for pid in traj.ids:
        frames, pos = traj[pid]
        if len(frames) < 3:
            skipped.append(f"pedestrian {pid}: {len(frames)} frames (<3), skipped")
            continue
        step = np.diff(frames).astype(np.float64)[:, None] * traj.dt
        v = np.empty_like(pos)
        v[:-1] = (pos[1:] - pos[:-1]) / step
        v[-1] = v[-2]
        a = np.empty_like(pos)
        a[:-1] = (v[1:] - v[:-1]) / step
        a[-1] = a[-2]
        out[pid] = Kinematics(frames, pos, v, a)
    if warn:
        for msg in skipped:
            warnings.warn(msg, stacklevel=2)
    return out, skipped
