"""Circular-specification Social Force Model used as a reference simulator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import CrowdState, Scene
from .errors import ConfigError


@dataclass(frozen=True)
class SfmParams:
    relaxation_time: float = 0.5    # s
    repulsion_strength: float = 2.1  # m/s^2
    repulsion_range: float = 0.3     # m
    desired_speed: float = 1.2       # m/s
    obstacle_strength: float = 5.0
    obstacle_range: float = 0.1
    seed: int = 0

    def __post_init__(self):
        values = asdict(self)
        values.pop("seed")
        bad = [k for k, v in values.items() if not v > 0]
        if bad:
            raise ConfigError(f"social force parameters must be positive: {bad}")


def _pair_direction(seed: int, i: int, j: int) -> np.ndarray:
    rng = np.random.default_rng((seed, min(i, j), max(i, j)))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    n = np.array([np.cos(angle), np.sin(angle)])
    return n if i < j else -n


def sfm_step(state: CrowdState, scene: Scene | None = None, params: SfmParams = SfmParams()) -> np.ndarray:
    """Accelerations from goal driving, pairwise and obstacle exponential repulsion."""
    p, v, d = state.positions, state.velocities, state.destinations
    m = len(p)
    to_goal = d - p
    dist_goal = np.linalg.norm(to_goal, axis=1, keepdims=True)
    e = np.where(dist_goal > 1e-9, to_goal / np.where(dist_goal > 1e-9, dist_goal, 1.0), 0.0)
    accel = (params.desired_speed * e - v) / params.relaxation_time

    if m > 1:
        diff = p[:, None, :] - p[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        with np.errstate(invalid="ignore", divide="ignore"):
            normal = diff / dist[..., None]
        coincident = np.argwhere(dist == 0.0)
        for i, j in coincident:
            normal[i, j] = _pair_direction(params.seed, int(state.ids[i]), int(state.ids[j]))
        mag = params.repulsion_strength * np.exp(-dist / params.repulsion_range)
        mag = np.minimum(mag, params.repulsion_strength)
        np.fill_diagonal(mag, 0.0)
        normal[np.arange(m), np.arange(m)] = 0.0
        accel = accel + (mag[..., None] * normal).sum(axis=1)

    if scene is not None and len(scene.obstacles) and m:
        diff = p[:, None, :] - scene.obstacles[None]
        dist = np.linalg.norm(diff, axis=-1)
        safe = np.where(dist > 0, dist, 1.0)
        normal = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        mag = params.obstacle_strength * np.exp(-dist / params.obstacle_range)
        accel = accel + (mag[..., None] * normal).sum(axis=1)
    return accel


class SocialForceModel:
    """Acceleration model wrapper usable by the rollout loop."""

    def __init__(self, params: SfmParams = SfmParams()):
        self.params = params

    def accelerations(self, state: CrowdState, scene: Scene | None = None) -> np.ndarray:
        return sfm_step(state, scene, self.params)
