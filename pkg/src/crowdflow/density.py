"""Spatial grid, soft position-to-cell assignment and cross-cell detection.

All functions accept either numpy arrays or :class:`~crowdflow.autodiff.Tensor`
inputs. Tensor in, tensor out (differentiable); array in, array out.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import Scene
from .errors import ContractError

DEFAULT_ALPHA = 50.0
DEFAULT_TAU_MASK = 0.05
MASK_FLOOR = 0.01
MASK_CEIL = 0.99


@dataclass(frozen=True)
class Grid:
    """Regular ``nx`` x ``ny`` grid over ``bounds``; cell ``iy * nx + ix``."""

    bounds: tuple[float, float, float, float]
    nx: int
    ny: int

    def __post_init__(self):
        xmin, ymin, xmax, ymax = (float(b) for b in self.bounds)
        if not (xmax > xmin and ymax > ymin):
            raise ContractError(f"grid bounds must have positive area, got {self.bounds}")
        if self.nx < 1 or self.ny < 1:
            raise ContractError(f"grid needs at least one cell per axis, got {self.nx}x{self.ny}")
        object.__setattr__(self, "bounds", (xmin, ymin, xmax, ymax))
        dx = (xmax - xmin) / self.nx
        dy = (ymax - ymin) / self.ny
        xs = xmin + dx * (np.arange(self.nx) + 0.5)
        ys = ymin + dy * (np.arange(self.ny) + 0.5)
        gx, gy = np.meshgrid(xs, ys)
        centers = np.column_stack([gx.ravel(), gy.ravel()])
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)

    @classmethod
    def over(cls, scene: Scene, nx: int = 10, ny: int = 10) -> Grid:
        return cls(scene.bounds, nx, ny)

    @property
    def centers(self) -> np.ndarray:
        return self._centers

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_size(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.bounds
        return (xmax - xmin) / self.nx, (ymax - ymin) / self.ny

    @property
    def cell_diagonal(self) -> float:
        return math.hypot(*self.cell_size)

    def default_beta(self) -> float:
        dx, dy = self.cell_size
        return 2.0 / (dx * dy)

    def cell_of(self, positions) -> np.ndarray:
        """Index of the nearest center (the hard assignment)."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        d2 = ((p[:, None, :] - self._centers[None]) ** 2).sum(-1)
        return d2.argmin(axis=1)

    def __eq__(self, other):
        return (isinstance(other, Grid) and self.bounds == other.bounds
                and self.nx == other.nx and self.ny == other.ny)

    def __hash__(self):
        return hash((self.bounds, self.nx, self.ny))


def _soft_assign_tensor(grid: Grid, positions: ad.Tensor, beta: float) -> ad.Tensor:
    k = positions.shape[0]
    diff = ad.reshape(positions, (k, 1, 2)) - grid.centers[None]
    logits = ad.squared_norm(diff, axis=-1) * (-beta)
    return ad.softmax(logits, axis=1)


def soft_assign(grid: Grid, positions, beta: float):
    """Softmax over negative scaled squared distances to every cell center.

    ``positions`` may be one point ``(2,)`` or a batch ``(K, 2)``; rows of the
    result sum to one.
    """
    if not beta > 0:
        raise ContractError(f"beta must be positive, got {beta}")
    is_tensor = isinstance(positions, ad.Tensor)
    p = positions if is_tensor else ad.Tensor(positions)
    single = p.ndim == 1
    if single:
        p = ad.reshape(p, (1, 2))
    if p.ndim != 2 or p.shape[1] != 2:
        raise ContractError(f"positions must be (K, 2), got {p.shape}")
    q = _soft_assign_tensor(grid, p, beta)
    if single:
        q = ad.reshape(q, (grid.n_cells,))
    return q if is_tensor else q.value


def density_from_positions(grid: Grid, positions, beta: float):
    """Density per cell: the sum of every pedestrian's assignment row."""
    is_tensor = isinstance(positions, ad.Tensor)
    p = positions if is_tensor else ad.Tensor(np.asarray(positions, dtype=np.float64).reshape(-1, 2))
    if p.shape[0] == 0:
        zero = np.zeros(grid.n_cells)
        return ad.Tensor(zero) if is_tensor else zero
    rho = ad.sum(soft_assign(grid, p, beta), axis=0)
    return rho if is_tensor else rho.value


def _js_op(q1: ad.Tensor, q2: ad.Tensor) -> ad.Tensor:
    a, b = q1.value, q2.value
    m = 0.5 * (a + b)
    tiny = np.finfo(np.float64).tiny
    safe_m = np.where(m > 0, m, 1.0)
    la = np.where(a > 0, np.log(np.maximum(a, tiny) / safe_m), 0.0)
    lb = np.where(b > 0, np.log(np.maximum(b, tiny) / safe_m), 0.0)
    kl_a = (a * la).sum(axis=-1)
    kl_b = (b * lb).sum(axis=-1)
    out = 0.5 * (kl_a + kl_b)

    def vjp(g):
        g = np.expand_dims(g, -1)
        return 0.5 * g * la, 0.5 * g * lb

    return ad.custom_op(out, (q1, q2), vjp, "js_divergence")


def js_divergence(q1, q2):
    """Jensen-Shannon divergence (natural log) between probability rows.

    Works on single vectors ``(N,)`` or row batches ``(K, N)``.
    """
    is_tensor = isinstance(q1, ad.Tensor) or isinstance(q2, ad.Tensor)
    t1, t2 = ad.as_tensor(q1), ad.as_tensor(q2)
    if t1.shape != t2.shape:
        raise ContractError(f"js_divergence: shape mismatch {t1.shape} vs {t2.shape}")
    if np.any(t1.value < 0) or np.any(t2.value < 0):
        raise ContractError("js_divergence: probability vectors must be nonnegative")
    out = _js_op(t1, t2)
    if is_tensor:
        return out
    return float(out.value) if out.ndim == 0 else out.value


def cross_grid_mask(js, alpha: float = DEFAULT_ALPHA, tau_mask: float = DEFAULT_TAU_MASK):
    """Gate in [0.01, 0.99]: ``clip(sigmoid(alpha * (J - tau_mask)))``."""
    is_tensor = isinstance(js, ad.Tensor)
    j = ad.as_tensor(js)
    m = ad.clip(ad.sigmoid((j - tau_mask) * alpha), MASK_FLOOR, MASK_CEIL)
    if is_tensor:
        return m
    return float(m.value) if m.ndim == 0 else m.value


def write_density_csv(path, fields, header: dict | None = None) -> None:
    """One line per frame, ``nx * ny`` row-major values."""
    fields = np.atleast_2d(np.asarray(fields, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            for key, value in header.items():
                fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh)
        for row in fields:
            writer.writerow([repr(float(x)) for x in row])


def read_density_csv(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([float(x) for x in line.strip().split(",")])
    return np.array(rows)
