"""Cell-transition graphs and the inflow/outflow density derivative.

Pedestrian ``k`` moving from cell ``j`` (nearest center at the earlier frame)
to cell ``i != j`` contributes an edge ``j -> i``. The edge carries the mean
speed and the max crossing gate over its contributors. Flux into a cell is
driven by the current density of the source cell; flux out of a cell is
driven by the predicted next-frame density of that cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .density import Grid
from .errors import ContractError

SPEED_EPS = 1e-12


@dataclass
class NodeEmbedding:
    """Per-cell factors; the dense edge matrices are ``w w^T`` and ``b b^T``."""

    w: ad.Tensor
    b: ad.Tensor

    def __post_init__(self):
        if self.w.shape != self.b.shape or self.w.ndim != 2:
            raise ContractError(f"embedding shapes differ: w {self.w.shape}, b {self.b.shape}")

    @property
    def n_cells(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def create(cls, store: ad.ParameterStore, n_cells: int, dim: int = 16,
               rng: np.random.Generator | None = None, w_scale: float | None = None,
               b_scale: float = 0.01, prefix: str = "dvcg") -> NodeEmbedding:
        rng = np.random.default_rng(0) if rng is None else rng
        if w_scale is None:
            w_scale = float(np.sqrt(0.1 / dim))
        w = store.add(f"{prefix}.w", rng.normal(0.0, w_scale, size=(n_cells, dim)))
        b = store.add(f"{prefix}.b", rng.normal(0.0, b_scale, size=(n_cells, dim)))
        return cls(w, b)


def expand_weights(emb: NodeEmbedding) -> tuple[ad.Tensor, ad.Tensor]:
    """Edge weight and bias matrices ``W = w w^T``, ``B = b b^T``."""
    return emb.w @ emb.w.T, emb.b @ emb.b.T


@dataclass
class DynamicGraph:
    """Directed cell graph for one frame transition.

    ``adjacency`` is 0/1 (a numpy array) for trajectory-derived graphs; the
    static-attention variant passes a soft tensor instead. ``speed`` and
    ``gate`` are ``(N, N)`` and vanish off the adjacency support.
    """

    adjacency: np.ndarray | ad.Tensor
    speed: ad.Tensor
    gate: ad.Tensor
    contributors: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.speed.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.contributors)

    @classmethod
    def empty(cls, n_cells: int) -> DynamicGraph:
        z = np.zeros((n_cells, n_cells))
        return cls(z.copy(), ad.Tensor(z.copy()), ad.Tensor(z.copy()), {})

    def to_edge_list(self, ids=None) -> list[dict]:
        edges = []
        for (j, i), members in sorted(self.contributors.items()):
            who = [int(ids[k]) for k in members] if ids is not None else [int(k) for k in members]
            edges.append({"from": int(j), "to": int(i), "speed": float(self.speed.value[j, i]),
                          "gate": float(self.gate.value[j, i]), "contributors": who})
        return edges

    def to_json(self, ids=None) -> str:
        return json.dumps(self.to_edge_list(ids), indent=1)


def pedestrian_speeds(velocities) -> ad.Tensor:
    v = ad.as_tensor(velocities)
    return ad.sqrt(ad.squared_norm(v, axis=-1) + SPEED_EPS)


def build_dynamic_graph(grid: Grid, positions_t, positions_next, velocities, masks,
                        beta: float | None = None, active=None) -> DynamicGraph:
    """Graph of cell transitions ``positions_t -> positions_next``.

    Cell membership is the hard nearest-center assignment (the argmax of the
    soft assignment at any ``beta``), treated as a constant for gradients.
    Speeds (``|v_k|``) and gates (``masks[k]``) stay differentiable.
    """
    p0 = np.asarray(ad.as_tensor(positions_t).value).reshape(-1, 2)
    p1 = np.asarray(ad.as_tensor(positions_next).value).reshape(-1, 2)
    k = len(p0)
    if len(p1) != k:
        raise ContractError(f"build_dynamic_graph: {k} positions at t vs {len(p1)} at t+1")
    vel = ad.as_tensor(velocities)
    gates = ad.as_tensor(masks)
    if vel.shape != (k, 2) or gates.shape != (k,):
        raise ContractError(
            f"build_dynamic_graph: velocities {vel.shape} / masks {gates.shape} for {k} pedestrians")
    n = grid.n_cells
    if k == 0:
        return DynamicGraph.empty(n)
    src = grid.cell_of(p0)
    dst = grid.cell_of(p1)
    moving = src != dst
    if active is not None:
        moving &= np.asarray(active, dtype=bool)
    members = np.flatnonzero(moving)
    if members.size == 0:
        return DynamicGraph.empty(n)

    flat = src[members] * n + dst[members]
    edges, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    speeds = ad.take_rows(pedestrian_speeds(vel), members)
    speed_sum = ad.index_add(speeds, inverse, len(edges))
    mean_speed = speed_sum * (1.0 / counts)

    gate_vals = gates.value[members]
    winners = np.empty(len(edges), dtype=np.intp)
    for e in range(len(edges)):
        rows = np.flatnonzero(inverse == e)
        winners[e] = members[rows[np.argmax(gate_vals[rows])]]
    edge_gate = ad.take_rows(gates, winners)

    speed = ad.reshape(ad.index_add(mean_speed, edges, n * n), (n, n))
    gate = ad.reshape(ad.index_add(edge_gate, edges, n * n), (n, n))
    adjacency = np.zeros((n, n))
    adjacency.flat[edges] = 1.0
    contributors = {(int(e // n), int(e % n)): members[inverse == idx].tolist()
                    for idx, e in enumerate(edges)}
    return DynamicGraph(adjacency, speed, gate, contributors)


@dataclass
class FluxReport:
    g_in: ad.Tensor
    g_out: ad.Tensor
    rate: ad.Tensor

    def numpy(self) -> dict[str, np.ndarray]:
        return {"g_in": self.g_in.value, "g_out": self.g_out.value, "rate": self.rate.value}


def inflow(graph_t: DynamicGraph, rho_t, W, B) -> ad.Tensor:
    """``G_in[i] = sum_j gate_ji W_ji |V|_ji rho_t[j] + A_ji B_ji``."""
    flow = graph_t.gate * W * graph_t.speed
    bias = ad.sum(ad.as_tensor(graph_t.adjacency) * B, axis=0)
    return ad.as_tensor(rho_t) @ flow + bias


def outflow(graph_next: DynamicGraph, rho_next_pred, W, B) -> ad.Tensor:
    """``G_out[i] = rho_next[i] sum_k gate_ik W_ik |V|_ik + sum_k A_ik B_ik``."""
    rate = ad.sum(graph_next.gate * W * graph_next.speed, axis=1)
    bias = ad.sum(ad.as_tensor(graph_next.adjacency) * B, axis=1)
    return ad.as_tensor(rho_next_pred) * rate + bias


def density_derivative(graph_t: DynamicGraph, graph_next: DynamicGraph, rho_t, rho_next_pred,
                       W, B) -> FluxReport:
    """Density rate of change ``G_in - G_out`` on the cell graph."""
    n = graph_t.n_cells
    W, B = ad.as_tensor(W), ad.as_tensor(B)
    for name, t in (("rho_t", rho_t), ("rho_next_pred", rho_next_pred)):
        if ad.as_tensor(t).shape != (n,):
            raise ContractError(f"density_derivative: {name} shape {ad.as_tensor(t).shape} != ({n},)")
    for name, t in (("W", W), ("B", B), ("graph_next", graph_next.speed)):
        if t.shape != (n, n):
            raise ContractError(f"density_derivative: {name} shape {t.shape} != ({n}, {n})")
    g_in = inflow(graph_t, rho_t, W, B)
    g_out = outflow(graph_next, rho_next_pred, W, B)
    return FluxReport(g_in, g_out, g_in - g_out)
