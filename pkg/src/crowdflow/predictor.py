"""Next-frame acceleration model built from equivariant graph convolution layers.

Node features are built only from rotation/reflection invariant quantities
(norms and dot products), and the geometric outputs are sums of the
destination direction and inter-node displacement vectors, so accelerations
rotate with the scene while the feature stream stays fixed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .core import CrowdState, Scene
from .errors import ContractError, TrainingError

DIST_EPS = 1e-6
_SQRT_GUARD = 1e-12


@dataclass(frozen=True)
class PredictorConfig:
    history: int = 8
    hidden: int = 64
    embed: int = 32
    n_layers: int = 2
    radius: float = 4.0
    k_max: int = 8
    output_init: str = "zero"     # "zero" | "random"
    use_obstacles: bool = True

    def __post_init__(self):
        if self.output_init not in ("zero", "random"):
            raise ContractError(f"output_init must be 'zero' or 'random', got {self.output_init!r}")
        if self.radius <= 0 or self.k_max < 1 or self.n_layers < 1 or self.history < 1:
            raise ContractError(f"invalid predictor config {self}")

    @property
    def n_features(self) -> int:
        return 6 * self.history + 4


class Perceptron:
    """Two-layer perceptron ``silu(x W1 + b1) W2 + b2``."""

    def __init__(self, store: ad.ParameterStore, name: str, n_in: int, n_hidden: int, n_out: int,
                 rng: np.random.Generator, zero_output: bool = False):
        self.name = name
        self.W1 = store.add(f"{name}.W1", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_hidden)))
        self.b1 = store.add(f"{name}.b1", np.zeros(n_hidden))
        w2 = np.zeros((n_hidden, n_out)) if zero_output else rng.normal(
            0.0, 1.0 / np.sqrt(n_hidden), (n_hidden, n_out))
        self.W2 = store.add(f"{name}.W2", w2)
        self.b2 = store.add(f"{name}.b2", np.zeros(n_out))

    def __call__(self, x) -> ad.Tensor:
        return ad.silu(x @ self.W1 + self.b1) @ self.W2 + self.b2


class EgclLayer:
    def __init__(self, store: ad.ParameterStore, name: str, embed: int, hidden: int,
                 rng: np.random.Generator, zero_output: bool):
        self.phi_e = Perceptron(store, f"{name}.phi_e", 2 * embed + 1, hidden, embed, rng)
        self.phi_p = Perceptron(store, f"{name}.phi_p", embed, hidden, 1, rng, zero_output)
        self.phi_h = Perceptron(store, f"{name}.phi_h", 2 * embed, hidden, embed, rng)
        self.phi_a = Perceptron(store, f"{name}.phi_a", embed, hidden, 1, rng, zero_output)


@dataclass(frozen=True)
class NeighborGraph:
    """Directed receiver/sender pairs; receivers are pedestrians only."""

    n_nodes: int
    receivers: np.ndarray
    senders: np.ndarray

    def neighbors(self, i: int) -> list[int]:
        return self.senders[self.receivers == i].tolist()

    @property
    def n_edges(self) -> int:
        return len(self.receivers)


def build_neighbor_graph(state: CrowdState | np.ndarray, radius: float = 4.0, k_max: int = 8,
                         obstacles: np.ndarray | None = None, ids=None) -> NeighborGraph:
    """Neighbors within ``radius``, nearest first, truncated at ``k_max``.

    Ties are broken by the lower pedestrian id. Obstacle points, when given,
    are appended as extra sender nodes after the pedestrians.
    """
    if not radius > 0:
        raise ContractError(f"radius must be positive, got {radius}")
    if isinstance(state, CrowdState):
        peds, ids = state.positions, state.ids
    else:
        peds = np.asarray(state, dtype=np.float64).reshape(-1, 2)
        ids = np.arange(len(peds)) if ids is None else np.asarray(ids)
    obs = np.zeros((0, 2)) if obstacles is None else np.asarray(obstacles, float).reshape(-1, 2)
    m = len(peds)
    nodes = np.concatenate([peds, obs])
    # obstacles rank after all pedestrians in tie-breaks
    rank_key = np.concatenate([np.argsort(np.argsort(ids)), m + np.arange(len(obs))])
    recv, send = [], []
    if m:
        d = np.sqrt(((peds[:, None, :] - nodes[None]) ** 2).sum(-1))
        for i in range(m):
            cand = np.flatnonzero(d[i] <= radius)
            cand = cand[cand != i]
            order = np.lexsort((rank_key[cand], d[i, cand]))
            chosen = cand[order][:k_max]
            recv.extend([i] * len(chosen))
            send.extend(chosen.tolist())
    return NeighborGraph(len(nodes), np.array(recv, dtype=np.intp), np.array(send, dtype=np.intp))


def destination_directions(positions: np.ndarray, destinations: np.ndarray) -> np.ndarray:
    delta = np.asarray(destinations, float) - np.asarray(positions, float)
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    return np.where(dist > 1e-9, delta / np.where(dist > 1e-9, dist, 1.0), 0.0)


def egcl_forward(layer: EgclLayer, h, p, v, graph: NeighborGraph, dest_dirs, layer_index: int = 0):
    """One message-passing update; returns ``(h', p', v', a')``.

    ``d_ij`` uses ``sqrt(|p_i - p_j|^2 + 1e-12) + 1e-6`` so coincident nodes
    keep a finite gradient.
    """
    h, p, v = ad.as_tensor(h), ad.as_tensor(p), ad.as_tensor(v)
    n = graph.n_nodes
    if h.shape[0] != n or p.shape != (n, 2) or v.shape != (n, 2):
        raise ContractError(f"egcl_forward: inconsistent shapes h{h.shape} p{p.shape} v{v.shape} "
                            f"for {n} nodes")
    gate = layer.phi_a(h)
    accel = gate * np.asarray(dest_dirs, dtype=np.float64)
    if graph.n_edges:
        recv, send = graph.receivers, graph.senders
        diff = ad.take_rows(p, recv) - ad.take_rows(p, send)
        d2 = ad.squared_norm(diff, axis=-1, keepdims=True)
        msg = layer.phi_e(ad.concat([ad.take_rows(h, recv), ad.take_rows(h, send), d2], axis=1))
        dist = ad.sqrt(d2 + _SQRT_GUARD) + DIST_EPS
        force = diff / dist * layer.phi_p(msg)
        accel = accel + ad.index_add(force, recv, n)
        agg = ad.index_add(msg, recv, n)
    else:
        agg = ad.Tensor(np.zeros((n, h.shape[1])))
    v_new = v + accel
    p_new = p + v_new
    h_new = layer.phi_h(ad.concat([h, agg], axis=1))
    for name, t in (("h", h_new), ("a", accel)):
        if not np.all(np.isfinite(t.value)):
            raise TrainingError(f"non-finite {name} activation", layer=layer_index)
    return h_new, p_new, v_new, accel


def history_features(state: CrowdState, h: int) -> np.ndarray:
    """Invariant per-pedestrian features: norms and dot products with the current velocity."""
    hist = state.history[:, -h:]
    if hist.shape[1] < h:
        hist = np.concatenate([np.repeat(hist[:, :1], h - hist.shape[1], axis=1), hist], axis=1)
    p_now = state.positions[:, None, :]
    v_now = state.velocities[:, None, :]
    rel = hist[..., 0:2] - p_now
    vel = hist[..., 2:4]
    acc = hist[..., 4:6]
    feats = [
        np.linalg.norm(rel, axis=-1), (rel * v_now).sum(-1),
        np.linalg.norm(vel, axis=-1), (vel * v_now).sum(-1),
        np.linalg.norm(acc, axis=-1), (acc * v_now).sum(-1),
    ]
    to_dest = state.destinations - state.positions
    dest_dist = np.linalg.norm(to_dest, axis=-1)
    dirs = destination_directions(state.positions, state.destinations)
    extra = np.column_stack([
        dest_dist, (dirs * state.velocities).sum(-1),
        np.linalg.norm(state.velocities, axis=-1), np.zeros(state.n_pedestrians)])
    return np.concatenate([np.stack(feats, axis=-1).reshape(state.n_pedestrians, -1), extra], axis=1)


class PredictorModel:
    """History encoder followed by a stack of equivariant graph layers.

    The readout is the net velocity change over all layers divided by ``dt``,
    i.e. an acceleration in m/s^2 for the external integrator.
    """

    def __init__(self, config: PredictorConfig = PredictorConfig(), store: ad.ParameterStore | None = None,
                 seed: int = 0):
        self.config = config
        self.store = ad.ParameterStore() if store is None else store
        rng = np.random.default_rng(seed)
        zero = config.output_init == "zero"
        self.encoder = Perceptron(self.store, "predictor.encoder", config.n_features,
                                  config.hidden, config.embed, rng)
        self.layers = [EgclLayer(self.store, f"predictor.egcl{l}", config.embed, config.hidden, rng, zero)
                       for l in range(config.n_layers)]

    @property
    def n_parameters(self) -> int:
        return int(sum(self.store[n].size for n in self.store if n.startswith("predictor.")))

    def node_inputs(self, state: CrowdState, scene: Scene | None = None):
        feats = history_features(state, self.config.history)
        pos, vel = state.positions, state.velocities
        dirs = destination_directions(state.positions, state.destinations)
        obstacles = None
        if self.config.use_obstacles and scene is not None and len(scene.obstacles):
            obstacles = scene.obstacles
            s = len(obstacles)
            obs_feats = np.zeros((s, feats.shape[1]))
            obs_feats[:, -1] = 1.0
            feats = np.concatenate([feats, obs_feats])
            pos = np.concatenate([pos, obstacles])
            vel = np.concatenate([vel, np.zeros((s, 2))])
            dirs = np.concatenate([dirs, np.zeros((s, 2))])
        graph = build_neighbor_graph(state, self.config.radius, self.config.k_max, obstacles)
        return feats, pos, vel, dirs, graph

    def forward(self, state: CrowdState, scene: Scene | None = None) -> ad.Tensor:
        """Accelerations ``(M, 2)`` as a tensor (differentiable under a tape)."""
        m = state.n_pedestrians
        if m == 0:
            return ad.Tensor(np.zeros((0, 2)))
        feats, pos, vel, dirs, graph = self.node_inputs(state, scene)
        h = self.encoder(feats)
        p = ad.Tensor(pos)
        v0 = ad.Tensor(vel)
        v = v0
        for idx, layer in enumerate(self.layers):
            h, p, v, _ = egcl_forward(layer, h, p, v, graph, dirs, idx)
        dv = v - v0
        if dv.shape[0] != m:
            dv = dv[:m]
        return dv * (1.0 / state.dt)

    def config_dict(self) -> dict:
        return asdict(self.config)


def predict_next(model: PredictorModel, state: CrowdState, scene: Scene | None = None) -> np.ndarray:
    """Per-pedestrian acceleration for the next frame (m/s^2)."""
    return model.forward(state, scene).value.copy()
