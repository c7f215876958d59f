"""Joint velocity + density training of the predictor and the flux parameters."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .core import Scene
from .data import Episode
from .density import Grid, cross_grid_mask, density_from_positions, js_divergence, soft_assign
from .dvcg import DynamicGraph, NodeEmbedding, build_dynamic_graph, density_derivative, expand_weights
from .errors import ConfigError, ContractError, TrainingError
from .ode import SolverConfig, rollout_density
from .predictor import PredictorConfig, PredictorModel

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-ode", "no-cgd", "no-nnloss", "no-ne", "trans", "rk4", "discrete")


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 200
    tau: int = 10
    h: int = 8
    stride: int | None = None
    split_ratio: float = 0.8
    beta: float | None = None          # None: 2 / cell area
    alpha: float = 50.0
    tau_mask: float = 0.05
    nx: int = 10
    ny: int = 10
    embed_dim: int = 16
    seed: int = 0
    solver: str = "euler"
    variant: str = "full"
    loss_norm: str = "mse"
    batch_size: int = 1
    clamp_density: bool = True
    hidden: int = 64
    node_embed: int = 32
    n_layers: int = 2
    radius: float = 4.0
    k_max: int = 8
    output_init: str = "zero"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ConfigError("lambda1 and lambda2 cannot both be zero")
        if self.loss_norm not in ("mse", "mae"):
            raise ConfigError(f"loss_norm must be 'mse' or 'mae', got {self.loss_norm!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("epochs/batch_size/learning_rate out of range")
        SolverConfig(self.solver, self.tau)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> TrainConfig:
        """Apply the ablation variant's switches to the base settings."""
        v = self.variant
        if v == "no-ode":
            return replace(self, lambda2=0.0)
        if v == "no-nnloss":
            return replace(self, lambda1=0.0)
        if v in ("rk4", "discrete"):
            return replace(self, solver=v)
        return self

    @property
    def uses_ode(self) -> bool:
        return self.resolved().lambda2 > 0

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(history=self.h, hidden=self.hidden, embed=self.node_embed,
                               n_layers=self.n_layers, radius=self.radius, k_max=self.k_max,
                               output_init=self.output_init)


class LossTerms(NamedTuple):
    joint: ad.Tensor
    nn: ad.Tensor
    ode: ad.Tensor


def _error(diff: ad.Tensor, norm: str) -> ad.Tensor:
    if norm == "mse":
        return ad.mean(diff * diff)
    return ad.mean(ad.absolute(diff))


def joint_loss(pred_velocities, gt_velocities, pred_densities, gt_densities,
               lambda1: float = 1.0, lambda2: float = 1.0, norm: str = "mse") -> LossTerms:
    """``lambda1 * err(v) + lambda2 * err(rho)`` over aligned frame sequences.

    Sequences are lists (one entry per frame) or stacked arrays. Density
    sequences may be ``None`` when ``lambda2`` is zero.
    """
    if len(pred_velocities) != len(gt_velocities):
        raise ContractError(f"joint_loss: {len(pred_velocities)} predicted vs "
                            f"{len(gt_velocities)} true velocity frames")
    pv = ad.stack(list(pred_velocities)) if isinstance(pred_velocities, list) else ad.as_tensor(pred_velocities)
    gv = ad.stack(list(gt_velocities)) if isinstance(gt_velocities, list) else ad.as_tensor(gt_velocities)
    if pv.shape != gv.shape:
        raise ContractError(f"joint_loss: velocity shapes {pv.shape} vs {gv.shape}")
    l_nn = _error(pv - gv, norm) if pv.size else ad.Tensor(0.0)
    if pred_densities is None or gt_densities is None:
        if lambda2 != 0:
            raise ContractError("joint_loss: density sequences required when lambda2 > 0")
        l_ode = ad.Tensor(0.0)
    else:
        if len(pred_densities) != len(gt_densities):
            raise ContractError(f"joint_loss: {len(pred_densities)} predicted vs "
                                f"{len(gt_densities)} true density frames")
        pr = ad.stack(list(pred_densities)) if isinstance(pred_densities, list) else ad.as_tensor(pred_densities)
        gr = ad.stack(list(gt_densities)) if isinstance(gt_densities, list) else ad.as_tensor(gt_densities)
        l_ode = _error(pr - gr, norm)
    return LossTerms(l_nn * lambda1 + l_ode * lambda2, l_nn, l_ode)


class Adam:
    """Adaptive moment optimizer (decay rates 0.9 / 0.999, eps 1e-8)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self, store: ad.ParameterStore, grads: dict[str, np.ndarray]) -> None:
        optimizer_step(store, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


def optimizer_step(store: ad.ParameterStore, grads: dict[str, np.ndarray], state: dict, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    state["t"] = t = state.get("t", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        param = store[name]
        if g.shape != param.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter {param.shape}")
        m = m_all.get(name)
        v = v_all.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        param.value = param.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class FluxModel:
    """Learnable edge weights/biases for the density derivative, per variant."""

    def __init__(self, store: ad.ParameterStore, grid: Grid, config: TrainConfig,
                 rng: np.random.Generator | None = None):
        self.grid = grid
        self.variant = config.variant
        self.store = store
        rng = np.random.default_rng(config.seed + 1) if rng is None else rng
        n, d = grid.n_cells, config.embed_dim
        w_scale = float(np.sqrt(0.1 / d))
        w0 = rng.normal(0.0, w_scale, size=(n, d))
        b0 = rng.normal(0.0, 0.01, size=(n, d))
        if self.variant == "no-ne":
            self.W = store.add("dvcg.W", w0 @ w0.T)
            self.B = store.add("dvcg.B", b0 @ b0.T)
            self.embedding = None
        else:
            self.embedding = NodeEmbedding(store.add("dvcg.w", w0), store.add("dvcg.b", b0))
        self.logits = store.add("dvcg.logits", np.zeros((n, n))) if self.variant == "trans" else None

    def matrices(self) -> tuple[ad.Tensor, ad.Tensor]:
        if self.embedding is None:
            return self.W, self.B
        return expand_weights(self.embedding)

    def static_graph(self, velocities, masks, active=None) -> DynamicGraph:
        """Learned static adjacency with population-mean speed and gate."""
        n = self.grid.n_cells
        off = 1.0 - np.eye(n)
        adjacency = ad.sigmoid(self.logits) * off
        vel = ad.as_tensor(velocities)
        gates = ad.as_tensor(masks)
        if active is not None:
            idx = np.flatnonzero(active)
            vel, gates = ad.take_rows(vel, idx), ad.take_rows(gates, idx)
        if vel.shape[0] == 0:
            return DynamicGraph(adjacency, ad.Tensor(np.zeros((n, n))), ad.Tensor(np.zeros((n, n))))
        from .dvcg import pedestrian_speeds
        mean_speed = ad.mean(pedestrian_speeds(vel))
        mean_gate = ad.mean(gates)
        return DynamicGraph(adjacency, adjacency * mean_speed, mean_gate * off)

    def graph(self, p0, p1, velocities, masks) -> DynamicGraph:
        if self.variant == "trans":
            return self.static_graph(velocities, masks)
        return build_dynamic_graph(self.grid, p0, p1, velocities, masks)


@dataclass
class EpisodeResult:
    terms: LossTerms
    floor_events: int
    pred_densities: list = field(default_factory=list)


class _GroundTruthSide:
    """Parameter-free quantities of one episode, computed once."""

    def __init__(self, episode: Episode, grid: Grid, beta: float, config: TrainConfig):
        k0 = episode.h - 1
        cols = np.flatnonzero(episode.active)
        self.cols = cols
        self.states = [episode.state_at(k0 + t) for t in range(episode.tau)]
        P = episode.positions[:, cols]
        V = episode.velocities[:, cols]
        self.gt_velocities = [V[k0 + t + 1] for t in range(episode.tau)]
        self.next_positions = [P[k0 + t] + V[k0 + t] * episode.dt for t in range(episode.tau)]
        self.rho0 = density_from_positions(grid, P[k0], beta)
        self.gt_densities = [density_from_positions(grid, P[k0 + t + 1], beta)
                             for t in range(episode.tau)]
        self.rho_next_pred = [density_from_positions(grid, p, beta) for p in self.next_positions]
        self.q_next = [soft_assign(grid, p, beta) for p in self.next_positions]
        self.graphs_t = []
        for t in range(episode.tau):
            p0 = P[k0 + t]
            if config.variant == "no-cgd":
                masks = np.ones(len(cols))
            else:
                q0 = soft_assign(grid, p0, beta)
                masks = np.atleast_1d(cross_grid_mask(js_divergence(q0, self.q_next[t]),
                                                      config.alpha, config.tau_mask))
            self.graphs_t.append((p0, self.next_positions[t], V[k0 + t], masks))


class Trainer:
    """Runs the joint training loop over episodes."""

    def __init__(self, config: TrainConfig, scene: Scene, model: PredictorModel | None = None):
        self.config = config
        self.effective = config.resolved()
        self.scene = scene
        self.grid = Grid.over(scene, config.nx, config.ny)
        self.beta = config.beta if config.beta is not None else self.grid.default_beta()
        self.model = model if model is not None else PredictorModel(
            config.predictor_config(), seed=config.seed)
        self.store = self.model.store
        self.flux = FluxModel(self.store, self.grid, config)
        self.optimizer = Adam(config.learning_rate)
        self.solver = SolverConfig(self.effective.solver, config.tau)
        self.report = LossReport()
        self._gt_cache: dict[int, _GroundTruthSide] = {}

    def _ground_truth(self, episode: Episode) -> _GroundTruthSide:
        key = id(episode)
        if key not in self._gt_cache:
            self._gt_cache[key] = _GroundTruthSide(episode, self.grid, self.beta, self.config)
        return self._gt_cache[key]

    def episode_loss(self, episode: Episode, episode_index: int | None = None) -> EpisodeResult:
        """Forward pass of one episode: predict, detect crossings, flux, step."""
        cfg = self.effective
        gt = self._ground_truth(episode)
        dt = episode.dt
        pred_v = []
        providers = []
        W = B = None
        if cfg.lambda2 > 0:
            W, B = self.flux.matrices()
        for t, state in enumerate(gt.states):
            accel = self.model.forward(state, self.scene)
            v_hat = accel * dt + state.velocities
            if not np.all(np.isfinite(v_hat.value)):
                raise TrainingError("non-finite prediction", episode=episode_index, frame=t)
            pred_v.append(v_hat)
            if cfg.lambda2 == 0:
                continue
            p0, p_next, v_obs, masks_t = gt.graphs_t[t]
            graph_t = self.flux.graph(p0, p_next, v_obs, masks_t)
            p_after = v_hat * dt + p_next
            if self.config.variant == "no-cgd":
                masks_n = ad.Tensor(np.ones(len(gt.cols)))
            else:
                q_after = soft_assign(self.grid, p_after, self.beta)
                masks_n = cross_grid_mask(js_divergence(ad.Tensor(gt.q_next[t]), q_after),
                                          self.config.alpha, self.config.tau_mask)
            graph_n = self.flux.graph(p_next, p_after, v_hat, masks_n)
            rho_next = gt.rho_next_pred[t]
            providers.append(
                lambda rho, g0=graph_t, g1=graph_n, rn=rho_next:
                density_derivative(g0, g1, rho, rn, W, B).rate)
        floor_events = 0
        pred_rho = None
        if cfg.lambda2 > 0:
            rollout = rollout_density(gt.rho0, lambda t, rho: providers[t](rho), self.solver,
                                      clamp=self.config.clamp_density)
            pred_rho = rollout.densities
            floor_events = rollout.floor_events
        terms = joint_loss(pred_v, gt.gt_velocities, pred_rho,
                           gt.gt_densities if pred_rho is not None else None,
                           cfg.lambda1, cfg.lambda2, self.config.loss_norm)
        if not math.isfinite(terms.joint.item()):
            raise TrainingError("non-finite loss", episode=episode_index, frame=len(gt.states) - 1)
        return EpisodeResult(terms, floor_events, pred_rho or [])

    def train_epoch(self, episodes: list[Episode], epoch: int = 0) -> EpochStats:
        rng = np.random.default_rng((self.config.seed, epoch))
        order = rng.permutation(len(episodes))
        sums = np.zeros(3)
        grad_norms = []
        floors = 0
        batch: list[dict] = []
        for pos, idx in enumerate(order):
            with ad.Tape() as tape:
                res = self.episode_loss(episodes[idx], int(idx))
            grads = tape.backward(res.terms.joint, self.store)
            sums += [res.terms.nn.item(), res.terms.ode.item(), res.terms.joint.item()]
            floors += res.floor_events
            batch.append(grads)
            if len(batch) == self.config.batch_size or pos == len(order) - 1:
                merged = {k: sum(g[k] for g in batch) / len(batch) for k in batch[0]}
                grad_norms.append(float(np.sqrt(sum(float((g * g).sum()) for g in merged.values()))))
                self.optimizer.step(self.store, merged)
                batch = []
        n = max(len(episodes), 1)
        mean_norm = float(np.mean(grad_norms)) if grad_norms else 0.0
        stats = EpochStats(epoch, *map(float, sums / n), mean_norm, floors)
        self.report.epochs.append(stats)
        return stats

    def fit(self, episodes: list[Episode], epochs: int | None = None, callback=None) -> LossReport:
        if not episodes:
            raise ContractError("no training episodes")
        start = len(self.report.epochs)
        for e in range(start, start + (self.config.epochs if epochs is None else epochs)):
            stats = self.train_epoch(episodes, e)
            log.debug("epoch %d: l_nn=%.6g l_ode=%.6g l_joint=%.6g", e, stats.l_nn, stats.l_ode,
                      stats.l_joint)
            if callback is not None:
                callback(stats)
        return self.report

    def evaluate_loss(self, episodes: list[Episode]) -> EpochStats:
        sums = np.zeros(3)
        floors = 0
        for idx, ep in enumerate(episodes):
            res = self.episode_loss(ep, idx)
            sums += [res.terms.nn.item(), res.terms.ode.item(), res.terms.joint.item()]
            floors += res.floor_events
        n = max(len(episodes), 1)
        return EpochStats(-1, *map(float, sums / n), 0.0, floors)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_nn: float
    l_ode: float
    l_joint: float
    grad_norm: float
    floor_events: int


@dataclass
class LossReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def l_joint(self) -> list[float]:
        return [e.l_joint for e in self.epochs]

    @property
    def l_nn(self) -> list[float]:
        return [e.l_nn for e in self.epochs]

    @property
    def l_ode(self) -> list[float]:
        return [e.l_ode for e in self.epochs]

    def write_csv(self, path, header: dict | None = None) -> None:
        """One row per epoch; ``header`` is echoed as a leading ``#`` JSON comment."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header is not None:
                fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_nn", "l_ode", "l_joint", "grad_norm", "floor_events"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.l_nn), repr(e.l_ode), repr(e.l_joint),
                                 repr(e.grad_norm), e.floor_events])


def train_epoch(trainer: Trainer, episodes: list[Episode], epoch: int | None = None) -> EpochStats:
    """One pass over ``episodes`` with an optimizer step per batch."""
    return trainer.train_epoch(episodes, len(trainer.report.epochs) if epoch is None else epoch)
