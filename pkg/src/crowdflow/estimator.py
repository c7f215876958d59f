"""scikit-learn style front end: fit on trajectories, predict rollouts."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .baseline import SfmParams, SocialForceModel
from .core import CrowdState, Scene, TrajectorySet
from .data import destinations_from, make_episodes, split
from .errors import ContractError, DataError
from .simulate import ARRIVAL_RADIUS, autoregressive_rollout, rollout_mae
from .training import TrainConfig, Trainer

CHECKPOINT_KIND = "crowdflow-model/1"


def check_trajectories(X) -> TrajectorySet:
    """Validate a training/evaluation input."""
    if not isinstance(X, TrajectorySet):
        raise ContractError(f"expected a TrajectorySet, got {type(X).__name__}")
    if len(X) == 0:
        raise DataError("trajectory set is empty")
    for pid, (_, pos) in X.items():
        if not np.all(np.isfinite(pos)):
            raise DataError(f"pedestrian {pid}: non-finite positions")
    return X


def check_state(X) -> CrowdState:
    if not isinstance(X, CrowdState):
        raise ContractError(f"expected a CrowdState, got {type(X).__name__}")
    return X


class CrowdSimulator(BaseEstimator):
    """Trains the predictor jointly with the density-flux constraint.

    Constructor arguments mirror :class:`TrainConfig` one-to-one, so
    ``get_params``/``set_params``/``clone`` behave as in scikit-learn.
    """

    def __init__(self, lambda1=1.0, lambda2=1.0, learning_rate=1e-3, epochs=200, tau=10, h=8,
                 stride=None, split_ratio=0.8, beta=None, alpha=50.0, tau_mask=0.05, nx=10, ny=10,
                 embed_dim=16, seed=0, solver="euler", variant="full", loss_norm="mse", batch_size=1,
                 clamp_density=True, hidden=64, node_embed=32, n_layers=2, radius=4.0, k_max=8,
                 output_init="zero"):
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.tau = tau
        self.h = h
        self.stride = stride
        self.split_ratio = split_ratio
        self.beta = beta
        self.alpha = alpha
        self.tau_mask = tau_mask
        self.nx = nx
        self.ny = ny
        self.embed_dim = embed_dim
        self.seed = seed
        self.solver = solver
        self.variant = variant
        self.loss_norm = loss_norm
        self.batch_size = batch_size
        self.clamp_density = clamp_density
        self.hidden = hidden
        self.node_embed = node_embed
        self.n_layers = n_layers
        self.radius = radius
        self.k_max = k_max
        self.output_init = output_init

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def fit(self, X, y=None, scene: Scene | None = None, destinations: dict | None = None):
        """Train on the first ``split_ratio`` of the episodes cut from ``X``."""
        X = check_trajectories(X)
        config = self.train_config()
        if scene is None:
            scene = Scene.enclosing(np.concatenate([p for _, (_, p) in X.items()]))
        episodes = make_episodes(X, scene, config.h, config.tau, config.stride, destinations)
        if len(episodes) < 2:
            raise DataError(f"need at least 2 episodes of {config.h + config.tau} frames, got {len(episodes)}")
        train, test = split(episodes, config.split_ratio)
        trainer = Trainer(config, scene)
        trainer.fit(train)
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.scene_ = scene
        self.destinations_ = destinations_from(X, destinations)
        self.loss_report_ = trainer.report
        self.train_episodes_ = train
        self.test_episodes_ = test
        self.n_parameters_ = trainer.model.n_parameters
        return self

    def predict(self, X, horizon: int | None = None, scene: Scene | None = None) -> TrajectorySet:
        """Autoregressive rollout from state ``X`` for ``horizon`` frames (default ``tau``)."""
        check_is_fitted(self, "model_")
        X = check_state(X)
        return autoregressive_rollout(self.model_, X, scene or self.scene_,
                                      self.tau if horizon is None else horizon, ARRIVAL_RADIUS)

    def score(self, X=None, y=None) -> float:
        """Negative rollout MAE over held-out episodes (higher is better).

        ``X`` may be a list of episodes; by default the test split from ``fit``.
        """
        check_is_fitted(self, "model_")
        episodes = self.test_episodes_ if X is None else X
        return -rollout_mae(self.model_, episodes, self.scene_)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.trainer_)

    @classmethod
    def load(cls, path) -> CrowdSimulator:
        trainer, _ = load_checkpoint(path)
        est = cls(**trainer.config.to_dict())
        est.trainer_ = trainer
        est.model_ = trainer.model
        est.scene_ = trainer.scene
        est.loss_report_ = trainer.report
        est.n_parameters_ = trainer.model.n_parameters
        return est


class SocialForceSimulator(BaseEstimator):
    """Hand-tuned reference model with the same predict interface; ``fit`` only records the scene."""

    def __init__(self, relaxation_time=0.5, repulsion_strength=2.1, repulsion_range=0.3,
                 desired_speed=1.2, obstacle_strength=5.0, obstacle_range=0.1, seed=0, horizon=10):
        self.relaxation_time = relaxation_time
        self.repulsion_strength = repulsion_strength
        self.repulsion_range = repulsion_range
        self.desired_speed = desired_speed
        self.obstacle_strength = obstacle_strength
        self.obstacle_range = obstacle_range
        self.seed = seed
        self.horizon = horizon

    def fit(self, X=None, y=None, scene: Scene | None = None):
        params = self.get_params()
        params.pop("horizon")
        self.model_ = SocialForceModel(SfmParams(**params))
        self.scene_ = scene
        return self

    def predict(self, X, horizon: int | None = None, scene: Scene | None = None) -> TrajectorySet:
        check_is_fitted(self, "model_")
        return autoregressive_rollout(self.model_, check_state(X), scene or self.scene_,
                                      self.horizon if horizon is None else horizon)


def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> None:
    """Parameters, training config and scene in one JSON file."""
    meta = {"kind": CHECKPOINT_KIND, "config": trainer.config.to_dict(),
            "scene": trainer.scene.to_dict(), "n_parameters": trainer.model.n_parameters}
    if extra:
        meta.update(extra)
    ad.save_parameters(path, trainer.store, meta)


def load_checkpoint(path) -> tuple[Trainer, dict]:
    store, meta = ad.load_parameters(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise DataError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    trainer = Trainer(TrainConfig.from_dict(meta["config"]), Scene.from_dict(meta["scene"]))
    if set(trainer.store.names()) != set(store.names()):
        raise DataError(f"{path}: parameter names do not match the stored config")
    trainer.store.assign(store.snapshot())
    return trainer, meta
