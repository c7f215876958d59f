"""Crowd trajectory simulation with a density-flux training constraint."""
__version__ = "0.1.0"

from .baseline import SfmParams, SocialForceModel, sfm_step
from .core import DEFAULT_DT, DEFAULT_HISTORY, CrowdState, PedestrianState, Scene, TrajectorySet, Vec2
from .data import Episode, ScenarioSpec, make_episodes, resample_cubic, split, synth_scenario
from .density import Grid, cross_grid_mask, density_from_positions, js_divergence, soft_assign
from .errors import (ConfigError, ContractError, CrowdflowError, DataError, ParseError, RolloutError,
                     SolverError, TrainingError, UndefinedMetricError)
from .estimator import CrowdSimulator, SocialForceSimulator, load_checkpoint, save_checkpoint
from .metrics import MetricReport, collision_count, dea, dtw, evaluate, fde, mae, mmd_gaussian, ot_sinkhorn
from .predictor import PredictorConfig, PredictorModel, predict_next
from .simulate import accumulated_error_curve, autoregressive_rollout, rollout_mae
from .training import TrainConfig, Trainer
