"""Fixed-step integration of the density field, one step per frame."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, SolverError

METHODS = ("euler", "rk4", "discrete")

DerivativeProvider = Callable[[int, ad.Tensor], ad.Tensor]


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    horizon: int = 10
    step: int = 1
    # inert for fixed-step methods; kept so configs carry the reference tolerances
    rtol: float = 1e-4
    atol: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}; choose from {METHODS}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.step != 1:
            raise ConfigError("only unit (one frame) steps are supported")


@dataclass
class DensityRollout:
    densities: list[ad.Tensor]
    floor_events: int = 0
    floor_per_frame: list[int] = field(default_factory=list)

    def numpy(self) -> np.ndarray:
        return np.array([d.value for d in self.densities])


def clamp_density(rho):
    """Floor negative cells at zero; returns ``(rho', n_floored)``."""
    t = ad.as_tensor(rho)
    n_floor = int(np.count_nonzero(t.value < 0))
    if n_floor == 0:
        return rho, 0
    out = ad.relu(t)
    return (out if isinstance(rho, ad.Tensor) else out.value), n_floor


def _residual_update(rho: ad.Tensor, rate: ad.Tensor, dt: float = 1.0) -> ad.Tensor:
    # dt == 1.0 so the product is exact and matches the plain Euler add bit for bit
    return rho + rate * dt


def _rk4(provider: DerivativeProvider, t: int, rho: ad.Tensor) -> ad.Tensor:
    k1 = ad.as_tensor(provider(t, rho))
    k2 = ad.as_tensor(provider(t, rho + k1 * 0.5))
    k3 = ad.as_tensor(provider(t, rho + k2 * 0.5))
    k4 = ad.as_tensor(provider(t, rho + k3))
    return rho + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (1.0 / 6.0)


def rollout_density(rho0, provider: DerivativeProvider, config: SolverConfig = SolverConfig(),
                    clamp: bool = True) -> DensityRollout:
    """Integrate ``drho/dt = provider(t, rho)`` for ``config.horizon`` frames.

    ``rk4`` evaluates its intermediate stages with the same frame index, since
    no observations exist between frames.
    """
    rho = ad.as_tensor(rho0)
    out = DensityRollout([])
    for t in range(config.horizon):
        if config.method == "euler":
            rho = rho + ad.as_tensor(provider(t, rho))
        elif config.method == "discrete":
            rho = _residual_update(rho, ad.as_tensor(provider(t, rho)))
        else:
            rho = _rk4(provider, t, rho)
        if not np.all(np.isfinite(rho.value)):
            raise SolverError("non-finite density", frame=t + 1)
        n_floor = 0
        if clamp:
            rho, n_floor = clamp_density(rho)
        out.floor_per_frame.append(n_floor)
        out.floor_events += n_floor
        out.densities.append(rho)
    return out


def write_density_sequence(path, rollout: DensityRollout | np.ndarray, header: dict | None = None) -> None:
    from .density import write_density_csv

    fields = rollout.numpy() if isinstance(rollout, DensityRollout) else rollout
    write_density_csv(path, fields, header)
