import numpy as np
import pytest

from crowdflow import autodiff as ad
from crowdflow import ode
from crowdflow.errors import ConfigError, SolverError


def test_zero_derivative_keeps_density(rng):
    rho0 = rng.uniform(size=9)
    for method in ode.METHODS:
        out = ode.rollout_density(rho0, lambda t, r: ad.Tensor(np.zeros(9)), ode.SolverConfig(method, 6))
        assert len(out.densities) == 6
        for d in out.densities:
            np.testing.assert_array_equal(d.value, rho0)


def test_linear_decay_one_step():
    decay = lambda t, r: -r  # noqa: E731
    euler = ode.rollout_density(np.ones(1), decay, ode.SolverConfig("euler", 1)).numpy()
    rk4 = ode.rollout_density(np.ones(1), decay, ode.SolverConfig("rk4", 1)).numpy()
    assert euler[0, 0] == 0.0
    assert rk4[0, 0] == pytest.approx(1 - 1 + 0.5 - 1 / 6 + 1 / 24, abs=1e-15)


def test_rk4_reuses_frame_index():
    seen = []

    def provider(t, r):
        seen.append(t)
        return r * 0.0

    ode.rollout_density(np.ones(3), provider, ode.SolverConfig("rk4", 3))
    assert seen == [0] * 4 + [1] * 4 + [2] * 4


def test_first_frame_is_one_step(rng):
    rho0 = rng.uniform(1, 2, size=5)
    F = rng.normal(0, 0.1, size=5)
    out = ode.rollout_density(rho0, lambda t, r: ad.Tensor(F * (t + 1)), ode.SolverConfig("euler", 4))
    np.testing.assert_array_equal(out.densities[0].value, rho0 + F)


def test_clamp_examples():
    r, n = ode.clamp_density(np.array([0.5, -0.1]))
    np.testing.assert_array_equal(r, [0.5, 0.0])
    assert n == 1
    x = np.array([0.0, 1.0, 2.0])
    r, n = ode.clamp_density(x)
    assert n == 0 and r is x
    r, n = ode.clamp_density(-np.ones(7))
    assert n == 7 and not r.any()


def test_floor_events_reported():
    def drain(t, r):
        return ad.Tensor(np.array([0.0, -0.3 if t == 0 else 0.0]))

    out = ode.rollout_density(np.array([1.0, 0.1]), drain, ode.SolverConfig("euler", 3))
    assert out.floor_per_frame == [1, 0, 0] and out.floor_events == 1
    assert out.numpy().min() == 0.0
    raw = ode.rollout_density(np.array([1.0, 0.1]), drain, ode.SolverConfig("euler", 3), clamp=False)
    assert raw.floor_events == 0 and raw.numpy()[-1, 1] == pytest.approx(-0.2)


def test_rollouts_are_deterministic(rng):
    M = rng.normal(0, 0.2, size=(6, 6))
    rho0 = rng.uniform(size=6)
    for method in ode.METHODS:
        cfg = ode.SolverConfig(method, 8)
        a = ode.rollout_density(rho0, lambda t, r: r @ M, cfg).numpy()
        b = ode.rollout_density(rho0, lambda t, r: r @ M, cfg).numpy()
        np.testing.assert_array_equal(a, b)


def test_non_finite_density_names_frame():
    def provider(t, r):
        return ad.Tensor(np.full(2, np.inf if t == 2 else 0.0))

    with pytest.raises(SolverError) as info:
        ode.rollout_density(np.ones(2), provider, ode.SolverConfig("euler", 5))
    assert info.value.frame == 3


def test_solver_config_contract():
    with pytest.raises(ConfigError):
        ode.SolverConfig("dopri5")
    with pytest.raises(ConfigError):
        ode.SolverConfig("euler", 0)
    with pytest.raises(ConfigError):
        ode.SolverConfig("euler", 3, step=2)
    assert ode.SolverConfig().rtol == 1e-4


def test_gradient_through_rollout(rng):
    M = rng.normal(0, 0.3, size=(4, 4))
    w = rng.normal(size=4)

    def loss(rho0):
        out = ode.rollout_density(rho0, lambda t, r: r @ M, ode.SolverConfig("rk4", 3), clamp=False)
        return ad.sum(out.densities[-1] * w)

    assert ad.grad_check(loss, rng.uniform(1, 2, size=4)) < 1e-6


def test_density_sequence_csv(tmp_path, rng):
    out = ode.rollout_density(rng.uniform(size=4), lambda t, r: r * 0.1, ode.SolverConfig("euler", 3))
    path = tmp_path / "rho.csv"
    ode.write_density_sequence(path, out, {"method": "euler"})
    text = path.read_text()
    assert text.startswith("#") and "euler" in text.splitlines()[0]
