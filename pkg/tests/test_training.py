import csv

import numpy as np
import pytest

from crowdflow import autodiff as ad
from crowdflow import data
from crowdflow.errors import ConfigError, ContractError, TrainingError
from crowdflow.training import (VARIANTS, Adam, TrainConfig, Trainer, joint_loss, optimizer_step,
                                train_epoch)

TINY = dict(nx=4, ny=4, hidden=8, node_embed=4, embed_dim=4, tau=4, h=4, output_init="random")


@pytest.fixture(scope="module")
def episodes(small_crossing):
    traj, scene, dest = small_crossing
    eps = data.make_episodes(traj, scene, h=4, tau=4, destinations=dest)
    return scene, eps[:3]


def test_joint_loss_examples():
    v = [np.ones((3, 2)), np.zeros((3, 2))]
    rho = [np.full(4, 0.25)] * 2
    assert joint_loss(v, v, rho, rho).joint.item() == 0.0
    pv = [np.array([[0.2]])]
    terms = joint_loss(pv, [np.array([[0.0]])], [np.zeros(4)], [np.zeros(4)])
    assert terms.joint.item() == pytest.approx(0.04, abs=1e-15)
    pure = joint_loss(pv, [np.array([[0.0]])], [np.ones(4)], [np.zeros(4)], 1.0, 0.0)
    assert pure.joint.item() == pure.nn.item() and pure.ode.item() == 1.0
    mae = joint_loss([np.array([[-0.2]])], [np.array([[0.0]])], None, None, 1.0, 0.0, norm="mae")
    assert mae.joint.item() == pytest.approx(0.2)


def test_joint_loss_contracts():
    with pytest.raises(ContractError):
        joint_loss([np.zeros(2)] * 2, [np.zeros(2)] * 3, None, None, 1.0, 0.0)
    with pytest.raises(ContractError):
        joint_loss([np.zeros(2)], [np.zeros(2)], [np.zeros(3)] * 2, [np.zeros(3)], 1.0, 1.0)
    with pytest.raises(ContractError):
        joint_loss([np.zeros(2)], [np.zeros(2)], None, None, 1.0, 1.0)


def test_config_guards():
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=0.0, lambda2=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda1=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(variant="transformer")
    with pytest.raises(ConfigError):
        TrainConfig(solver="dopri5")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lambda3": 1.0})
    cfg = TrainConfig(variant="rk4")
    assert cfg.resolved().solver == "rk4" and TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert not TrainConfig(variant="no-ode").uses_ode


def test_adam_zero_gradient_keeps_parameters():
    store = ad.ParameterStore()
    store.add("x", np.array([1.0, -2.0]))
    Adam(0.1).step(store, {"x": np.zeros(2)})
    np.testing.assert_array_equal(store["x"].value, [1.0, -2.0])


def test_adam_first_step_is_signed_learning_rate():
    store = ad.ParameterStore()
    store.add("x", np.zeros(3))
    g = np.array([3.0, -0.01, 250.0])
    optimizer_step(store, {"x": g}, {}, lr=0.01)
    # step 1: m/c1 = g, v/c2 = g^2, so the update is lr * g / (|g| + eps)
    np.testing.assert_allclose(store["x"].value, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-15)
    np.testing.assert_allclose(store["x"].value, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_constant_gradient_update_approaches_lr():
    store = ad.ParameterStore()
    store.add("x", np.zeros(1))
    opt = Adam(1e-3)
    prev = 0.0
    for _ in range(500):
        opt.step(store, {"x": np.array([0.7])})
        step, prev = prev - store["x"].value[0], store["x"].value[0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_shape_contract():
    store = ad.ParameterStore()
    store.add("x", np.zeros(3))
    with pytest.raises(ContractError):
        optimizer_step(store, {"x": np.zeros(2)}, {}, 0.1)


def test_loss_decomposition_every_epoch(episodes):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(lambda1=0.7, lambda2=2.5, **TINY), scene)
    trainer.fit(eps, epochs=3)
    for e in trainer.report.epochs:
        assert abs(e.l_joint - (0.7 * e.l_nn + 2.5 * e.l_ode)) < 1e-12
        assert e.l_ode > 0 and e.grad_norm > 0


def test_frozen_parameters_repeat_the_report(episodes):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(learning_rate=0.0, **TINY), scene)
    a = train_epoch(trainer, eps)
    b = train_epoch(trainer, eps)
    assert (a.epoch, b.epoch) == (0, 1)
    for field in ("l_nn", "l_ode", "l_joint", "grad_norm"):
        assert getattr(b, field) == pytest.approx(getattr(a, field), rel=1e-13)


def test_seed_determinism(episodes):
    scene, eps = episodes
    runs = [Trainer(TrainConfig(seed=5, **TINY), scene).fit(eps, epochs=2).epochs for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_reduces_loss(episodes):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(learning_rate=3e-3, **TINY), scene)
    report = trainer.fit(eps, epochs=8)
    assert report.l_joint[-1] < report.l_joint[0]


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_trains(episodes, variant):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(variant=variant, **TINY), scene)
    stats = trainer.train_epoch(eps)
    assert np.isfinite([stats.l_nn, stats.l_ode, stats.l_joint]).all()
    names = trainer.store.names()
    if variant == "no-ode":
        assert stats.l_ode == 0.0 and stats.l_joint == stats.l_nn
    if variant == "no-nnloss":
        assert stats.l_joint == stats.l_ode
    assert ("dvcg.W" in names) == (variant == "no-ne")
    assert ("dvcg.logits" in names) == (variant == "trans")


def test_discrete_variant_matches_full_bit_for_bit(episodes):
    scene, eps = episodes
    full = Trainer(TrainConfig(variant="full", **TINY), scene).fit(eps, epochs=2).epochs
    disc = Trainer(TrainConfig(variant="discrete", **TINY), scene).fit(eps, epochs=2).epochs
    assert full == disc


def test_rk4_differs_from_euler(small_crossing):
    traj, scene, dest = small_crossing
    eps = data.make_episodes(traj, scene, h=4, tau=4, destinations=dest)
    euler = Trainer(TrainConfig(**TINY), scene).evaluate_loss(eps)
    rk4 = Trainer(TrainConfig(variant="rk4", **TINY), scene).evaluate_loss(eps)
    assert euler.l_nn == rk4.l_nn and euler.l_ode != rk4.l_ode


def test_no_cgd_opens_every_gate(episodes):
    scene, eps = episodes
    full = Trainer(TrainConfig(**TINY), scene).evaluate_loss(eps)
    open_ = Trainer(TrainConfig(variant="no-cgd", **TINY), scene).evaluate_loss(eps)
    assert full.l_ode != open_.l_ode


def test_batches_accumulate_gradients(episodes):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(batch_size=2, **TINY), scene)
    trainer.train_epoch(eps)
    assert trainer.optimizer.state["t"] == 2


def test_non_finite_prediction_is_reported(episodes, monkeypatch):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(**TINY), scene)
    monkeypatch.setattr(trainer.model, "forward",
                        lambda state, scene=None: ad.Tensor(np.full((state.n_pedestrians, 2), np.nan)))
    with pytest.raises(TrainingError) as info:
        trainer.episode_loss(eps[1], 1)
    assert info.value.episode == 1 and info.value.frame == 0


def test_fit_requires_episodes(episodes):
    scene, _ = episodes
    with pytest.raises(ContractError):
        Trainer(TrainConfig(**TINY), scene).fit([])


def test_training_log_csv(episodes, tmp_path):
    scene, eps = episodes
    trainer = Trainer(TrainConfig(**TINY), scene)
    trainer.fit(eps, epochs=2)
    path = tmp_path / "log.csv"
    trainer.report.write_csv(path, {"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == '# {"seed": 0}'
    rows = list(csv.DictReader(lines[1:]))
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert float(rows[1]["l_joint"]) == trainer.report.l_joint[1]
