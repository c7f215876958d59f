import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crowdflow import CrowdSimulator, SocialForceSimulator
from crowdflow.core import CrowdState, TrajectorySet
from crowdflow.errors import ContractError, DataError
from crowdflow.simulate import state_from_trajectories
from crowdflow.training import TrainConfig

TINY = dict(epochs=2, nx=4, ny=4, hidden=8, node_embed=4, embed_dim=4, h=4, tau=4, seed=1)


@pytest.fixture(scope="module")
def fitted(small_crossing):
    traj, scene, dest = small_crossing
    return CrowdSimulator(**TINY).fit(traj, scene=scene, destinations=dest), small_crossing


def test_params_mirror_train_config():
    est = CrowdSimulator(variant="no-ode", lambda1=0.5)
    params = est.get_params()
    assert set(params) == set(TrainConfig().to_dict())
    assert est.train_config() == TrainConfig(variant="no-ode", lambda1=0.5)
    twin = clone(est).set_params(epochs=3)
    assert twin.epochs == 3 and twin.variant == "no-ode" and est.epochs == 200


def test_fit_predict_score(fitted):
    est, (traj, scene, dest) = fitted
    assert len(est.loss_report_.epochs) == 2 and est.n_parameters_ > 0
    assert len(est.train_episodes_) + len(est.test_episodes_) == 9
    state = state_from_trajectories(traj, 10, h=4, destinations=dest)
    pred = est.predict(state)
    assert isinstance(pred, TrajectorySet) and pred.frame_range() == (11, 14)
    assert len(est.predict(state, horizon=2).frame_range()) == 2
    score = est.score()
    assert score < 0 and score == est.score(est.test_episodes_)


def test_unfitted_and_bad_inputs(small_crossing):
    traj, scene, dest = small_crossing
    with pytest.raises(NotFittedError):
        CrowdSimulator().predict(CrowdState.from_arrays([[0.0, 0.0]], [[1.0, 0.0]]))
    with pytest.raises(ContractError):
        CrowdSimulator(**TINY).fit(np.zeros((4, 2)))
    with pytest.raises(DataError):
        CrowdSimulator(**TINY).fit(TrajectorySet())
    short = traj.restrict(traj.ids, 0, 9)
    with pytest.raises(DataError):
        CrowdSimulator(**TINY).fit(short, scene=scene)


def test_save_load_round_trip(fitted, tmp_path):
    est, (traj, scene, dest) = fitted
    path = tmp_path / "model.json"
    est.save(path)
    back = CrowdSimulator.load(path)
    assert back.get_params() == est.get_params()
    state = state_from_trajectories(traj, 12, h=4, destinations=dest)
    a, b = est.predict(state), back.predict(state)
    for pid in a.ids:
        np.testing.assert_array_equal(a[pid][1], b[pid][1])


def test_fit_without_scene(small_crossing):
    traj, _, _ = small_crossing
    est = CrowdSimulator(**{**TINY, "epochs": 1}).fit(traj)
    lo, hi = est.scene_.bounds[:2], est.scene_.bounds[2:]
    allpts = np.concatenate([p for _, (_, p) in traj.items()])
    assert np.all(allpts.min(0) >= lo) and np.all(allpts.max(0) <= hi)


def test_social_force_simulator(small_crossing):
    traj, scene, dest = small_crossing
    sfm = SocialForceSimulator(horizon=6).fit(scene=scene)
    state = state_from_trajectories(traj, 10, h=8, destinations=dest)
    pred = sfm.predict(state)
    assert pred.frame_range() == (11, 16)
    assert clone(sfm).get_params()["horizon"] == 6
    with pytest.raises(ContractError):
        sfm.predict("not a state")
