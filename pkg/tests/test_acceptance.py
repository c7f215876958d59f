"""Acceptance suite: one test per criterion, each recording a PASS/FAIL summary line."""
import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from crowdflow import autodiff as ad
from crowdflow import data, density, dvcg, metrics, ode, simulate, training
from crowdflow.core import CrowdState, Scene, TrajectorySet
from crowdflow.estimator import load_checkpoint, save_checkpoint
from crowdflow.predictor import PredictorConfig, PredictorModel, predict_next

from conftest import record


# 1 ------------------------------------------------------------------------

def test_c1_mass_conservation():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        nx, ny = rng.integers(1, 21, size=2)
        k = int(rng.integers(0, 51))
        beta = float(rng.uniform(0.1, 100.0))
        lo = rng.uniform(-20, 0, size=2)
        hi = lo + rng.uniform(0.5, 30, size=2)
        grid = density.Grid((lo[0], lo[1], hi[0], hi[1]), int(nx), int(ny))
        # include points outside the grid as well
        pts = rng.uniform(lo - 2.0, hi + 2.0, size=(k, 2))
        rho = density.density_from_positions(grid, pts, beta)
        worst = max(worst, abs(rho.sum() - k))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5.0
    record(1, ok, f"max |sum(rho) - K| = {worst:.2e} over 1000 configs, {elapsed:.2f} s")
    assert worst < 1e-9
    assert elapsed < 5.0


# 2 ------------------------------------------------------------------------

def _grad_fixture():
    traj, scene, dest = data.synth_scenario(
        data.ScenarioSpec("crossing", 4, speed=3.0, duration=18, seed=4, noise=0.01))
    cfg = training.TrainConfig(h=2, tau=2, nx=3, ny=3, hidden=4, node_embed=4, embed_dim=4,
                               output_init="random", seed=5)
    episodes = data.make_episodes(traj, scene, h=2, tau=2, destinations=dest)
    grid = density.Grid.over(scene, 3, 3)

    def crossings(ep):
        c = grid.cell_of(ep.positions.reshape(-1, 2)).reshape(ep.positions.shape[:2])
        return int((np.diff(c[1:], axis=0) != 0).sum())

    episode = max(episodes, key=crossings)
    return cfg, scene, grid, episode


def test_c2_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    grid = density.Grid((0.0, 0.0, 3.0, 3.0), 3, 3)
    beta = grid.default_beta()
    errors = {}

    # (a) soft density w.r.t. positions
    wts = rng.normal(size=grid.n_cells)
    errors["ddm"] = max(
        ad.grad_check(lambda p: ad.sum(density.density_from_positions(grid, p, beta) * wts),
                      rng.uniform(0, 3, size=(5, 2)))
        for _ in range(5))

    # (b) crossing gate through JS and the clipped sigmoid
    def gate_of(p1, p0):
        q0 = density.soft_assign(grid, ad.Tensor(p0), beta)
        q1 = density.soft_assign(grid, p1, beta)
        return ad.sum(density.cross_grid_mask(density.js_divergence(q0, q1)) * rng_w)

    cgd = 0.0
    for _ in range(5):
        p0 = rng.uniform(0, 3, size=(5, 2))
        rng_w = rng.normal(size=5)
        cgd = max(cgd, ad.grad_check(lambda p: gate_of(p, p0), p0 + rng.normal(0, 0.3, size=(5, 2))))
    errors["cgd"] = cgd

    # (c) density derivative w.r.t. w, b, velocities and both densities
    n, dim, k = grid.n_cells, 4, 6
    p0 = rng.uniform(0, 3, size=(k, 2))
    p1 = p0 + rng.normal(0, 0.8, size=(k, 2))
    p2 = p1 + rng.normal(0, 0.8, size=(k, 2))
    vel = rng.normal(size=(k, 2))
    masks = rng.uniform(0.01, 0.99, size=k)
    w0 = rng.normal(0, 0.3, size=(n, dim))
    b0 = rng.normal(0, 0.3, size=(n, dim))
    rho_t = density.density_from_positions(grid, p0, beta)
    rho_n = density.density_from_positions(grid, p1, beta)
    out_w = rng.normal(size=n)

    def flux(w=w0, b=b0, v=vel, r0=rho_t, r1=rho_n):
        w, b = ad.as_tensor(w), ad.as_tensor(b)
        W, B = w @ w.T, b @ b.T
        g_t = dvcg.build_dynamic_graph(grid, p0, p1, v, masks)
        g_n = dvcg.build_dynamic_graph(grid, p1, p2, v, masks)
        return ad.sum(dvcg.density_derivative(g_t, g_n, r0, r1, W, B).rate * out_w)

    errors["flux_w"] = ad.grad_check(lambda x: flux(w=x), w0)
    errors["flux_b"] = ad.grad_check(lambda x: flux(b=x), b0)
    errors["flux_speed"] = ad.grad_check(lambda x: flux(v=x), vel)
    errors["flux_rho_t"] = ad.grad_check(lambda x: flux(r0=x), rho_t)
    errors["flux_rho_next"] = ad.grad_check(lambda x: flux(r1=x), rho_n)
    module_worst = max(errors.values())

    # (d) the full joint loss w.r.t. every parameter
    cfg, scene, _, episode = _grad_fixture()
    trainer = training.Trainer(cfg, scene)
    loss_errors = ad.check_parameter_gradients(lambda: trainer.episode_loss(episode).terms.joint,
                                               trainer.store)
    loss_worst = max(loss_errors.values())
    elapsed = time.perf_counter() - t0
    ok = module_worst < 1e-5 and loss_worst < 1e-4 and elapsed < 60.0
    record(2, ok, f"module max rel err {module_worst:.1e}, l_joint max rel err {loss_worst:.1e} "
                  f"over {len(loss_errors)} parameters, {elapsed:.1f} s")
    assert module_worst < 1e-5, errors
    assert loss_worst < 1e-4, loss_errors
    assert elapsed < 60.0


# 3 ------------------------------------------------------------------------

def test_c3_js_and_mask_contracts():
    rng = np.random.default_rng(303)
    q = rng.dirichlet(np.ones(9), size=2000)
    r = rng.dirichlet(np.ones(9) * 0.2, size=2000)
    self_js = np.abs(density.js_divergence(q, q)).max()
    # disjoint supports hit the ln 2 ceiling
    a = np.zeros((1, 4)); a[0, :2] = 0.5
    b = np.zeros((1, 4)); b[0, 2:] = 0.5
    js = np.concatenate([density.js_divergence(q, r), density.js_divergence(a, b)])
    sym = np.array_equal(density.js_divergence(q, r), density.js_divergence(r, q))
    upper = js.max() <= np.log(2) + 1e-12
    x = np.concatenate([rng.uniform(-5, 5, 50000), rng.normal(0.05, 0.1, 50000)])
    m = density.cross_grid_mask(x)
    in_range = m.min() >= 0.01 and m.max() <= 0.99
    ok = self_js <= 1e-12 and upper and sym and in_range and js.min() >= 0
    record(3, ok, f"J(q,q) <= {self_js:.1e}, max J = {js.max():.6f} (ln2 = {np.log(2):.6f}), "
                  f"symmetric={sym}, mask in [{m.min()}, {m.max()}] on 1e5 inputs")
    assert self_js <= 1e-12
    assert upper and sym and in_range


# 4 ------------------------------------------------------------------------

def test_c4_euler_discrete_bit_identical():
    rng = np.random.default_rng(404)
    mismatches = 0
    for trial in range(100):
        n = int(rng.integers(1, 30))
        horizon = int(rng.integers(1, 15))
        A = rng.normal(0, 0.3, size=(horizon, n, n))
        c = rng.normal(0, 0.5, size=(horizon, n))
        kind = trial % 3

        def provider(t, rho, A=A, c=c, kind=kind):
            if kind == 0:
                return rho @ A[t] + c[t]
            if kind == 1:
                return ad.sigmoid(rho @ A[t]) * c[t] - rho * 0.1
            return ad.exp(-(rho * rho)) * c[t]

        rho0 = rng.uniform(0, 3, size=n)
        e = ode.rollout_density(rho0, provider, ode.SolverConfig("euler", horizon)).numpy()
        d = ode.rollout_density(rho0, provider, ode.SolverConfig("discrete", horizon)).numpy()
        mismatches += not np.array_equal(e, d)
    record(4, mismatches == 0, f"{100 - mismatches}/100 random providers bit-identical")
    assert mismatches == 0


# 5 ------------------------------------------------------------------------

def _exact_ot(P, Q):
    C = ((P[:, None] - Q[None]) ** 2).sum(-1)
    n = len(P)
    return min(C[np.arange(n), list(perm)].sum() for perm in itertools.permutations(range(n))) / n


def _brute_dtw(a, b):
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    best = np.inf

    def walk(i, j, acc):
        nonlocal best
        acc = acc + float(np.sqrt(((a[i] - b[j]) ** 2).sum()))
        if i == len(a) - 1 and j == len(b) - 1:
            best = min(best, acc)
            return
        if i + 1 < len(a):
            walk(i + 1, j, acc)
        if j + 1 < len(b):
            walk(i, j + 1, acc)
        if i + 1 < len(a) and j + 1 < len(b):
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def test_c5_metric_oracles():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst_ot = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 6))
        P = rng.uniform(-3, 3, size=(n, 2))
        Q = rng.uniform(-3, 3, size=(n, 2))
        exact = _exact_ot(P, Q)
        for got in (metrics.ot_sinkhorn(P, Q), metrics.ot_sinkhorn(Q, P)):
            worst_ot = max(worst_ot, abs(got - exact) / max(exact, 1e-12))
    dtw_mismatch = 0
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        dim = int(rng.integers(1, 3))
        a = rng.normal(size=(n, dim))
        b = rng.normal(size=(m, dim))
        dtw_mismatch += metrics.dtw(a, b) != _brute_dtw(a, b)
    elapsed = time.perf_counter() - t0
    ok = worst_ot <= 0.05 and dtw_mismatch == 0 and elapsed < 30.0
    record(5, ok, f"OT worst rel err {worst_ot:.2e} (200 trials, both argument orders), DTW mismatches {dtw_mismatch}/200, "
                  f"{elapsed:.1f} s")
    assert worst_ot <= 0.05
    assert dtw_mismatch == 0
    assert elapsed < 30.0


# 6 ------------------------------------------------------------------------

def _pair(n_close, total=60, gap=0.4):
    traj = TrajectorySet(dt=0.08)
    frames = np.arange(total)
    a = np.column_stack([np.zeros(total), np.zeros(total)])
    b = np.column_stack([np.full(total, 3.0), np.zeros(total)])
    b[10:10 + n_close, 0] = gap
    traj.add(0, frames, a)
    traj.add(1, frames, b)
    return traj


def test_c6_collision_semantics():
    apart = metrics.collision_count(_pair(0))
    ten = metrics.collision_count(_pair(10))
    friends = metrics.collision_count(_pair(30))
    ok = (apart, ten, friends) == (0, 10, 0)
    record(6, ok, f"apart={apart}, 10-frame contact={ten}, 30-frame friends={friends} (expect 0/10/0)")
    assert (apart, ten, friends) == (0, 10, 0)


# 7 ------------------------------------------------------------------------

def _random_state(rng, m=10, h=8):
    hist = np.zeros((m, h, 6))
    pos = rng.uniform(-3, 3, size=(m, 2))
    vel = rng.normal(0, 1, size=(m, 2))
    for k in range(h):
        back = h - 1 - k
        hist[:, k, 0:2] = pos - back * 0.08 * vel + rng.normal(0, 0.02, size=(m, 2))
        hist[:, k, 2:4] = vel + rng.normal(0, 0.1, size=(m, 2))
        hist[:, k, 4:6] = rng.normal(0, 0.5, size=(m, 2))
    return CrowdState(0, 0.08, np.arange(m), pos, vel, hist[:, -1, 4:6],
                      rng.uniform(-6, 6, size=(m, 2)), hist, np.full(m, h))


def _transform(state, R, t):
    hist = state.history.copy()
    hist[..., 0:2] = hist[..., 0:2] @ R.T + t
    hist[..., 2:4] = hist[..., 2:4] @ R.T
    hist[..., 4:6] = hist[..., 4:6] @ R.T
    return state.replace(positions=state.positions @ R.T + t, velocities=state.velocities @ R.T,
                         accelerations=state.accelerations @ R.T,
                         destinations=state.destinations @ R.T + t, history=hist)


def test_c7_equivariance():
    rng = np.random.default_rng(707)
    model = PredictorModel(PredictorConfig(hidden=32, embed=16, output_init="random"), seed=3)
    state = _random_state(rng)
    base = predict_next(model, state)
    worst = 0.0
    for _ in range(100):
        theta = rng.uniform(0, 2 * np.pi)
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        t = rng.uniform(-50, 50, size=2)
        moved = predict_next(model, _transform(state, R, t))
        worst = max(worst, np.abs(moved - base @ R.T).max())
    ok = worst < 1e-9 and np.abs(base).max() > 1e-3
    record(7, ok, f"max |f(Rx+t) - R f(x)| = {worst:.1e} over 100 rigid motions "
                  f"(|f| up to {np.abs(base).max():.2f})")
    assert np.abs(base).max() > 1e-3
    assert worst < 1e-9


# 8 ------------------------------------------------------------------------

def _efficacy(seed):
    traj, scene, dest = data.synth_scenario(data.ScenarioSpec("crossing", 20, duration=150, seed=seed))
    episodes = data.make_episodes(traj, scene, h=8, tau=10, destinations=dest)
    train, test = data.split(episodes, 0.8)
    out = {}
    for variant in ("full", "no-ode"):
        trainer = training.Trainer(training.TrainConfig(seed=seed, variant=variant, epochs=200), scene)
        report = trainer.fit(train)
        out[variant] = (report.l_joint, simulate.rollout_mae(trainer.model, test, scene))
    return out


@pytest.mark.slow
def test_c8_training_efficacy():
    t0 = time.perf_counter()
    res = _efficacy(7)
    losses, mae_full = res["full"]
    mae_no_ode = res["no-ode"][1]
    drop = 1.0 - losses[-1] / losses[0]
    a_ok = drop >= 0.5
    b_ok = mae_full <= mae_no_ode
    detail = (f"seed 7: l_joint {losses[0]:.4g} -> {losses[-1]:.4g} (drop {drop:.1%}); rollout MAE "
              f"full {mae_full:.4f} vs no-ode {mae_no_ode:.4f}")
    if not b_ok:
        # a single-seed failure is re-run on two more seeds before counting as a regression
        wins = 1 if b_ok else 0
        for seed in (8, 9):
            r = _efficacy(seed)
            wins += r["full"][1] <= r["no-ode"][1]
            detail += f"; seed {seed}: {r['full'][1]:.4f} vs {r['no-ode'][1]:.4f}"
        b_ok = wins >= 2
    elapsed = time.perf_counter() - t0
    record(8, a_ok and b_ok and elapsed < 900, f"{detail}; {elapsed / 60:.1f} min")
    assert a_ok, detail
    assert b_ok, detail
    assert elapsed < 900


# 9 ------------------------------------------------------------------------

def test_c9_accumulated_error_slope():
    gt = TrajectorySet(dt=0.08)
    pred = TrajectorySet(dt=0.08)
    frames = np.arange(50)
    rng = np.random.default_rng(909)
    for pid in range(5):
        base = rng.uniform(-5, 5, size=2) + np.outer(frames * 0.08, rng.normal(size=2))
        gt.add(pid, frames, base)
        drift = base.copy()
        drift[:, 0] += 0.01 * frames
        pred.add(pid, frames, drift)
    f, values = simulate.accumulated_error_curve(pred, gt, "mae")
    slope = np.polyfit(f.astype(float), values, 1)[0]
    step_slopes = np.diff(values) / np.diff(f)
    worst = max(abs(slope - 0.01), np.abs(step_slopes - 0.01).max())
    record(9, worst < 1e-9, f"fitted slope {slope:.12f}, max deviation {worst:.1e}")
    assert worst < 1e-9


# 10 -----------------------------------------------------------------------

def test_c10_persistence_and_cli(tmp_path):
    # checkpoint round trip
    traj, scene, dest = data.synth_scenario(data.ScenarioSpec("crossing", 10, duration=60, seed=2))
    episodes = data.make_episodes(traj, scene, h=8, tau=10, destinations=dest)
    trainer = training.Trainer(training.TrainConfig(seed=2, epochs=2), scene)
    trainer.fit(episodes[:3])
    path = tmp_path / "model.json"
    save_checkpoint(path, trainer)
    loaded, _ = load_checkpoint(path)
    initial = episodes[-1].state_at(7)
    a = simulate.autoregressive_rollout(trainer.model, initial, scene, 30)
    b = simulate.autoregressive_rollout(loaded.model, initial, scene, 30)
    same = a == b and all(np.array_equal(a[p][1], b[p][1]) for p in a.ids)

    # full CLI pipeline
    t0 = time.perf_counter()
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"epochs": 50, "seed": 7}')

    def run(*args):
        return subprocess.run([sys.executable, "-m", "crowdflow.cli", *args], cwd=tmp_path,
                              capture_output=True, text=True)

    steps = [
        ("synth", "--scenario", "crossing", "--peds", "20", "--frames", "150", "--seed", "7",
         "--out", "crowd.txt"),
        ("train", "--config", "cfg.json", "--data", "crowd.txt", "--scene", "crowd.scene.json",
         "--out", "model.json"),
        ("simulate", "--model", "model.json", "--init", "crowd.txt", "--scene", "crowd.scene.json",
         "--horizon", "10", "--frame", "120", "--out", "sim.txt"),
        ("evaluate", "--pred", "sim.txt", "--gt", "crowd.txt", "--restrict", "--out", "report.json",
         "--curve", "curve.csv"),
    ]
    codes = []
    for step in steps:
        proc = run(*step)
        codes.append(proc.returncode)
        assert proc.returncode == 0, proc.stderr
    elapsed = time.perf_counter() - t0
    ok = same and codes == [0, 0, 0, 0] and elapsed < 600
    record(10, ok, f"reload rollout bit-identical={same}; CLI synth/train(50)/simulate/evaluate exit "
                   f"codes {codes} in {elapsed:.0f} s")
    assert same
    assert elapsed < 600
