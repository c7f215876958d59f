"""Trajectory evaluation metrics: MAE, FDE, OT, MMD, DTW, collisions, DEA."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import TrajectorySet
from .errors import ContractError, UndefinedMetricError

COLLISION_DISTANCE = 0.5
FRIEND_SECONDS = 2.0
DEA_RADIUS = 1.0
ALL_METRICS = ("mae", "fde", "ot", "mmd", "dtw", "colli", "dea")


def aligned_samples(pred: TrajectorySet, gt: TrajectorySet):
    """``(ids, frames, pred_xy, gt_xy)`` for every (frame, id) present in both sets."""
    ids, frames, a, b = [], [], [], []
    for pid in sorted(set(pred.ids) & set(gt.ids)):
        fp, pp = pred[pid]
        fg, pg = gt[pid]
        common, ip, ig = np.intersect1d(fp, fg, assume_unique=True, return_indices=True)
        ids.append(np.full(len(common), pid))
        frames.append(common)
        a.append(pp[ip])
        b.append(pg[ig])
    if not ids:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2)))
    return np.concatenate(ids), np.concatenate(frames), np.concatenate(a), np.concatenate(b)


def mae(pred: TrajectorySet, gt: TrajectorySet) -> float:
    """Mean Euclidean position error over aligned (frame, id) samples."""
    _, _, a, b = aligned_samples(pred, gt)
    if len(a) == 0:
        raise UndefinedMetricError("mae: no aligned samples")
    return float(np.linalg.norm(a - b, axis=1).mean())


def fde(pred: TrajectorySet, gt: TrajectorySet) -> float:
    """Mean error at each pedestrian's last aligned frame."""
    ids, frames, a, b = aligned_samples(pred, gt)
    if len(a) == 0:
        raise UndefinedMetricError("fde: no aligned samples")
    errs = []
    for pid in np.unique(ids):
        rows = np.flatnonzero(ids == pid)
        last = rows[np.argmax(frames[rows])]
        errs.append(np.linalg.norm(a[last] - b[last]))
    return float(np.mean(errs))


def _points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[:, None]
    return arr.reshape(len(arr), -1) if arr.ndim != 2 else arr


def ot_sinkhorn(P, Q, eps: float | None = None, iters: int = 200) -> float:
    """Entropic optimal transport cost between uniform point clouds.

    Ground cost is the squared Euclidean distance; ``eps`` defaults to 1% of
    the median cost. Updates run in the log domain. The first half of the
    ``iters`` budget anneals the regularization geometrically from the
    largest cost down to ``eps`` (plain iterations at a small ``eps``
    converge far too slowly); the second half runs at ``eps``. Both
    potentials are updated simultaneously and averaged with their previous
    values, which keeps the result symmetric in ``(P, Q)``. The returned
    value is the transport cost ``<plan, cost>`` of the final plan.
    """
    x, y = _points(P), _points(Q)
    if len(x) == 0 or len(y) == 0:
        raise UndefinedMetricError("ot_sinkhorn: empty point set")
    C = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    if eps is None:
        eps = 0.01 * float(np.median(C))
        if eps <= 0:
            eps = 0.01 * float(C.mean())
    if eps <= 0:
        return 0.0
    n_anneal = iters // 2
    schedule = np.concatenate([np.geomspace(max(float(C.max()), eps), eps, n_anneal),
                               np.full(iters - n_anneal, eps)])
    log_a = np.full(len(x), -np.log(len(x)))
    log_b = np.full(len(y), -np.log(len(y)))
    f = np.zeros(len(x))
    g = np.zeros(len(y))
    for e in schedule:
        f_new = -e * logsumexp((g[None, :] - C) / e + log_b[None, :], axis=1)
        g_new = -e * logsumexp((f[:, None] - C) / e + log_a[:, None], axis=0)
        f, g = 0.5 * (f + f_new), 0.5 * (g + g_new)
    log_plan = (f[:, None] + g[None, :] - C) / eps + log_a[:, None] + log_b[None, :]
    return float((np.exp(log_plan) * C).sum())


def median_bandwidth(P, Q) -> float:
    z = np.concatenate([_points(P), _points(Q)])
    if len(z) < 2:
        return 0.0
    iu = np.triu_indices(len(z), k=1)
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))[iu]
    return float(np.median(d))


def mmd_details(P, Q) -> tuple[float, bool, float]:
    """``(value, biased, bandwidth)`` for the Gaussian-kernel MMD^2 estimate.

    Equal-size sets use the paired U-statistic over lexicographically sorted
    points (zero for identical multisets, invariant to point order). Unequal
    sizes use the standard two-sample unbiased estimator. Singleton sets fall
    back to the biased estimator.
    """
    x, y = _points(P), _points(Q)
    if len(x) == 0 or len(y) == 0:
        raise UndefinedMetricError("mmd: empty point set")
    sigma = median_bandwidth(x, y)
    if sigma <= 0:
        return 0.0, len(x) < 2 or len(y) < 2, sigma

    def kernel(a, b):
        return np.exp(-((a[:, None, :] - b[None, :, :]) ** 2).sum(-1) / (2.0 * sigma * sigma))

    m, n = len(x), len(y)
    if m < 2 or n < 2:
        value = kernel(x, x).mean() + kernel(y, y).mean() - 2.0 * kernel(x, y).mean()
        return float(value), True, sigma
    if m == n:
        x = x[np.lexsort(x.T[::-1])]
        y = y[np.lexsort(y.T[::-1])]
        kxy = kernel(x, y)
        H = kernel(x, x) + kernel(y, y) - kxy - kxy.T
        np.fill_diagonal(H, 0.0)
        return float(H.sum() / (m * (m - 1))), False, sigma
    kxx, kyy = kernel(x, x), kernel(y, y)
    np.fill_diagonal(kxx, 0.0)
    np.fill_diagonal(kyy, 0.0)
    value = kxx.sum() / (m * (m - 1)) + kyy.sum() / (n * (n - 1)) - 2.0 * kernel(x, y).mean()
    return float(value), False, sigma


def mmd_gaussian(P, Q) -> float:
    """Gaussian-kernel MMD^2 with the median-distance bandwidth."""
    value, biased, _ = mmd_details(P, Q)
    if biased:
        warnings.warn("mmd: singleton set, using the biased estimator", stacklevel=2)
    return value


def dtw(seq1, seq2) -> float:
    """Dynamic time warping distance with Euclidean ground cost."""
    a, b = _points(seq1), _points(seq2)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("dtw: sequences must be nonempty")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def trajectory_dtw(pred: TrajectorySet, gt: TrajectorySet) -> float:
    """Mean per-pedestrian DTW over the frames both sets cover."""
    ids, frames, a, b = aligned_samples(pred, gt)
    if len(a) == 0:
        raise UndefinedMetricError("dtw: no aligned samples")
    return float(np.mean([dtw(a[ids == pid], b[ids == pid]) for pid in np.unique(ids)]))


def _frames_table(traj: TrajectorySet) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    table: dict[int, tuple[list, list]] = {}
    for pid in traj.ids:
        frames, pos = traj[pid]
        for f, p in zip(frames.tolist(), pos):
            ids, pts = table.setdefault(f, ([], []))
            ids.append(pid)
            pts.append(p)
    return {f: (np.array(i), np.array(p)) for f, (i, p) in sorted(table.items())}


def collision_count(traj: TrajectorySet, distance: float = COLLISION_DISTANCE,
                    friend_seconds: float = FRIEND_SECONDS) -> int:
    """Pair-frames closer than ``distance``, excluding "friend" pairs.

    A pair whose consecutive-frame collision run lasts longer than
    ``friend_seconds`` anywhere in the set is a friend pair and none of its
    collisions count.
    """
    pair_frames: dict[tuple[int, int], list[int]] = {}
    for f, (ids, pts) in _frames_table(traj).items():
        if len(ids) < 2:
            continue
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        ii, jj = np.nonzero(np.triu(d < distance, k=1))
        for i, j in zip(ii, jj):
            key = (int(min(ids[i], ids[j])), int(max(ids[i], ids[j])))
            pair_frames.setdefault(key, []).append(f)
    total = 0
    for frames in pair_frames.values():
        frames = np.array(sorted(frames))
        breaks = np.flatnonzero(np.diff(frames) != 1)
        runs = np.diff(np.r_[0, breaks + 1, len(frames)])
        if runs.max() * traj.dt > friend_seconds + 1e-9:
            continue
        total += len(frames)
    return total


def local_densities(traj: TrajectorySet, radius: float = DEA_RADIUS) -> np.ndarray:
    """Neighbor count within ``radius`` for every (pedestrian, frame) sample."""
    out = []
    for _, (ids, pts) in _frames_table(traj).items():
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        out.append((d <= radius).sum(axis=1) - 1)
    return np.concatenate(out) if out else np.zeros(0)


def dea(pred: TrajectorySet, gt: TrajectorySet, radius: float = DEA_RADIUS) -> float:
    """Fraction of predicted samples denser than the mean ground-truth local density."""
    gt_d = local_densities(gt, radius)
    pred_d = local_densities(pred, radius)
    if len(gt_d) == 0 or len(pred_d) == 0:
        raise UndefinedMetricError("dea: empty trajectory set")
    return float(np.mean(pred_d > gt_d.mean()))


@dataclass
class MetricReport:
    mae: float | None = None
    fde: float | None = None
    ot: float | None = None
    mmd: float | None = None
    dtw: float | None = None
    collisions: int | None = None
    dea: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "config" and v is not None]
        width = max((len(k) for k, _ in rows), default=0)
        return "\n".join(f"{k:<{width}}  {v:>12.6g}" if isinstance(v, float) else f"{k:<{width}}  {v:>12}"
                         for k, v in rows)


def evaluate(pred: TrajectorySet, gt: TrajectorySet, metrics=ALL_METRICS,
             ot_iters: int = 200) -> MetricReport:
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ContractError(f"unknown metrics {sorted(unknown)}; choose from {ALL_METRICS}")
    report = MetricReport(config={
        "metrics": list(metrics), "collision_distance_m": COLLISION_DISTANCE,
        "friend_seconds": FRIEND_SECONDS, "dea_radius_m": DEA_RADIUS,
        "ot": {"eps": "0.01 * median squared distance", "iters": ot_iters},
        "mmd": {"kernel": "gaussian", "bandwidth": "median pairwise distance"},
    })
    _, _, a, b = aligned_samples(pred, gt)
    if "mae" in metrics:
        report.mae = mae(pred, gt)
    if "fde" in metrics:
        report.fde = fde(pred, gt)
    if "ot" in metrics:
        report.ot = ot_sinkhorn(a, b, iters=ot_iters)
    if "mmd" in metrics:
        value, biased, sigma = mmd_details(a, b)
        # the unbiased estimate can dip below zero; the report keeps the raw value in its echo
        report.mmd = max(value, 0.0)
        report.config["mmd"].update({"bandwidth_value": sigma, "biased": biased, "raw": value})
    if "dtw" in metrics:
        report.dtw = trajectory_dtw(pred, gt)
    if "colli" in metrics:
        report.collisions = collision_count(pred)
    if "dea" in metrics:
        report.dea = dea(pred, gt)
    return report
