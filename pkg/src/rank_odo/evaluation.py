"""Rank correlations, KITTI-style drift over 100-800 m segments, latent dumps."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .errors import ConstantInputWarning, LengthMismatchError
from .net import Model, decoder_forward, encoder_forward
from .pose import DOF_NAMES, Trajectory, compose, inverse, relative_pose

DEFAULT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_STRIDE = 10


@dataclass(frozen=True)
class CorrelationReport:
    r_s: float
    r_k: float
    n: int
    constant_input: bool = False


@dataclass
class DriftReport:
    t_rel: float
    r_rel: float
    per_length: Dict[float, tuple] = field(default_factory=dict)  # L -> (t_err, r_err, count)
    empty: bool = False
    aggregation: str = "mean"


@dataclass
class LatentDump:
    features: np.ndarray  # (n, D)
    labels: np.ndarray
    predictions: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


def _paired(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise LengthMismatchError(f"inputs have lengths {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    return a, b


def average_ranks(a: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.shape[0])
    start = 0
    n = a.shape[0]
    while start < n:
        stop = start + 1
        while stop < n and sorted_a[stop] == sorted_a[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(a, b) -> float:
    """Spearman's rho with average ranks; 0 (plus a warning) for constant input."""
    a, b = _paired(a, b)
    ra = average_ranks(a) - (a.shape[0] + 1) / 2.0
    rb = average_ranks(b) - (b.shape[0] + 1) / 2.0
    denom = math.sqrt(float(np.dot(ra, ra)) * float(np.dot(rb, rb)))
    if denom == 0.0:
        warnings.warn("constant input to spearman; returning 0", ConstantInputWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))


def kendall(a, b) -> float:
    """Kendall's tau-b; 0 (plus a warning) when either side is all ties."""
    a, b = _paired(a, b)
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    upper = np.triu(np.ones(sa.shape, dtype=bool), k=1)
    prod = (sa * sb)[upper]
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    ties_a_only = int(np.count_nonzero((sa[upper] == 0) & (sb[upper] != 0)))
    ties_b_only = int(np.count_nonzero((sb[upper] == 0) & (sa[upper] != 0)))
    left = concordant + discordant + ties_a_only
    right = concordant + discordant + ties_b_only
    if left == 0 or right == 0:
        warnings.warn("constant input to kendall; returning 0", ConstantInputWarning, stacklevel=2)
        return 0.0
    return float(np.clip((concordant - discordant) / math.sqrt(left * right), -1.0, 1.0))


def path_distances(traj: Trajectory) -> np.ndarray:
    pos = traj.positions()
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rotation_angle(rot: np.ndarray) -> float:
    """Angle of a rotation matrix in [0, pi].

    Same value as arccos((tr R - 1) / 2), but computed with atan2 of the skew
    part so that near-identity rotations do not lose half their digits.
    """
    rot = np.asarray(rot, dtype=np.float64)
    c = (np.trace(rot) - 1.0) / 2.0
    s = 0.5 * math.sqrt((rot[2, 1] - rot[1, 2]) ** 2 + (rot[0, 2] - rot[2, 0]) ** 2 + (rot[1, 0] - rot[0, 1]) ** 2)
    return math.atan2(s, c)


def _last_frame(dist: np.ndarray, first: int, length: float) -> int:
    hits = np.flatnonzero(dist[first:] >= dist[first] + length)
    return int(first + hits[0]) if hits.size else -1


def kitti_drift(
    gt: Trajectory,
    pred: Trajectory,
    lengths: Sequence[float] = DEFAULT_LENGTHS,
    stride: int = DEFAULT_STRIDE,
    aggregation: str = "mean",
) -> DriftReport:
    """Segment drift in the style of the KITTI odometry devkit.

    ``t_rel`` is in percent, ``r_rel`` in degrees per 100 m.  With
    ``aggregation="rmse"`` errors are combined as root-mean-square instead of
    the devkit's plain mean.
    """
    if len(gt) != len(pred):
        raise LengthMismatchError(f"trajectories have {len(gt)} and {len(pred)} poses")
    if len(gt) < 2:
        raise ValueError("trajectories need at least two poses")
    if aggregation not in ("mean", "rmse"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    dist = path_distances(gt)
    errors = {float(length): ([], []) for length in lengths}
    for first in range(0, len(gt), stride):
        for length in lengths:
            last = _last_frame(dist, first, length)
            if last < 0:
                continue
            delta_gt = relative_pose(gt[first], gt[last])
            delta_pred = relative_pose(pred[first], pred[last])
            err = compose(inverse(delta_gt), delta_pred)
            t_errs, r_errs = errors[float(length)]
            t_errs.append(float(np.linalg.norm(err.translation)) / length)
            r_errs.append(rotation_angle(err.rotation) / length)

    def agg(values):
        values = np.asarray(values)
        if aggregation == "rmse":
            return math.sqrt(float(np.mean(values * values)))
        return math.fsum(values) / len(values)

    per_length = {}
    all_t, all_r = [], []
    for length, (t_errs, r_errs) in errors.items():
        if t_errs:
            per_length[length] = (agg(t_errs), agg(r_errs), len(t_errs))
        else:
            per_length[length] = (0.0, 0.0, 0)
        all_t += t_errs
        all_r += r_errs
    if not all_t:
        return DriftReport(0.0, 0.0, per_length, empty=True, aggregation=aggregation)
    return DriftReport(100.0 * agg(all_t), math.degrees(agg(all_r)) * 100.0, per_length, aggregation=aggregation)


def latent_dump(model: Model, dataset: Sequence) -> LatentDump:
    if not dataset:
        raise ValueError("dataset is empty")
    features, _ = encoder_forward(model, [s.flow for s in dataset])
    preds, _ = decoder_forward(model, features)
    labels = np.array([s.state[model.dof_index] for s in dataset])
    return LatentDump(features, labels, np.asarray(preds, dtype=np.float64))


def ranking_alignment(dump: LatentDump) -> CorrelationReport:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConstantInputWarning)
        r_s = spearman(dump.predictions, dump.labels)
        r_k = kendall(dump.predictions, dump.labels)
    constant = any(issubclass(w.category, ConstantInputWarning) for w in caught)
    return CorrelationReport(r_s, r_k, len(dump), constant)


def _fmt(v: float) -> str:
    return "%.10g" % (float(v) + 0.0)


def correlation_csv(reports: Dict[int, CorrelationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dof", "r_s", "r_k", "n"])
    for dof in sorted(reports):
        r = reports[dof]
        w.writerow([DOF_NAMES[dof], _fmt(r.r_s), _fmt(r.r_k), r.n])
    return buf.getvalue()


def drift_csv(report: DriftReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["length_m", "t_err_pct", "r_err_deg_per_100m", "count"])
    for length in sorted(report.per_length):
        t_err, r_err, count = report.per_length[length]
        w.writerow([_fmt(length), _fmt(100.0 * t_err), _fmt(math.degrees(r_err) * 100.0), count])
    total = sum(c for _, _, c in report.per_length.values())
    w.writerow(["all", _fmt(report.t_rel), _fmt(report.r_rel), total])
    return buf.getvalue()


def latent_csv(dump: LatentDump) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = dump.features.shape[1]
    w.writerow([f"f{k}" for k in range(d)] + ["label", "prediction"])
    for feat, label, pred in zip(dump.features, dump.labels, dump.predictions):
        w.writerow([repr(float(v) + 0.0) for v in feat] + [repr(float(label)), repr(float(pred))])
    return buf.getvalue()

