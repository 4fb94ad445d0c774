"""Prediction metrics and analyses.

Displacement errors (ADE/FDE), maneuver-entropy reports over codebook usage,
confidence bands over sample sets, and the drivability audit that re-extracts
motion parameters from a trajectory and checks them against physical limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .kinematics import PhysicalLimits, VehicleState, extract_params

DRIVABILITY_TOL = 1e-6
N_CLASSES = 3
MAX_ENTROPY = math.log2(N_CLASSES)


@dataclass
class PredictionReport:
    sample_id: int
    condition: int
    delta_m: float
    guidance_scale: float
    trajectories: np.ndarray  # [K x 2 x T_p]
    mean_trajectory: np.ndarray  # [2 x T_p]
    std_trajectory: np.ndarray  # [2 x T_p]
    ade: float
    fde: float
    outlier: bool
    drivable: bool


@dataclass
class EntropyReport:
    counts: np.ndarray  # [Q x 3]
    entropy_per_condition: dict  # q -> bits, used entries only
    average_entropy: float
    used_entries: int


def ade(truth: np.ndarray, pred: np.ndarray) -> float:
    """Mean pointwise Euclidean distance in meters."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise InputError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    return float(np.mean(np.hypot(truth[0] - pred[0], truth[1] - pred[1])))


def fde(truth: np.ndarray, pred: np.ndarray, horizon_s: float | None = None,
        rate_hz: float | None = None) -> float:
    """Euclidean distance at the horizon step (default: final step)."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise InputError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    if horizon_s is None:
        idx = truth.shape[1] - 1
    else:
        if rate_hz is None:
            raise InputError("rate_hz required when horizon_s is given")
        idx = round(horizon_s * rate_hz) - 1
        if not 0 <= idx < truth.shape[1]:
            raise InputError(f"horizon {horizon_s}s maps outside the trajectory")
    return float(np.hypot(truth[0, idx] - pred[0, idx], truth[1, idx] - pred[1, idx]))


def shannon_entropy(counts) -> float:
    """Entropy in bits of a 3-class count vector, with 0 log 0 := 0."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (N_CLASSES,) or np.any(counts < 0):
        raise InputError("counts must be 3 nonnegative values")
    total = counts.sum()
    if total == 0:
        raise InputError("all-zero counts have no entropy")
    p = counts / total
    nz = p > 0
    return float(-np.sum(p[nz] * np.log2(p[nz]))) + 0.0


def avg_entropy(counts_matrix: np.ndarray) -> float:
    """Mean per-condition entropy over used (nonzero-count) entries."""
    counts_matrix = np.asarray(counts_matrix, dtype=float)
    used = counts_matrix.sum(axis=1) > 0
    if not used.any():
        raise InputError("no used entries")
    return float(np.mean([shannon_entropy(row) for row in counts_matrix[used]]))


def entropy_report(assignments, labels, codebook_size: int) -> EntropyReport:
    """Maneuver-class counts per codebook entry from (idx, q, z) assignments."""
    counts = np.zeros((codebook_size, N_CLASSES))
    for (i, q, _z), label in zip(assignments, labels):
        counts[q - 1, int(label)] += 1
    used = counts.sum(axis=1) > 0
    per_q = {qi + 1: shannon_entropy(counts[qi]) for qi in np.flatnonzero(used)}
    return EntropyReport(
        counts=counts,
        entropy_per_condition=per_q,
        average_entropy=avg_entropy(counts),
        used_entries=int(used.sum()),
    )


def confidence_band(trajs: np.ndarray) -> tuple:
    """Pointwise mean and population std over K trajectories [K x 2 x T_p]."""
    trajs = np.asarray(trajs, dtype=float)
    if trajs.ndim != 3 or trajs.shape[0] < 1:
        raise InputError(f"expected [K x 2 x T_p], got shape {trajs.shape}")
    return trajs.mean(axis=0), trajs.std(axis=0)


def spread(trajs: np.ndarray) -> float:
    """Mean pairwise ADE within a sample set; 0 for a single trajectory."""
    trajs = np.asarray(trajs, dtype=float)
    k = trajs.shape[0]
    if k < 2:
        return 0.0
    total = 0.0
    pairs = 0
    for i in range(k):
        for j in range(i + 1, k):
            total += ade(trajs[i], trajs[j])
            pairs += 1
    return total / pairs


def drivability_audit(traj: np.ndarray, s0: VehicleState, tau: float,
                      limits: PhysicalLimits) -> tuple:
    """Re-extract motion parameters and check them against the limits.

    Returns (drivable, report) where report carries the worst violations per
    channel (negative values mean headroom).
    """
    params = extract_params(np.asarray(traj, dtype=float), s0, tau)
    yaw_excess = float(np.max(np.abs(params.yaw_rate)) - limits.yaw_rate_max)
    accel_excess = float(np.max(np.abs(params.accel)) - limits.accel_max)
    ok = yaw_excess <= DRIVABILITY_TOL and accel_excess <= DRIVABILITY_TOL
    return ok, {"yaw_rate_excess": yaw_excess, "accel_excess": accel_excess}
