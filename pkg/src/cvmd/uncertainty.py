"""Latent-space uncertainty quantification and the adaptive guidance scale.

Each used codebook entry gets a Gaussian fitted over the embeddings assigned
to it; the mean is the codebook vector itself, the covariance the mean outer
product of residuals, regularized by +eps*I. New embeddings are scored with
the Mahalanobis distance, thresholded for outlier flagging, and mapped to a
guidance scale that shrinks linearly from w_max at distance 0 to w_min at the
threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .arrayio import read_array, write_array
from .errors import CvmdError, InputError

# Clusters smaller than this multiple of the latent dimension get a diagonal
# covariance; the full matrix would be badly conditioned even after
# regularization.
FULL_COV_MIN_RATIO = 3


@dataclass
class ClusterStats:
    q: int  # 1-based codebook index
    mu: np.ndarray
    cov: np.ndarray  # [R x R] full, or [R] diagonal
    count: int
    eps: float
    _factor: object = field(default=None, repr=False, compare=False)

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 1


@dataclass(frozen=True)
class GuidanceConfig:
    w_min: float = 1.0
    w_max: float = 7.0
    t_c: float = 10.0

    def __post_init__(self):
        if self.w_max < self.w_min:
            raise InputError("w_max must be >= w_min")
        if self.t_c <= 0:
            raise InputError("t_c must be positive")


def fit_cluster_stats(assignments, codebook, eps: float = 1e-6) -> dict:
    """Per-entry Gaussian fit from (q, z_hat) assignments.

    The mean is the codebook vector, not the sample mean. Entries with no
    assigned samples are omitted.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    by_q: dict = {}
    for q, z_hat in assignments:
        by_q.setdefault(int(q), []).append(np.asarray(z_hat, dtype=float))
    out = {}
    dim = codebook.dim
    for q, zs in sorted(by_q.items()):
        mu = codebook.entries[q - 1].copy()
        resid = np.stack(zs) - mu
        if len(zs) < FULL_COV_MIN_RATIO * dim:
            cov = np.mean(resid**2, axis=0) + eps
        else:
            cov = resid.T @ resid / len(zs)
            cov = 0.5 * (cov + cov.T) + eps * np.eye(dim)
        out[q] = ClusterStats(q=q, mu=mu, cov=cov, count=len(zs), eps=eps)
    return out


def mahalanobis(stats: ClusterStats, z_hat: np.ndarray) -> float:
    """delta_m = sqrt((mu - z)^T Sigma^-1 (mu - z))."""
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != stats.mu.shape:
        raise InputError("embedding dimension does not match cluster stats")
    d = stats.mu - z_hat
    if stats.diagonal:
        return float(np.sqrt(np.sum(d * d / stats.cov)))
    if stats._factor is None:
        try:
            stats._factor = cho_factor(stats.cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise CvmdError(f"covariance of cluster {stats.q} is not SPD") from exc
    val = float(d @ cho_solve(stats._factor, d))
    return float(np.sqrt(max(val, 0.0)))


def adaptive_guidance(delta_m: float, cfg: GuidanceConfig) -> float:
    """Piecewise-linear map from uncertainty to guidance scale.

    w = w_min + (1 - min(delta, t_c)/t_c) * (w_max - w_min).
    """
    if delta_m < 0:
        raise InputError("delta_m must be nonnegative")
    frac = min(delta_m, cfg.t_c) / cfg.t_c
    return cfg.w_min + (1.0 - frac) * (cfg.w_max - cfg.w_min)


def outlier_flag(delta_m: float, t_c: float) -> bool:
    """True iff the distance strictly exceeds the threshold."""
    return delta_m > t_c


# ---------------------------------------------------------------------------
# Persistence


def save_cluster_stats(stats: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    order = sorted(stats.keys())
    with open(directory / "stats.bin", "wb") as fh:
        for q in order:
            write_array(fh, stats[q].mu)
            write_array(fh, stats[q].cov)
    manifest = {
        "kind": "cluster_stats",
        "entries": [
            {"q": q, "count": stats[q].count, "eps": stats[q].eps,
             "diagonal": stats[q].diagonal}
            for q in order
        ],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_cluster_stats(directory) -> dict:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    out = {}
    with open(directory / "stats.bin", "rb") as fh:
        for rec in manifest["entries"]:
            mu = read_array(fh)
            cov = read_array(fh)
            out[rec["q"]] = ClusterStats(q=rec["q"], mu=mu, cov=cov,
                                         count=rec["count"], eps=rec["eps"])
    return out
