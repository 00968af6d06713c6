"""Trajectory accuracy: absolute and relative pose errors in MAE/RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, LengthMismatch
from .geom import Pose, Similarity, umeyama_align


@dataclass
class TrajectoryMetrics:
    ape_mae: float
    ape_rmse: float
    rpe_mae: float
    rpe_rmse: float
    alignment: Similarity

    def lines(self):
        return ["ape_mae=%.9g" % self.ape_mae,
                "ape_rmse=%.9g" % self.ape_rmse,
                "rpe_mae=%.9g" % self.rpe_mae,
                "rpe_rmse=%.9g" % self.rpe_rmse]


def _mae_rmse(errors):
    errors = np.asarray(errors, dtype=float)
    if len(errors) == 0:
        return 0.0, 0.0
    return float(np.mean(errors)), float(np.sqrt(np.mean(errors ** 2)))


def align_trajectories(est, gt) -> Similarity:
    """Rigid (no scale) fit of estimated onto ground-truth positions.

    Falls back to a translation-only fit when the positions are collinear
    or too few to pin the rotation.
    """
    src = np.array([p.translation for p in est])
    dst = np.array([p.translation for p in gt])
    try:
        return umeyama_align(src, dst, with_scale=False)
    except DegenerateInput:
        return Similarity(1.0, np.eye(3), dst.mean(axis=0) - src.mean(axis=0))


def ape_rpe(est, gt, align: bool = True, rpe_delta: int = 1) -> TrajectoryMetrics:
    """APE on per-frame positions (optionally after rigid alignment) and
    RPE on relative motions over ``rpe_delta`` frames, both as MAE/RMSE."""
    est = list(est)
    gt = list(gt)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} vs {len(gt)} poses")
    if len(est) == 0:
        raise LengthMismatch("empty trajectories")
    for a, b in zip(est, gt):
        if a.timestamp is not None and b.timestamp is not None \
                and abs(a.timestamp - b.timestamp) > 1e-6:
            raise LengthMismatch("timestamps do not match")
    if rpe_delta < 1:
        raise ValueError("rpe_delta must be >= 1")

    raw_errors = [float(np.linalg.norm(a.translation - b.translation))
                  for a, b in zip(est, gt)]
    if align and len(est) >= 2 and max(raw_errors) > 0.0:
        sim = align_trajectories(est, gt)
        est_aligned = [sim.apply_pose(p) for p in est]
        ape_errors = [float(np.linalg.norm(a.translation - b.translation))
                      for a, b in zip(est_aligned, gt)]
    else:
        sim = Similarity.identity()
        ape_errors = raw_errors
    ape_mae, ape_rmse = _mae_rmse(ape_errors)

    rpe_errors = []
    for i in range(len(est) - rpe_delta):
        rel_est = est[i].inverse().compose(est[i + rpe_delta])
        rel_gt = gt[i].inverse().compose(gt[i + rpe_delta])
        err = rel_gt.inverse().compose(rel_est)
        rpe_errors.append(float(np.linalg.norm(err.translation)))
    rpe_mae, rpe_rmse = _mae_rmse(rpe_errors)
    return TrajectoryMetrics(ape_mae, ape_rmse, rpe_mae, rpe_rmse, sim)
