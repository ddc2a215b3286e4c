"""Absolute trajectory error against ground truth."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import serialize
from .errors import InsufficientOverlap
from .geometry import RigidMotion, absolute_orientation
from .trajectory import Trajectory, read_trajectory_text, write_trajectory_text

DEFAULT_BIN_WIDTH = 0.25


def _positions(traj, use_centers):
    return traj.centers() if use_centers else traj.translations()


def _common(estimate: Trajectory, reference: Trajectory, use_centers=False):
    frames = sorted(set(estimate.frames) & set(reference.frames))
    if len(frames) < 3:
        raise InsufficientOverlap(f"{len(frames)} common frames, need 3")
    ie = [estimate.frames.index(f) for f in frames]
    ir = [reference.frames.index(f) for f in frames]
    return frames, _positions(estimate, use_centers)[ie], _positions(reference, use_centers)[ir]


def align(estimate: Trajectory, reference: Trajectory, use_centers=False) -> RigidMotion:
    """Rigid motion M minimizing sum ||M est_k - ref_k||^2 over shared frames (no scale).

    Positions are pose translations, or camera centres with ``use_centers``.
    """
    _, E, R = _common(estimate, reference, use_centers)
    return absolute_orientation(E, R)


@dataclass
class TrajectoryReport:
    rmse: float
    mean: float
    median: float
    per_pose_errors: np.ndarray
    frames: list
    alignment: RigidMotion
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total_error(self):
        """Sum of per-pose errors (not of histogram bins)."""
        return float(np.sum(self.per_pose_errors))

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "mean": self.mean,
            "median": self.median,
            "perPoseErrors": self.per_pose_errors,
            "frames": self.frames,
            "alignment": self.alignment.to_dict(),
            "histogram": {"binEdges": self.bin_edges, "counts": self.counts, "lastBinOpen": True},
            "totalSummedPerPoseError": self.total_error,
        }

    @classmethod
    def from_dict(cls, d):
        h = d["histogram"]
        return cls(d["rmse"], d["mean"], d["median"], np.array(d["perPoseErrors"], dtype=float),
                   list(d["frames"]), RigidMotion.from_dict(d["alignment"]),
                   np.array(h["binEdges"], dtype=float), np.array(h["counts"], dtype=int))


def lower_median(values):
    v = np.sort(np.asarray(values, dtype=float))
    return float(v[(len(v) - 1) // 2])


def histogram(errors, bin_width=DEFAULT_BIN_WIDTH):
    """Right-open bins [k w, (k+1) w); the last bin is open-ended."""
    errors = np.asarray(errors, dtype=float)
    n_bins = max(1, int(np.floor(errors.max() / bin_width)) + 1) if len(errors) else 1
    edges = bin_width * np.arange(n_bins + 1)
    idx = np.minimum(np.floor(errors / bin_width).astype(int), n_bins - 1)
    return edges, np.bincount(idx, minlength=n_bins)


def ate(estimate: Trajectory, reference: Trajectory, bin_width=DEFAULT_BIN_WIDTH, use_centers=False):
    frames, E, R = _common(estimate, reference, use_centers)
    M = absolute_orientation(E, R)
    err = np.linalg.norm(M.apply(E) - R, axis=1)
    edges, counts = histogram(err, bin_width)
    return TrajectoryReport(
        float(np.sqrt(np.mean(err**2))),
        float(np.mean(err)),
        lower_median(err),
        err,
        frames,
        M,
        edges,
        counts,
    )


def compare_runs(reports):
    """Rows of rmse/mean/median per named report plus % change of rmse vs the first."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    base = reports[0][1].rmse
    rows = []
    for name, rep in reports:
        change = 0.0 if base == 0 and rep.rmse == 0 else (rep.rmse / base - 1.0) * 100.0
        rows.append({"name": name, "rmse": rep.rmse, "mean": rep.mean, "median": rep.median,
                     "relChangePct": change})
    return rows


def comparison_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "rmse", "mean", "median", "rel_change_pct"])
    for r in rows:
        w.writerow([r["name"]] + [serialize.format_float(float(r[k]))
                                  for k in ("rmse", "mean", "median", "relChangePct")])
    return buf.getvalue()


__all__ = [
    "align",
    "ate",
    "compare_runs",
    "comparison_csv",
    "histogram",
    "lower_median",
    "TrajectoryReport",
    "read_trajectory_text",
    "write_trajectory_text",
]
