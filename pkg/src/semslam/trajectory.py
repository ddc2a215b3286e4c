"""Per-body trajectory initialization and transfer of object poses to the world frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import serialize
from .errors import InsufficientFeatures, InsufficientInliers, MissingCameraPose
from .geometry import RigidMotion, compose, quat_xyzw, ransac_registration, rotation_from_quat_xyzw
from .scene import FrameObservation, raster_cells
from .segmentation import MOVING, STATIC

MIN_COMPONENT_CELLS = 20


@dataclass
class Trajectory:
    """Poses keyed by strictly increasing frame index."""

    frames: list
    poses: list
    flagged: list = field(default_factory=list)

    def __post_init__(self):
        self.frames = [int(f) for f in self.frames]
        if len(self.frames) != len(self.poses):
            raise ValueError("frames and poses differ in length")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("frame indices must be strictly increasing")
        self.flagged = sorted(int(f) for f in self.flagged)

    def __len__(self):
        return len(self.frames)

    def pose_at(self, frame):
        try:
            return self.poses[self.frames.index(int(frame))]
        except ValueError:
            raise KeyError(frame) from None

    def has(self, frame):
        return int(frame) in self.frames

    def translations(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def centers(self):
        return np.array([p.center for p in self.poses]).reshape(-1, 3)

    def to_dict(self):
        return {
            "frames": self.frames,
            "poses": [p.to_dict() for p in self.poses],
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["frames"], [RigidMotion.from_dict(p) for p in d["poses"]], d.get("flagged", []))


@dataclass
class ObjectTrack:
    """Virtual poses of one body, as if the camera never moved.

    ``poses[i]`` maps camera coordinates at ``first_frame`` to camera
    coordinates at ``first_frame + i``; the first pose is the identity.
    """

    body_id: int
    first_frame: int
    poses: list
    track_ids: np.ndarray
    flagged: list = field(default_factory=list)

    @property
    def frames(self):
        return list(range(self.first_frame, self.first_frame + len(self.poses)))

    def as_trajectory(self):
        return Trajectory(self.frames, self.poses, self.flagged)

    def to_dict(self):
        return {
            "bodyId": self.body_id,
            "firstFrame": self.first_frame,
            "poses": [p.to_dict() for p in self.poses],
            "trackIds": self.track_ids,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["bodyId"]),
            int(d["firstFrame"]),
            [RigidMotion.from_dict(p) for p in d["poses"]],
            np.array(d["trackIds"], dtype=int),
            [int(f) for f in d.get("flagged", [])],
        )


def chain(relative):
    """Cumulative poses from relative steps; the first pose is the identity."""
    out = [RigidMotion.identity()]
    for step in relative:
        out.append(compose(step, out[-1]))
    return out


def unchain(poses):
    return [compose(b, a.inverse()) for a, b in zip(poses, poses[1:])]


def _correspondences(a: FrameObservation, b: FrameObservation):
    common, ia, ib = np.intersect1d(a.track_ids, b.track_ids, return_indices=True)
    P, Q = a.points3d[ia], b.points3d[ib]
    ok = np.all(np.isfinite(P), axis=1) & np.all(np.isfinite(Q), axis=1)
    return common[ok], P[ok], Q[ok]


def _valid_count(obs: FrameObservation):
    return int(np.sum(np.all(np.isfinite(obs.points3d), axis=1)))


def init_body_trajectory(obs, seed=0, inlier_thresh=0.05, body_id=1, fill_gaps=False, max_iters=200):
    """Chain consecutive RANSAC registrations of one body's features.

    ``obs`` is a list of per-frame observations restricted to the body, for
    consecutive frames.  With ``fill_gaps`` a frame pair lacking three
    usable correspondences repeats the previous step (constant velocity) and
    the later frame is flagged; otherwise ``InsufficientFeatures`` is raised.
    """
    if len(obs) < 2:
        raise InsufficientFeatures(obs[0].frame if obs else -1, 0)
    frames = [o.frame for o in obs]
    if any(b != a + 1 for a, b in zip(frames, frames[1:])):
        raise ValueError("observations must cover consecutive frames")
    steps = []
    flagged = []
    members = set()
    for k, (a, b) in enumerate(zip(obs, obs[1:])):
        ids, P, Q = _correspondences(a, b)
        short = None
        if _valid_count(a) < 3:
            short = a
        elif _valid_count(b) < 3 or len(ids) < 3:
            short = b
        if short is None:
            try:
                M, mask = ransac_registration(P, Q, max_iters, inlier_thresh, seed=seed + k)
                steps.append(M)
                members.update(int(t) for t in ids[mask])
                continue
            except InsufficientInliers:
                if not (fill_gaps and steps):
                    raise
                short = b
        if not (fill_gaps and steps):
            raise InsufficientFeatures(short.frame, len(ids))
        steps.append(steps[-1])
        flagged.append(b.frame)
    return ObjectTrack(body_id, frames[0], chain(steps), np.array(sorted(members), dtype=int), flagged)


def init_camera_trajectory(static_obs, seed=0, inlier_thresh=0.05, fill_gaps=True):
    """Camera poses from the static features, anchored at identity on the first frame.

    A static point satisfies x_k = C_k X, so the chained registrations of the
    static scene are exactly the world-to-camera poses with C_0 = I.
    """
    track = init_body_trajectory(static_obs, seed, inlier_thresh, body_id=0, fill_gaps=fill_gaps)
    return track.as_trajectory()


def object_pose_world(camera: Trajectory, track: ObjectTrack) -> Trajectory:
    """World pose of a body: R_b = R_c^-1 R_v, T_b = R_c^-1 (T_v - T_c)."""
    poses = []
    for frame, V in zip(track.frames, track.poses):
        if not camera.has(frame):
            raise MissingCameraPose(frame)
        C = camera.pose_at(frame)
        Rc_inv = C.rotation.T
        poses.append(RigidMotion(Rc_inv @ V.rotation, Rc_inv @ (V.translation - C.translation)))
    return Trajectory(track.frames, poses, track.flagged)


# grouping of labelled raster cells into bodies


def moving_components(motion_labels, min_cells=MIN_COMPONENT_CELLS, object_labels=None, classes=None):
    """8-connected components of moving cells; small components are dropped.

    If ``classes`` is given only cells whose object label is in it count.
    Returns an int map (0 = none) with components renumbered 1..n by size.
    """
    mask = np.asarray(motion_labels) == MOVING
    if classes is not None:
        mask &= np.isin(object_labels, list(classes))
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return lab
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = [c for c in np.argsort(-sizes, kind="stable") if sizes[c] >= min_cells]
    out = np.zeros_like(lab)
    for new, c in enumerate(keep, start=1):
        out[lab == c] = new
    return out


def feature_groups(frame: FrameObservation, motion_labels, components, image_size, raster_size):
    """Per-feature component id (0 = static background, -1 = discarded)."""
    rows, cols, inside = raster_cells(frame.pixels, image_size, raster_size)
    group = np.full(len(frame), -1, dtype=int)
    r, c = rows[inside], cols[inside]
    comp = components[r, c]
    static = np.asarray(motion_labels)[r, c] == STATIC
    group[inside] = np.where(comp > 0, comp, np.where(static, 0, -1))
    return group


def link_bodies(frames, groups):
    """Assign persistent body ids to per-frame components by shared track ids.

    Returns ``{body_id: {frame: track_ids}}`` with ids starting at 1.
    """
    bodies = {}
    prev = {}
    next_id = 1
    for f, g in zip(frames, groups):
        current = {}
        for comp in sorted(set(int(x) for x in g if x > 0)):
            ids = f.track_ids[g == comp]
            best, overlap = None, 0
            for body, prev_ids in prev.items():
                n = len(np.intersect1d(ids, prev_ids))
                if n > overlap and body not in current:
                    best, overlap = body, n
            if best is None:
                best, next_id = next_id, next_id + 1
            current[best] = ids
            bodies.setdefault(best, {})[f.frame] = ids
        prev = current
    return bodies


def body_observations(frames, per_frame_ids, first=None, last=None):
    """Consecutive per-frame observations restricted to the given track ids."""
    keys = sorted(per_frame_ids)
    first = keys[0] if first is None else first
    last = keys[-1] if last is None else last
    lookup = {f.frame: f for f in frames}
    out = []
    for k in range(first, last + 1):
        f = lookup[k]
        ids = per_frame_ids.get(k, np.zeros(0, dtype=int))
        out.append(f.subset(np.isin(f.track_ids, ids)))
    return out


# trajectory text format: one pose per line, "frame tx ty tz qx qy qz qw"


def write_trajectory_text(traj: Trajectory, path):
    lines = []
    for frame, pose in zip(traj.frames, traj.poses):
        vals = list(pose.translation) + list(quat_xyzw(pose.rotation))
        lines.append(f"{frame} " + " ".join(serialize.format_float(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory_text(path) -> Trajectory:
    frames, poses = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"bad trajectory line: {line!r}")
            frames.append(int(parts[0]))
            v = np.array([float(x) for x in parts[1:]])
            poses.append(RigidMotion(rotation_from_quat_xyzw(v[3:]), v[:3]))
    return Trajectory(frames, poses)
