"""Synthetic world: a box-shaped "car" on a planar "road" seen by a moving stereo camera.

World frame is z-up with the road on ``z = 0``.  Camera paths hold
world-to-camera poses; object paths hold body-to-world poses.  Every point is
observed in every frame where it is in front of the camera, so track ids double
as correspondences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import serialize
from .errors import ConfigInvalid
from .geometry import CameraIntrinsics, RigidMotion, project_camera, rot_z

SCENE_FORMAT = "scene/1"
DEFAULT_CLASSES = ("road", "car", "vegetation", "sky")
MIN_VISIBLE_DEPTH = 0.1

# camera axes (x right, y down, z forward) expressed in a z-up world, heading +y
_CAM_TO_WORLD_BASE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def heading_vector(yaw):
    return np.array([-np.sin(yaw), np.cos(yaw), 0.0])


def camera_pose(position, yaw) -> RigidMotion:
    """World-to-camera pose of a level camera at ``position`` heading ``yaw``."""
    R_wc = rot_z(yaw) @ _CAM_TO_WORLD_BASE
    R = R_wc.T
    return RigidMotion(R, -R @ np.asarray(position, dtype=float))


def body_pose(position, yaw) -> RigidMotion:
    return RigidMotion(rot_z(yaw), position)


def arc_path(n_frames, start, speed, heading_deg=0.0, yaw_rate_deg=0.0, kind="body"):
    """Constant-speed, constant-turn-rate path in the ground plane."""
    pos = np.array(start, dtype=float)
    yaw = np.radians(heading_deg)
    rate = np.radians(yaw_rate_deg)
    make = camera_pose if kind == "camera" else body_pose
    poses = []
    for _ in range(n_frames):
        poses.append(make(pos, yaw))
        pos = pos + speed * heading_vector(yaw)
        yaw += rate
    return poses


def build_path(desc, n_frames, kind):
    """Path from a config dict: either explicit ``poses`` or arc parameters."""
    if "poses" in desc:
        poses = [RigidMotion.from_dict(p) for p in desc["poses"]]
        if len(poses) != n_frames:
            raise ConfigInvalid(f"{kind}Path", f"expected {n_frames} poses, got {len(poses)}")
        return poses
    return arc_path(
        n_frames,
        desc.get("start", [0.0, 0.0, 0.0]),
        float(desc.get("speed", 0.0)),
        float(desc.get("heading_deg", 0.0)),
        float(desc.get("yaw_rate_deg", 0.0)),
        kind=kind,
    )


DEFAULT_CAMERA_PATH = {"start": [0.0, 0.0, 1.5], "speed": 1.0, "yaw_rate_deg": 0.5}
DEFAULT_OBJECT_PATH = {"start": [2.5, 9.0, 0.0], "speed": 1.4, "yaw_rate_deg": 0.5}


@dataclass
class SceneConfig:
    camera_path: list
    object_path: list
    n_cube_points: int = 1000
    cube_side: float = 2.0
    n_ground_points: int = 2000
    ground_extent: float = 24.0
    ground_center: tuple = (0.0, 52.0)
    noise_sigma_points: float = 0.0
    noise_sigma_pixels: float = 0.0
    # road-point noise; None means the same as the car points
    noise_sigma_ground: float | None = None
    seed: int = 0
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
    )
    image_size: tuple = (640, 480)
    raster_size: tuple = (64, 48)
    class_names: tuple = DEFAULT_CLASSES

    def validate(self):
        if self.n_cube_points < 8:
            raise ConfigInvalid("nCubePoints", "must be >= 8")
        if self.n_ground_points < 0:
            raise ConfigInvalid("nGroundPoints", "must be >= 0")
        if self.cube_side <= 0:
            raise ConfigInvalid("cubeSide", "must be positive")
        for name, value in (
            ("noiseSigmaPoints", self.noise_sigma_points),
            ("noiseSigmaPixels", self.noise_sigma_pixels),
            ("noiseSigmaGround", self.ground_sigma),
        ):
            if not value >= 0:
                raise ConfigInvalid(name, "must be >= 0")
        if len(self.camera_path) != len(self.object_path):
            raise ConfigInvalid("objectPath", "camera and object paths differ in length")
        if len(self.camera_path) < 2:
            raise ConfigInvalid("cameraPath", "need at least 2 frames")
        for name in ("road", "car"):
            if name not in self.class_names:
                raise ConfigInvalid("classNames", f"missing class {name!r}")
        return self

    @property
    def ground_sigma(self):
        return self.noise_sigma_points if self.noise_sigma_ground is None else self.noise_sigma_ground

    @property
    def n_frames(self):
        return len(self.camera_path)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        n_frames = int(d.pop("nFrames", 30))
        cam = build_path(d.pop("cameraPath", DEFAULT_CAMERA_PATH), n_frames, "camera")
        obj = build_path(d.pop("objectPath", DEFAULT_OBJECT_PATH), n_frames, "body")
        keys = {
            "nCubePoints": ("n_cube_points", int),
            "cubeSide": ("cube_side", float),
            "nGroundPoints": ("n_ground_points", int),
            "groundExtent": ("ground_extent", float),
            "groundCenter": ("ground_center", tuple),
            "noiseSigmaPoints": ("noise_sigma_points", float),
            "noiseSigmaPixels": ("noise_sigma_pixels", float),
            "noiseSigmaGround": ("noise_sigma_ground", lambda v: None if v is None else float(v)),
            "seed": ("seed", int),
            "imageSize": ("image_size", tuple),
            "rasterSize": ("raster_size", tuple),
            "classNames": ("class_names", tuple),
        }
        kwargs = {}
        for key, value in d.items():
            if key == "intrinsics":
                kwargs["intrinsics"] = CameraIntrinsics.from_dict(value)
            elif key in keys:
                attr, conv = keys[key]
                try:
                    kwargs[attr] = conv(value)
                except (TypeError, ValueError) as exc:
                    raise ConfigInvalid(key, str(exc)) from None
            else:
                raise ConfigInvalid(key, "unknown scene field")
        return cls(camera_path=cam, object_path=obj, **kwargs).validate()

    def to_dict(self):
        return {
            "nFrames": self.n_frames,
            "cameraPath": {"poses": [p.to_dict() for p in self.camera_path]},
            "objectPath": {"poses": [p.to_dict() for p in self.object_path]},
            "nCubePoints": self.n_cube_points,
            "cubeSide": self.cube_side,
            "nGroundPoints": self.n_ground_points,
            "groundExtent": self.ground_extent,
            "groundCenter": list(self.ground_center),
            "noiseSigmaPoints": self.noise_sigma_points,
            "noiseSigmaPixels": self.noise_sigma_pixels,
            "noiseSigmaGround": self.noise_sigma_ground,
            "seed": self.seed,
            "intrinsics": self.intrinsics.to_dict(),
            "imageSize": list(self.image_size),
            "rasterSize": list(self.raster_size),
            "classNames": list(self.class_names),
        }


@dataclass
class FrameObservation:
    """Per-frame feature measurements; rows are aligned across the arrays.

    ``depths`` is NaN where no valid depth exists; ``flows`` is NaN on the
    last frame (no successor).
    """

    frame: int
    track_ids: np.ndarray
    pixels: np.ndarray
    depths: np.ndarray
    flows: np.ndarray
    points3d: np.ndarray

    def __len__(self):
        return len(self.track_ids)

    def subset(self, mask):
        return FrameObservation(
            self.frame,
            self.track_ids[mask],
            self.pixels[mask],
            self.depths[mask],
            self.flows[mask],
            self.points3d[mask],
        )

    def index_of(self, track_ids):
        lookup = {int(t): i for i, t in enumerate(self.track_ids)}
        return np.array([lookup.get(int(t), -1) for t in track_ids], dtype=int)

    def to_dict(self):
        return {
            "frame": self.frame,
            "trackIds": self.track_ids,
            "pixels": self.pixels,
            "depths": self.depths,
            "flows": self.flows,
            "points3d": self.points3d,
        }

    @classmethod
    def from_dict(cls, d):
        n = len(d["trackIds"])
        return cls(
            int(d["frame"]),
            np.array(d["trackIds"], dtype=int),
            serialize.as_float_array(d["pixels"], (n, 2)),
            serialize.as_float_array(d["depths"], (n,)),
            serialize.as_float_array(d["flows"], (n, 2)),
            serialize.as_float_array(d["points3d"], (n, 3)),
        )


@dataclass
class GroundTruthBundle:
    camera_poses: list
    object_poses: list
    points_local: np.ndarray  # body frame for car points, world frame for road points
    point_body: np.ndarray  # 0 = static world, 1 = the car
    point_class: np.ndarray  # index into class_names
    point_moving: np.ndarray
    ground_normal: np.ndarray
    class_names: tuple
    intrinsics: CameraIntrinsics
    image_size: tuple
    raster_size: tuple

    def world_points(self, frame):
        X = self.points_local.copy()
        car = self.point_body == 1
        X[car] = self.object_poses[frame].apply(self.points_local[car])
        return X

    def camera_points(self, frame):
        return self.camera_poses[frame].apply(self.world_points(frame))

    def object_reference_point(self):
        """Body-frame centroid of the car points (the point whose path is evaluated)."""
        return self.points_local[self.point_body == 1].mean(axis=0)

    def object_positions(self):
        c = self.object_reference_point()
        return np.array([P.apply(c) for P in self.object_poses])

    def camera_centers(self):
        return np.array([P.center for P in self.camera_poses])

    def label_rasters(self, frame):
        """Ground-truth (class, moving) rasters for one frame.

        A cell takes the label of the nearest-to-camera point projecting into
        it; empty cells are sky and static.
        """
        W, H = self.raster_size
        cls_map = np.full((H, W), self.class_names.index("sky") if "sky" in self.class_names else len(self.class_names) - 1)
        mov_map = np.zeros((H, W), dtype=int)
        Xc = self.camera_points(frame)
        vis = Xc[:, 2] > MIN_VISIBLE_DEPTH
        if not vis.any():
            return cls_map, mov_map
        idx = np.flatnonzero(vis)
        px = project_camera(self.intrinsics, Xc[idx])
        rows, cols, inside = raster_cells(px, self.image_size, self.raster_size)
        idx, rows, cols = idx[inside], rows[inside], cols[inside]
        order = np.argsort(-Xc[idx, 2], kind="stable")  # far first, near overwrites
        cls_map[rows[order], cols[order]] = self.point_class[idx[order]]
        mov_map[rows[order], cols[order]] = self.point_moving[idx[order]].astype(int)
        return cls_map, mov_map

    def to_dict(self):
        return {
            "cameraPoses": [p.to_dict() for p in self.camera_poses],
            "objectPoses": [p.to_dict() for p in self.object_poses],
            "pointsLocal": self.points_local,
            "pointBody": self.point_body,
            "pointClass": self.point_class,
            "pointMoving": self.point_moving.astype(int),
            "groundNormal": self.ground_normal,
            "classNames": list(self.class_names),
            "intrinsics": self.intrinsics.to_dict(),
            "imageSize": list(self.image_size),
            "rasterSize": list(self.raster_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [RigidMotion.from_dict(p) for p in d["cameraPoses"]],
            [RigidMotion.from_dict(p) for p in d["objectPoses"]],
            serialize.as_float_array(d["pointsLocal"]).reshape(-1, 3),
            np.array(d["pointBody"], dtype=int),
            np.array(d["pointClass"], dtype=int),
            np.array(d["pointMoving"], dtype=bool),
            np.array(d["groundNormal"], dtype=float),
            tuple(d["classNames"]),
            CameraIntrinsics.from_dict(d["intrinsics"]),
            tuple(d["imageSize"]),
            tuple(d["rasterSize"]),
        )


def raster_cells(pixels, image_size, raster_size):
    """Nearest-neighbour cell indices of pixels on the coarse label grid."""
    img_w, img_h = image_size
    W, H = raster_size
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    finite = np.all(np.isfinite(pixels), axis=1)
    safe = np.where(finite[:, None], pixels, -1.0)
    cols = np.floor(safe[:, 0] * W / img_w).astype(int)
    rows = np.floor(safe[:, 1] * H / img_h).astype(int)
    inside = finite & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    return rows, cols, inside


def sample_cube_surface(n, side, rng):
    """Stratified uniform samples on the six faces of a cube resting on z = 0."""
    counts = np.full(6, n // 6)
    counts[: n % 6] += 1
    h = side / 2.0
    faces = []
    for face, m in enumerate(counts):
        uv = rng.uniform(-h, h, size=(m, 2))
        axis, sign = divmod(face, 2)
        pts = np.empty((m, 3))
        others = [a for a in range(3) if a != axis]
        pts[:, others[0]] = uv[:, 0]
        pts[:, others[1]] = uv[:, 1]
        pts[:, axis] = h if sign else -h
        faces.append(pts)
    pts = np.concatenate(faces)
    pts[:, 2] += h
    return pts


def _in_view(K, Xc, image_size):
    """In front of the camera and projecting inside the image."""
    front = Xc[:, 2] > MIN_VISIBLE_DEPTH
    out = np.zeros(len(Xc), dtype=bool)
    uv = project_camera(K, Xc[front])
    w, h = image_size
    out[front] = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return out


def generate(config: SceneConfig):
    """Simulate the scene; returns ``(GroundTruthBundle, [FrameObservation])``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    cube = sample_cube_surface(config.n_cube_points, config.cube_side, rng)
    half = config.ground_extent / 2.0
    ground = np.zeros((config.n_ground_points, 3))
    ground[:, 0] = config.ground_center[0] + rng.uniform(-half, half, config.n_ground_points)
    ground[:, 1] = config.ground_center[1] + rng.uniform(-half, half, config.n_ground_points)

    classes = tuple(config.class_names)
    n_car, n_road = len(cube), len(ground)
    moving = any(not p.allclose(config.object_path[0], atol=0.0) for p in config.object_path)
    gt = GroundTruthBundle(
        camera_poses=list(config.camera_path),
        object_poses=list(config.object_path),
        points_local=np.concatenate([cube, ground]),
        point_body=np.concatenate([np.ones(n_car, int), np.zeros(n_road, int)]),
        point_class=np.concatenate(
            [np.full(n_car, classes.index("car")), np.full(n_road, classes.index("road"))]
        ),
        point_moving=np.concatenate([np.full(n_car, moving), np.zeros(n_road, bool)]),
        ground_normal=np.array([0.0, 0.0, 1.0]),
        class_names=classes,
        intrinsics=config.intrinsics,
        image_size=tuple(config.image_size),
        raster_size=tuple(config.raster_size),
    )

    n_pts = n_car + n_road
    sigma3 = np.concatenate([np.full(n_car, config.noise_sigma_points), np.full(n_road, config.ground_sigma)])
    K = config.intrinsics
    track_ids = np.arange(n_pts)
    true_cam = [gt.camera_points(k) for k in range(config.n_frames)]
    frames = []
    for k in range(config.n_frames):
        Xc = true_cam[k]
        vis = _in_view(K, Xc, config.image_size)
        noise3 = rng.normal(size=(n_pts, 3)) * sigma3[:, None]
        noise_px = rng.normal(size=(n_pts, 2)) * config.noise_sigma_pixels
        noise_flow = rng.normal(size=(n_pts, 2)) * config.noise_sigma_pixels
        idx = np.flatnonzero(vis)
        true_px = project_camera(K, Xc[idx])
        pts3 = Xc[idx] + noise3[idx]
        depths = pts3[:, 2].copy()
        depths[depths <= 0] = np.nan
        flows = np.full((len(idx), 2), np.nan)
        if k + 1 < config.n_frames:
            nxt = true_cam[k + 1][idx]
            ok = nxt[:, 2] > MIN_VISIBLE_DEPTH
            flows[ok] = project_camera(K, nxt[ok]) - true_px[ok] + noise_flow[idx][ok]
        frames.append(
            FrameObservation(
                frame=k,
                track_ids=track_ids[idx],
                pixels=true_px + noise_px[idx],
                depths=depths,
                flows=flows,
                points3d=pts3,
            )
        )
    return gt, frames


@dataclass
class SceneBundle:
    config: SceneConfig
    ground_truth: GroundTruthBundle
    frames: list

    def to_dict(self):
        return {
            "format": SCENE_FORMAT,
            "config": self.config.to_dict(),
            "groundTruth": self.ground_truth.to_dict(),
            "frames": [f.to_dict() for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != SCENE_FORMAT:
            raise ValueError(f"not a {SCENE_FORMAT} document")
        return cls(
            SceneConfig.from_dict(d["config"]),
            GroundTruthBundle.from_dict(d["groundTruth"]),
            [FrameObservation.from_dict(f) for f in d["frames"]],
        )

    def save(self, path):
        serialize.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(serialize.load(path))


def corrupt_unaries(gt: GroundTruthBundle, flip_rate, seed, confidence=0.6):
    """Object-class unaries derived from ground truth with seeded label confusion.

    Each raster cell keeps its true class with probability ``1 - flip_rate``
    and otherwise switches to a uniformly drawn wrong class; the unary puts
    ``-log(confidence)`` on the (possibly wrong) observed class and spreads the
    rest evenly.  Returns one ``UnaryField`` per frame with uninformative
    motion unaries.
    """
    from .segmentation import UnaryField

    if not 0.0 <= flip_rate < 1.0:
        raise ValueError("flip_rate must lie in [0, 1)")
    L = len(gt.class_names)
    if not 1.0 / L < confidence < 1.0:
        raise ValueError("confidence must lie in (1/L, 1)")
    rng = np.random.default_rng(seed)
    lo = -np.log(confidence)
    hi = -np.log((1.0 - confidence) / (L - 1))
    fields = []
    for k in range(len(gt.camera_poses)):
        cls_map, _ = gt.label_rasters(k)
        flip = rng.random(cls_map.shape) < flip_rate
        offset = rng.integers(1, L, size=cls_map.shape)
        observed = np.where(flip, (cls_map + offset) % L, cls_map)
        obj = np.full(cls_map.shape + (L,), hi)
        np.put_along_axis(obj, observed[..., None], lo, axis=-1)
        fields.append(UnaryField(obj, np.zeros(cls_map.shape + (2,))))
    return fields


def with_overrides(config: SceneConfig, **changes):
    return replace(config, **changes).validate()
