"""End-to-end experiment driver: simulate, segment, initialize, refine, evaluate.

Every stage reads its inputs from and writes its outputs to the run
directory, so a stage can be rerun on its own and gives the same result as a
fused run.
"""
from __future__ import annotations

import copy
import json
import logging
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import serialize
from .bundle import (
    BAProblem,
    Observations,
    SamplingPlan,
    SolverConfig,
    fit_ground_normal,
    initial_bounds,
    load_snapshot,
    sample_pairs,
    save_snapshot,
    solve,
)
from .errors import ConfigInvalid
from .evaluation import TrajectoryReport, ate, compare_runs, comparison_csv
from .geometry import RigidMotion, compose, ransac_registration
from .scene import SceneBundle, SceneConfig, corrupt_unaries, generate, raster_cells
from .segmentation import (
    DEFAULT_COMPATIBILITY,
    STATIC,
    CompatibilityMatrix,
    PairwiseParams,
    UnaryField,
    decode,
    default_flow_covariance,
    labeling_to_dict,
    mean_field_infer,
    motion_unary,
    raster_features,
    render_ppm,
)
from .trajectory import (
    ObjectTrack,
    Trajectory,
    feature_groups,
    init_body_trajectory,
    init_camera_trajectory,
    link_bodies,
    moving_components,
    object_pose_world,
    write_trajectory_text,
)

log = logging.getLogger("semslam")

CONSTRAINT_FAMILIES = {"NC": ("NC1", "NC2"), "TC": ("TC1", "TC2"), "BC": ("BC1", "BC2", "BC3", "BC4")}


# configuration


@dataclass
class SegmentationSettings:
    pairwise: PairwiseParams = field(default_factory=PairwiseParams)
    compatibility: dict = field(default_factory=lambda: dict(DEFAULT_COMPATIBILITY))
    max_iters: int = 10
    tol: float = 1e-4
    flip_rate: float = 0.1
    confidence: float = 0.6
    tau: float = 4.0
    sigma_flow: float = 1.0
    sigma_pred: float = 5.0
    min_cells: int = 20

    _KEYS = {"maxIters": "max_iters", "tol": "tol", "flipRate": "flip_rate", "confidence": "confidence",
             "tau": "tau", "sigmaFlow": "sigma_flow", "sigmaPred": "sigma_pred", "minCells": "min_cells"}
    _PAIRWISE = {"wSmooth": "w_smooth", "thetaGamma": "theta_gamma", "wAppearance": "w_appearance",
                 "thetaAlpha": "theta_alpha", "thetaBeta": "theta_beta", "wMotion": "w_motion",
                 "thetaFlow": "theta_flow", "radius": "radius"}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for k, v in d.items():
            if k == "pairwise":
                unknown = set(v) - set(cls._PAIRWISE)
                if unknown:
                    raise ConfigInvalid(f"segmentation.pairwise.{sorted(unknown)[0]}", "unknown option")
                kw["pairwise"] = PairwiseParams(**{cls._PAIRWISE[a]: float(b) for a, b in v.items()})
            elif k == "compatibility":
                kw["compatibility"] = {a: [float(x) for x in b] for a, b in v.items()}
            elif k in cls._KEYS:
                kw[cls._KEYS[k]] = v
            else:
                raise ConfigInvalid(f"segmentation.{k}", "unknown option")
        out = cls(**kw)
        if not 0 <= out.flip_rate < 1:
            raise ConfigInvalid("segmentation.flipRate", "must lie in [0, 1)")
        if out.tau <= 0 or out.sigma_flow < 0 or out.sigma_pred < 0 or out.sigma_flow + out.sigma_pred <= 0:
            raise ConfigInvalid("segmentation.tau", "tau and flow sigmas must be positive")
        return out

    def to_dict(self):
        d = {k: getattr(self, v) for k, v in self._KEYS.items()}
        d["pairwise"] = {k: getattr(self.pairwise, v) for k, v in self._PAIRWISE.items()}
        d["compatibility"] = self.compatibility
        return d


@dataclass
class ExperimentConfig:
    seed: int
    scene: SceneConfig
    name: str = "run"
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    motion_segmentation: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    constraints: dict = field(default_factory=dict)
    ransac_thresh: float | None = None
    ground_method: str = "lsq"
    ground_hypotheses: int = 3
    static_solver: SolverConfig | None = None

    @classmethod
    def from_dict(cls, d, seed=None):
        d = dict(d)
        known = {"name", "seed", "scene", "segmentation", "motionSegmentation", "solver", "sampling",
                 "constraints", "ransacThreshold", "groundNormal", "staticSolver"}
        for k in d:
            if k not in known:
                raise ConfigInvalid(k, "unknown option")
        if seed is None:
            seed = d.get("seed")
        if seed is None:
            raise ConfigInvalid("seed", "a seed is required")
        seed = int(seed)
        scene_d = dict(d.get("scene", {}))
        scene_d.setdefault("seed", seed)
        try:
            scene = SceneConfig.from_dict(scene_d)
        except ConfigInvalid as e:
            raise ConfigInvalid(f"scene.{e.field}", _reason(e)) from None
        solver_d = dict(d.get("solver", {}))
        if "delta" not in solver_d:
            solver_d["delta"] = [1.2 * scene.cube_side] * 3
        try:
            solver = SolverConfig.from_dict(solver_d)
            static_solver = SolverConfig.from_dict(d["staticSolver"]) if "staticSolver" in d else None
        except ConfigInvalid as e:
            raise ConfigInvalid(f"solver.{e.field}", _reason(e)) from None
        samp = dict(d.get("sampling", {}))
        samp.setdefault("seed", seed)
        try:
            sampling = SamplingPlan.from_dict(samp)
        except ConfigInvalid as e:
            raise ConfigInvalid(f"sampling.{e.field}", _reason(e)) from None
        constraints = parse_constraints(d.get("constraints", {}))
        gn = d.get("groundNormal", {})
        method = gn.get("method", "lsq")
        if method not in ("lsq", "ransacTopM"):
            raise ConfigInvalid("groundNormal.method", "must be lsq or ransacTopM")
        thresh = d.get("ransacThreshold")
        if thresh is not None and not float(thresh) > 0:
            raise ConfigInvalid("ransacThreshold", "must be positive")
        return cls(
            seed=seed,
            scene=scene,
            name=str(d.get("name", "run")),
            segmentation=SegmentationSettings.from_dict(d.get("segmentation", {})),
            motion_segmentation=bool(d.get("motionSegmentation", True)),
            solver=solver,
            sampling=sampling,
            constraints=constraints,
            ransac_thresh=None if thresh is None else float(thresh),
            ground_method=method,
            ground_hypotheses=int(gn.get("m", 3)),
            static_solver=static_solver,
        )

    def to_dict(self):
        d = {
            "name": self.name,
            "seed": self.seed,
            "scene": self.scene.to_dict(),
            "segmentation": self.segmentation.to_dict(),
            "motionSegmentation": self.motion_segmentation,
            "solver": self.solver.to_dict(),
            "sampling": self.sampling.to_dict(),
            "constraints": {v: True for v in self.constraints.values()},
            "ransacThreshold": self.ransac_thresh,
            "groundNormal": {"method": self.ground_method, "m": self.ground_hypotheses},
        }
        if self.static_solver is not None:
            d["staticSolver"] = self.static_solver.to_dict()
        return d

    def inlier_thresh(self, sigma):
        if self.ransac_thresh is not None:
            return self.ransac_thresh
        # 3 sigma of the difference of two noisy 3D measurements, with a floor
        return max(0.05, 3.0 * np.sqrt(2.0) * sigma)

    @property
    def static_thresh(self):
        return self.inlier_thresh(self.scene.ground_sigma)

    @property
    def body_thresh(self):
        return self.inlier_thresh(self.scene.noise_sigma_points)

    @property
    def nc_variant(self):
        return self.constraints.get("NC")

    @property
    def tc_variant(self):
        return self.constraints.get("TC")

    @property
    def bc_variant(self):
        return self.constraints.get("BC")


def _reason(err):
    return str(err).split(": ", 1)[-1]


def parse_constraints(d):
    """Flag dict such as ``{"NC1": true, "TC2": true}`` -> ``{"NC": "NC1", "TC": "TC2"}``."""
    out = {}
    for key, value in d.items():
        fam = next((f for f, vs in CONSTRAINT_FAMILIES.items() if key in vs), None)
        if fam is None:
            raise ConfigInvalid(f"constraints.{key}", "unknown constraint family")
        if not isinstance(value, bool):
            raise ConfigInvalid(f"constraints.{key}", "flags must be true or false")
        if not value:
            continue
        if fam in out:
            raise ConfigInvalid(f"constraints.{fam}", f"both {out[fam]} and {key} enabled")
        out[fam] = key
    return out


def load_config(path, seed=None):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigInvalid("config", f"invalid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigInvalid("config", "top level must be an object")
    return ExperimentConfig.from_dict(d, seed=seed)


# artifacts


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        names = {
            "config": "config.json",
            "scene": "scene.json",
            "labels": "labels",
            "assignment": "assignment.json",
            "init": "init.json",
            "ba_static": "ba_static.json",
            "cost_static": "cost_static.csv",
            "refined": "refined.json",
            "report": "report.json",
            "plots": "plots",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]

    def ba_body(self, body):
        return self.root / f"ba_body_{body}.json"

    def cost_body(self, body):
        return self.root / f"cost_body_{body}.csv"


def _event(stage, level=logging.INFO, **kw):
    if log.isEnabledFor(level):
        log.log(level, json.dumps({"stage": stage, **kw}, sort_keys=True, default=float))


class _Timer:
    def __init__(self, stage):
        self.stage = stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        _event(self.stage, event="start")
        return self

    def __exit__(self, *exc):
        if exc[0] is None:
            _event(self.stage, event="done", wallTime=round(time.perf_counter() - self.t0, 3))
        return False


# stages


_SCENES = {}


def _load_scene(path):
    """SceneBundle.load with a small in-process memo keyed on the file's stat.

    Every stage re-reads scene.json; ablations would otherwise parse the same
    bundle once per stage and configuration.
    """
    st = Path(path).stat()
    key = (str(Path(path).resolve()), st.st_mtime_ns, st.st_size)
    if key not in _SCENES:
        if len(_SCENES) >= 4:
            _SCENES.pop(next(iter(_SCENES)))
        _SCENES[key] = SceneBundle.load(path)
    return copy.deepcopy(_SCENES[key])


def stage_simulate(cfg: ExperimentConfig, out):
    p = RunPaths(out)
    p.root.mkdir(parents=True, exist_ok=True)
    with _Timer("simulate"):
        serialize.dump(cfg.to_dict(), p.config)
        gt, frames = generate(cfg.scene)
        SceneBundle(cfg.scene, gt, frames).save(p.scene)
    return p.scene


def _frame_motion(a, b, thresh, seed):
    """Camera motion between consecutive frames from all features (RANSAC rejects movers)."""
    common, ia, ib = np.intersect1d(a.track_ids, b.track_ids, return_indices=True)
    P, Q = a.points3d[ia], b.points3d[ib]
    ok = np.all(np.isfinite(P), axis=1) & np.all(np.isfinite(Q), axis=1)
    M, _ = ransac_registration(P[ok], Q[ok], inlier_thresh=thresh, seed=seed)
    return M


def _majority(labels):
    vals, counts = np.unique(labels, return_counts=True)
    return int(vals[np.argmax(counts)])  # ties -> lowest label


def stage_segment(cfg: ExperimentConfig, out):
    """Per-frame CRF labelling, then grouping of tracks into static scene and bodies."""
    p = RunPaths(out)
    bundle = _load_scene(p.scene)
    sc, gt, frames = bundle.config, bundle.ground_truth, bundle.frames
    n_tracks = len(gt.point_body)
    with _Timer("segment"):
        if not cfg.motion_segmentation:
            assignment = {"motionSegmentation": False, "trackBody": np.zeros(n_tracks, dtype=int),
                          "trackClass": np.full(n_tracks, -1, dtype=int), "bodies": []}
            serialize.dump(assignment, p.assignment)
            return p.assignment
        seg = cfg.segmentation
        p.labels.mkdir(exist_ok=True)
        unaries = corrupt_unaries(gt, seg.flip_rate, cfg.seed, seg.confidence)
        compat = CompatibilityMatrix.from_mapping(gt.class_names, seg.compatibility)
        cov = default_flow_covariance(seg.sigma_flow, seg.sigma_pred)
        labelings = []
        for k, f in enumerate(frames):
            if k + 1 < len(frames):
                M = _frame_motion(f, frames[k + 1], cfg.static_thresh, cfg.seed + k)
                mu = motion_unary(f, M, sc.intrinsics, cov, sc.image_size, sc.raster_size, seg.tau)
            else:
                mu = np.zeros(unaries[k].motion_unary.shape)
            u = UnaryField(unaries[k].object_unary, mu)
            app, flow = raster_features(f, sc.image_size, sc.raster_size)
            marg = mean_field_infer(u, compat, seg.pairwise, app, flow, seg.max_iters, seg.tol)
            lab = decode(marg)
            labelings.append(lab)
            serialize.dump({"format": "labels/1", **labeling_to_dict(k, lab, marg)},
                           p.labels / f"frame_{k:03d}.json")
            (p.labels / f"frame_{k:03d}.ppm").write_bytes(render_ppm(lab, gt.class_names))
        groups = []
        for f, lab in zip(frames, labelings):
            comp = moving_components(lab.motion_labels, seg.min_cells)
            groups.append(feature_groups(f, lab.motion_labels, comp, sc.image_size, sc.raster_size))
        bodies = link_bodies(frames, groups)
        # per-frame body membership, then a majority vote per track
        votes = [[] for _ in range(n_tracks)]
        classes = [[] for _ in range(n_tracks)]
        for f, g, lab in zip(frames, groups, labelings):
            frame_body = np.where(g > 0, -1, g)  # static 0, discarded -1, body filled below
            for body, per_frame in bodies.items():
                ids = per_frame.get(f.frame)
                if ids is not None:
                    frame_body[np.isin(f.track_ids, ids)] = body
            rows, cols, inside = raster_cells(f.pixels, sc.image_size, sc.raster_size)
            for i in np.flatnonzero(inside):
                t = int(f.track_ids[i])
                if frame_body[i] >= 0:
                    votes[t].append(int(frame_body[i]))
                classes[t].append(int(lab.object_labels[rows[i], cols[i]]))
        track_body = np.array([_majority(v) if v else -1 for v in votes], dtype=int)
        track_class = np.array([_majority(c) if c else -1 for c in classes], dtype=int)
        kept = sorted(b for b in bodies if np.sum(track_body == b) >= 3)
        track_body[~np.isin(track_body, [0] + kept)] = -1
        assignment = {"motionSegmentation": True, "trackBody": track_body, "trackClass": track_class,
                      "bodies": kept}
        serialize.dump(assignment, p.assignment)
        _event("segment", bodies=kept, static=int(np.sum(track_body == 0)),
               moving=int(np.sum(track_body > 0)))
    return p.assignment


def _load_assignment(p):
    d = serialize.load(p.assignment)
    return np.array(d["trackBody"], dtype=int), np.array(d["trackClass"], dtype=int), [int(b) for b in d["bodies"]]


def _restrict(frames, track_body, body):
    return [f.subset(track_body[f.track_ids] == body) for f in frames]


def _body_span(frames, track_body, body):
    present = [f.frame for f in frames if np.any(track_body[f.track_ids] == body)]
    return present[0], present[-1]


def _track_residuals(frames, motion, n_tracks):
    """Median distance of each track's observations from its first one carried by ``motion``.

    ``motion`` maps frame -> pose taking the model's reference coordinates to
    camera coordinates at that frame.  Tracks seen once get NaN.
    """
    first_frame = np.full(n_tracks, -1)
    x0 = np.zeros((n_tracks, 3))
    res = np.full((n_tracks, len(frames)), np.nan)
    for col, f in enumerate(frames):
        if f.frame not in motion:
            continue
        valid = np.all(np.isfinite(f.points3d), axis=1)
        ids, X = f.track_ids[valid], f.points3d[valid]
        new = first_frame[ids] < 0
        first_frame[ids[new]] = f.frame
        x0[ids[new]] = X[new]
        seen = ~new
        for k0 in np.unique(first_frame[ids[seen]]):
            sel = seen & (first_frame[ids] == k0)
            M = compose(motion[f.frame], motion[int(k0)].inverse())
            res[ids[sel], col] = np.linalg.norm(M.apply(x0[ids[sel]]) - X[sel], axis=1)
    out = np.full(n_tracks, np.nan)
    has = np.any(np.isfinite(res), axis=1)
    out[has] = np.nanmedian(res[has], axis=1)
    return out


def verify_tracks(frames, track_body, camera: Trajectory, tracks):
    """Move each labelled track to the rigid motion (camera or a body) that explains it best.

    Labels decide which features seed each motion; the per-track check then
    catches background seen through a moving region and vice versa.
    """
    models = {0: dict(zip(camera.frames, camera.poses))}
    for tr in tracks:
        models[tr.body_id] = dict(zip(tr.frames, tr.poses))
    labelled = track_body >= 0
    order = sorted(models)
    scores = np.stack([_track_residuals(frames, models[b], len(track_body)) for b in order])
    scores[:, ~labelled] = np.nan
    decided = np.any(np.isfinite(scores), axis=0)
    out = track_body.copy()
    # ties and NaNs resolve to the lowest model id
    out[decided] = np.array(order)[np.nanargmin(scores[:, decided], axis=0)]
    return out


def stage_init(cfg: ExperimentConfig, out):
    p = RunPaths(out)
    bundle = _load_scene(p.scene)
    frames = bundle.frames
    track_body, _, bodies = _load_assignment(p)
    with _Timer("init"):
        camera = init_camera_trajectory(_restrict(frames, track_body, 0), cfg.seed, cfg.static_thresh)
        tracks = []
        for body in bodies:
            first, last = _body_span(frames, track_body, body)
            obs = _restrict(frames[first:last + 1], track_body, body)
            tracks.append(init_body_trajectory(obs, cfg.seed, cfg.body_thresh, body_id=body, fill_gaps=True))
        verified = verify_tracks(frames, track_body, camera, tracks) if tracks else track_body
        out_bodies = []
        for track in tracks:
            world = object_pose_world(camera, track)
            out_bodies.append({"track": track.to_dict(), "world": world.to_dict()})
            _event("init", body=track.body_id, frames=len(track.poses), flagged=track.flagged,
                   tracks=int(np.sum(verified == track.body_id)))
        _event("init", relabelled=int(np.sum(verified != track_body)))
        serialize.dump({"camera": camera.to_dict(), "bodies": out_bodies, "trackBody": verified}, p.init)
        write_trajectory_text(camera, p.root / "camera_init.txt")
    return p.init


def _first_observations(frames, ids):
    """For each track id, (frame index, row) of its first valid 3D observation."""
    first = {}
    for f in frames:
        valid = np.all(np.isfinite(f.points3d), axis=1)
        for row in np.flatnonzero(valid & np.isin(f.track_ids, ids)):
            first.setdefault(int(f.track_ids[row]), (f.frame, row))
    return first


def _observations(frames, id_to_point, pose_of_frame, prefix_of_frame=None):
    pose2, pt2, px, pre2 = [], [], [], []
    pose3, pt3, m3, pre3 = [], [], [], []
    for f in frames:
        if f.frame not in pose_of_frame:
            continue
        rows = [i for i, t in enumerate(f.track_ids) if int(t) in id_to_point]
        if not rows:
            continue
        rows = np.array(rows)
        pts = np.array([id_to_point[int(t)] for t in f.track_ids[rows]])
        pose = pose_of_frame[f.frame]
        pre = -1 if prefix_of_frame is None else prefix_of_frame[f.frame]
        okp = np.all(np.isfinite(f.pixels[rows]), axis=1)
        pose2 += [pose] * int(okp.sum())
        pt2 += list(pts[okp])
        px.append(f.pixels[rows][okp])
        pre2 += [pre] * int(okp.sum())
        ok3 = np.all(np.isfinite(f.points3d[rows]), axis=1)
        pose3 += [pose] * int(ok3.sum())
        pt3 += list(pts[ok3])
        m3.append(f.points3d[rows][ok3])
        pre3 += [pre] * int(ok3.sum())
    o2 = Observations(pose2, pt2, np.concatenate(px) if px else np.zeros((0, 2)), pre2)
    o3 = Observations(pose3, pt3, np.concatenate(m3) if m3 else np.zeros((0, 3)), pre3)
    return o2, o3


def build_static_problem(bundle, track_body, camera: Trajectory):
    frames = bundle.frames
    ids = np.flatnonzero(track_body == 0)
    first = _first_observations(frames, ids)
    ids = np.array(sorted(first), dtype=int)
    id_to_point = {int(t): i for i, t in enumerate(ids)}
    lookup = {f.frame: f for f in frames}
    X = np.zeros((len(ids), 3))
    for t, i in id_to_point.items():
        k, row = first[t]
        X[i] = camera.pose_at(k).inverse().apply(lookup[k].points3d[row][None])[0]
    pose_of_frame = {fr: i for i, fr in enumerate(camera.frames)}
    o2, o3 = _observations(frames, id_to_point, pose_of_frame)
    problem = BAProblem(bundle.config.intrinsics, list(camera.poses), X, gauge=0,
                        obs2d=o2, obs3d=o3, pose_frames=list(camera.frames))
    return problem, ids


def build_object_problem(cfg: ExperimentConfig, bundle, track_body, body, camera: Trajectory,
                         track: ObjectTrack, normals):
    """Body poses re-anchored at the centroid of the first-frame features."""
    frames = [f for f in bundle.frames if track.first_frame <= f.frame <= track.frames[-1]]
    ids = np.flatnonzero(track_body == body)
    first_obs = frames[0].subset(np.isin(frames[0].track_ids, ids))
    valid = np.all(np.isfinite(first_obs.points3d), axis=1)
    anchor_ids = first_obs.track_ids[valid]
    c = first_obs.points3d[valid].mean(axis=0)
    shift = RigidMotion(np.eye(3), c)
    world = object_pose_world(camera, track)
    poses = [compose(B, shift) for B in world.poses]
    first = _first_observations(frames, ids)
    ids = np.array(sorted(first), dtype=int)
    id_to_point = {int(t): i for i, t in enumerate(ids)}
    lookup = {f.frame: f for f in frames}
    frame_index = {fr: i for i, fr in enumerate(track.frames)}
    X = np.zeros((len(ids), 3))
    for t, i in id_to_point.items():
        k, row = first[t]
        to_body = poses[frame_index[k]].inverse()
        X[i] = to_body.apply(camera.pose_at(k).inverse().apply(lookup[k].points3d[row][None]))[0]
    prefixes = [camera.pose_at(fr) for fr in track.frames]
    o2, o3 = _observations(frames, id_to_point, frame_index, frame_index)
    pairs = None
    if cfg.bc_variant is not None:
        plan = replace(cfg.sampling, seed=cfg.sampling.seed + body)
        pairs = np.array(sample_pairs(X, plan), dtype=int)
    flagged = [frame_index[fr] for fr in track.flagged if fr in frame_index]
    problem = BAProblem(
        bundle.config.intrinsics, poses, X, gauge=0, prefixes=prefixes, obs2d=o2, obs3d=o3,
        track=list(range(len(poses))), flagged=flagged,
        nc_variant=cfg.nc_variant, normals=None if cfg.nc_variant is None else normals,
        tc_variant=cfg.tc_variant, bc_variant=cfg.bc_variant, pairs=pairs,
        pose_frames=list(track.frames),
    )
    if problem.bc_variant is not None:
        problem.bounds = initial_bounds(problem, cfg.solver.delta)
    return problem, ids, anchor_ids


def _ground_normals(cfg, static_problem, static_ids, track_class, class_names):
    """Road-plane normal(s) in the reconstruction frame (the first camera's)."""
    pts = static_problem.points[track_class[static_ids] == class_names.index("road")]
    up = np.array([0.0, -1.0, 0.0])  # camera y points down
    if len(pts) < 3:
        # no road labels survived: take the dominant plane of the static scene
        _event("refine", level=logging.WARNING, groundFallback=True, roadPoints=int(len(pts)))
        top = fit_ground_normal(static_problem.points, "ransacTopM", seed=cfg.seed, m=cfg.ground_hypotheses,
                                inlier_thresh=cfg.static_thresh, reference=up)
        return top[:1] if cfg.nc_variant == "NC1" else top
    if cfg.ground_method == "lsq" and cfg.nc_variant == "NC1":
        return fit_ground_normal(pts, "lsq", reference=up)[None]
    top = fit_ground_normal(pts, "ransacTopM", seed=cfg.seed, m=cfg.ground_hypotheses,
                            inlier_thresh=cfg.static_thresh, reference=up)
    if cfg.nc_variant == "NC1":
        return top[:1]
    if cfg.ground_method == "lsq":
        # the least-squares normal leads, the RANSAC runners-up follow
        return np.vstack([fit_ground_normal(pts, "lsq", reference=up), top[1:]])
    return top


def stage_refine(cfg: ExperimentConfig, out, reuse_static=False):
    """Static-scene refinement, then one object refinement per body on the refined cameras.

    With ``reuse_static`` an existing ``ba_static.json`` in the run directory
    is taken as the static result instead of being recomputed.
    """
    p = RunPaths(out)
    bundle = _load_scene(p.scene)
    _, track_class, _ = _load_assignment(p)
    init = serialize.load(p.init)
    track_body = np.array(init["trackBody"], dtype=int)
    camera0 = Trajectory.from_dict(init["camera"])
    with _Timer("refine"):
        static_cfg = cfg.static_solver or cfg.solver
        problem, static_ids = build_static_problem(bundle, track_body, camera0)
        if reuse_static and p.ba_static.exists():
            refined = load_snapshot(p.ba_static)[0]
        else:
            refined, report = solve(problem, static_cfg,
                                    callback=lambda it: _event("refine", logging.DEBUG, block="static", **it))
            save_snapshot(p.ba_static, refined, report, static_cfg)
            report.write_csv(p.cost_static)
        camera = Trajectory(camera0.frames, refined.poses, camera0.flagged)
        out_bodies = []
        for entry in init["bodies"]:
            track = ObjectTrack.from_dict(entry["track"])
            normals = None
            if cfg.nc_variant is not None:
                normals = _ground_normals(cfg, refined, static_ids, track_class, bundle.ground_truth.class_names)
            obj, ids, anchor = build_object_problem(cfg, bundle, track_body, track.body_id, camera, track, normals)
            obj_ref, obj_rep = solve(obj, cfg.solver,
                                     callback=lambda it, b=track.body_id: _event("refine", logging.DEBUG, block=f"body{b}", **it))
            save_snapshot(p.ba_body(track.body_id), obj_ref, obj_rep, cfg.solver)
            obj_rep.write_csv(p.cost_body(track.body_id))
            world = Trajectory(track.frames, obj_ref.poses, track.flagged)
            out_bodies.append({"bodyId": track.body_id, "world": world.to_dict(), "anchorTrackIds": anchor,
                               "initial": Trajectory(track.frames, obj.poses, track.flagged).to_dict()})
            write_trajectory_text(world, p.root / f"body_{track.body_id}.txt")
        serialize.dump({"camera": camera.to_dict(), "bodies": out_bodies}, p.refined)
        write_trajectory_text(camera, p.root / "camera.txt")
    return p.refined


def object_reference(gt, anchor_ids, frames):
    """Ground-truth world positions of the centroid of the anchor features."""
    c = gt.points_local[np.asarray(anchor_ids, dtype=int)].mean(axis=0)
    return Trajectory(frames, [RigidMotion(O.rotation, O.apply(c[None])[0]) for O in
                               (gt.object_poses[k] for k in frames)])


def stage_evaluate(cfg: ExperimentConfig, out):
    p = RunPaths(out)
    bundle = _load_scene(p.scene)
    gt = bundle.ground_truth
    refined = serialize.load(p.refined)
    init = serialize.load(p.init)
    with _Timer("evaluate"):
        frames = list(range(len(gt.camera_poses)))
        cam_ref = Trajectory(frames, gt.camera_poses)
        report = {
            "name": cfg.name,
            "camera": ate(Trajectory.from_dict(refined["camera"]), cam_ref, use_centers=True).to_dict(),
            "cameraInit": ate(Trajectory.from_dict(init["camera"]), cam_ref, use_centers=True).to_dict(),
            "bodies": {},
        }
        for entry in refined["bodies"]:
            est = Trajectory.from_dict(entry["world"])
            ref = object_reference(gt, entry["anchorTrackIds"], est.frames)
            report["bodies"][str(entry["bodyId"])] = {
                "refined": ate(est, ref).to_dict(),
                "initial": ate(Trajectory.from_dict(entry["initial"]), ref).to_dict(),
            }
        serialize.dump(report, p.report)
        _event("evaluate", cameraRmse=report["camera"]["rmse"],
               bodyRmse={k: v["refined"]["rmse"] for k, v in report["bodies"].items()})
    return p.report


def stage_export_plot(cfg: ExperimentConfig, out):
    """Histogram and per-pose error tables from the evaluation report."""
    p = RunPaths(out)
    report = serialize.load(p.report)
    p.plots.mkdir(exist_ok=True)
    entries = [("camera", report["camera"])]
    entries += [(f"body_{b}", v["refined"]) for b, v in sorted(report["bodies"].items())]
    summary = ["name,rmse,mean,median,total_summed_per_pose_error"]
    for name, rep in entries:
        r = TrajectoryReport.from_dict(rep)
        lines = ["bin_lo,bin_hi,count"]
        for i, c in enumerate(r.counts):
            hi = "inf" if i == len(r.counts) - 1 else serialize.format_float(float(r.bin_edges[i + 1]))
            lines.append(f"{serialize.format_float(float(r.bin_edges[i]))},{hi},{int(c)}")
        (p.plots / f"ate_hist_{name}.csv").write_text("\n".join(lines) + "\n")
        rows = ["frame,error"] + [f"{f},{serialize.format_float(float(e))}"
                                  for f, e in zip(r.frames, r.per_pose_errors)]
        (p.plots / f"ate_errors_{name}.csv").write_text("\n".join(rows) + "\n")
        summary.append(",".join([name] + [serialize.format_float(float(v)) for v in
                                          (r.rmse, r.mean, r.median, r.total_error)]))
    (p.plots / "ate_summary.csv").write_text("\n".join(summary) + "\n")
    return p.plots


STAGES = {
    "simulate": stage_simulate,
    "segment": stage_segment,
    "init": stage_init,
    "refine": stage_refine,
    "evaluate": stage_evaluate,
    "export-plot": stage_export_plot,
}
ORDER = ["simulate", "segment", "init", "refine", "evaluate"]


def _upstream_key(cfg: ExperimentConfig, stage):
    """Config content that determines a stage's artifacts (for reuse across runs)."""
    d = cfg.to_dict()
    d.pop("name")
    if stage in ("simulate",):
        return serialize.dumps({"scene": d["scene"]})
    keep = {"seed", "scene", "segmentation", "motionSegmentation", "ransacThreshold"}
    if stage == "segment" or stage == "init":
        return serialize.dumps({k: d[k] for k in keep})
    if stage == "refine":
        # only the static half of the refinement is shared
        static = d.get("staticSolver", d["solver"])
        return serialize.dumps({**{k: d[k] for k in keep}, "staticSolver": static})
    return None


_REUSE = {"simulate": ["scene.json"], "segment": ["labels", "assignment.json"],
          "init": ["init.json", "camera_init.txt"], "refine": ["ba_static.json", "cost_static.csv"]}


def run_pipeline(cfg: ExperimentConfig, out, cache=None):
    """Run every stage into ``out``; returns the report path.

    ``cache`` maps upstream keys to earlier run directories whose artifacts
    can be copied instead of recomputed (used by the ablation harness).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for stage in ORDER:
        key = _upstream_key(cfg, stage)
        src = None if cache is None or key is None else cache.get((stage, key))
        if src is not None and stage == "refine":
            for name in _REUSE[stage]:
                shutil.copyfile(Path(src) / name, out / name)
            _event(stage, event="reused", source=str(src), part="static")
            stage_refine(cfg, out, reuse_static=True)
            continue
        if src is not None:
            for name in _REUSE[stage]:
                s, dst = Path(src) / name, out / name
                if s.is_dir():
                    shutil.copytree(s, dst, dirs_exist_ok=True)
                else:
                    shutil.copyfile(s, dst)
            if stage == "simulate":
                serialize.dump(cfg.to_dict(), RunPaths(out).config)
            _event(stage, event="reused", source=str(src))
            continue
        STAGES[stage](cfg, out)
        if cache is not None and key is not None:
            cache[(stage, key)] = out
    stage_export_plot(cfg, out)
    return RunPaths(out).report


def run_ablation(configs, out, cache=None):
    """Run several configurations on the same scene and tabulate their ATE.

    Pass a dict as ``cache`` to reuse the shared upstream stages in later
    ``run_pipeline`` calls.
    """
    configs = list(configs)
    if len(configs) < 2:
        raise ConfigInvalid("configs", "an ablation needs at least two configurations")
    seeds = {c.scene.seed for c in configs}
    if len(seeds) != 1:
        raise ConfigInvalid("scene.seed", "ablation configs must share the scene seed")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigInvalid("name", "configuration names must be unique")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cache = {} if cache is None else cache
    reports = []
    for c in configs:
        path = run_pipeline(c, out / c.name, cache)
        reports.append((c.name, serialize.load(path)))
    table = {"camera": compare_runs([(n, TrajectoryReport.from_dict(r["camera"])) for n, r in reports])}
    body_ids = sorted(set.intersection(*[set(r["bodies"]) for _, r in reports])) if reports else []
    for b in body_ids:
        table[f"body_{b}"] = compare_runs([(n, TrajectoryReport.from_dict(r["bodies"][b]["refined"]))
                                           for n, r in reports])
    serialize.dump({"configs": names, "tables": table}, out / "comparison.json")
    for key, rows in table.items():
        (out / f"comparison_{key}.csv").write_text(comparison_csv(rows))
    return out / "comparison.json"
