"""Synthetic multi-camera scenes with exact ground truth.

Actors follow a constant-velocity walk with sinusoidal limb swing; cameras
sit on a ring looking at the scene center.  Heat maps are unnormalized
Gaussians (peak 1.0) rendered at the projected ground-truth joints, so the
data term of a perfect hypothesis is exactly 1.0.  Detector pathologies are
injected on demand:

* peak shifts: a joint's heat-map peak moves to a displaced 3D position for
  one isolated frame, leaving a weaker mode at the true location (the
  bimodal signature of a confused detector),
* symmetric swaps: both maps of a left/right pair become identical bimodal
  fields favoring one side, which collapses naive estimates onto it,
* occlusion windows: an actor disappears from one camera entirely.

Generated files use the pipeline's external formats, so re-ingesting them
reproduces the scene exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .association import Skeleton2D, keypoint_path, save_keypoints
from .errors import ActorOutOfView, ConfigError
from .evaluation import save_pose_sequences
from .geometry import CameraCalibration, project, save_calibrations, triangulate_arrays, backproject_many
from .heatmap import heatmap_stack_path, write_heatmap_stack

N_JOINTS = 14

# base pose offsets (walk-direction, lateral, up) in mm; actors walk along +x
_BASE_POSE = np.array(
    [
        [0.0, 0.0, 1750.0],  # head_top
        [0.0, 0.0, 1550.0],  # neck
        [0.0, 190.0, 1500.0],  # left_shoulder
        [0.0, -190.0, 1500.0],  # right_shoulder
        [0.0, 230.0, 1240.0],  # left_elbow
        [0.0, -230.0, 1240.0],  # right_elbow
        [0.0, 250.0, 1000.0],  # left_wrist
        [0.0, -250.0, 1000.0],  # right_wrist
        [0.0, 110.0, 1040.0],  # left_hip
        [0.0, -110.0, 1040.0],  # right_hip
        [0.0, 120.0, 550.0],  # left_knee
        [0.0, -120.0, 550.0],  # right_knee
        [0.0, 130.0, 80.0],  # left_ankle
        [0.0, -130.0, 80.0],  # right_ankle
    ]
)

# swing amplitude scale and phase per joint (arms counter to legs)
_SWING = {4: (0.5, 0.0), 6: (1.0, 0.0), 5: (0.5, math.pi), 7: (1.0, math.pi),
          10: (0.5, math.pi), 12: (1.0, math.pi), 11: (0.5, 0.0), 13: (1.0, 0.0)}


@dataclass(frozen=True)
class SceneSpec:
    n_actors: int = 2
    n_frames: int = 50
    n_cameras: int = 3
    ring_radius_mm: float = 3400.0
    ring_height_mm: float = 1700.0
    image_width: int = 160
    image_height: int = 120
    focal_px: float = 190.0
    heatmap_sigma_px: float = 2.0
    heatmap_scale: float = 1.0
    actor_spacing_mm: float = 900.0
    walk_speed_mm: float = 18.0
    swing_amplitude_mm: float = 120.0
    swing_period_frames: float = 36.0
    crossing: bool = False
    corruption_fraction: float = 0.0
    corruption_mode: str = "coherent"  # or "per_camera"
    corruption_offset_mm: float = 350.0
    corruption_offset_px: float = 12.0  # per-camera mode only
    corruption_residual: float = 0.35
    swap_residual: float = 0.6
    swap_windows: tuple = ()  # (pair_index, actor, start, end) with end exclusive
    occlusion_windows: tuple = ()  # (camera_index, actor, start, end)

    def __post_init__(self):
        if self.n_cameras not in (2, 3):
            raise ConfigError("n_cameras must be 2 or 3")
        if self.n_frames < 3:
            raise ConfigError("n_frames must be at least 3")
        if self.heatmap_sigma_px <= 0:
            raise ConfigError("heatmap_sigma_px must be positive")
        if self.n_actors < 1:
            raise ConfigError("n_actors must be at least 1")
        if self.corruption_mode not in ("coherent", "per_camera"):
            raise ConfigError(f"unknown corruption_mode {self.corruption_mode!r}")
        norm = tuple(tuple(int(x) for x in w) for w in self.swap_windows)
        object.__setattr__(self, "swap_windows", norm)
        norm = tuple(tuple(int(x) for x in w) for w in self.occlusion_windows)
        object.__setattr__(self, "occlusion_windows", norm)

    def to_json(self) -> dict:
        d = asdict(self)
        d["swap_windows"] = [list(w) for w in self.swap_windows]
        d["occlusion_windows"] = [list(w) for w in self.occlusion_windows]
        return d

    @staticmethod
    def from_json(obj: dict) -> "SceneSpec":
        obj = dict(obj)
        obj["swap_windows"] = tuple(tuple(w) for w in obj.get("swap_windows", ()))
        obj["occlusion_windows"] = tuple(tuple(w) for w in obj.get("occlusion_windows", ()))
        return SceneSpec(**obj)


def load_scene_spec(path) -> SceneSpec:
    try:
        return SceneSpec.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"cannot read scene spec {path}: {e}") from e


@dataclass
class CorruptionEvent:
    kind: str  # "peak_shift" | "peak_shift_px" | "swap"
    actor: int
    frame: int
    joints: tuple[int, ...]
    camera_id: str | None = None  # per-camera shifts only
    offset_mm: tuple[float, float, float] | None = None
    offset_px: tuple[float, float] | None = None
    px_displacement: dict = field(default_factory=dict)  # camera -> |px shift|

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "actor": self.actor,
            "frame": self.frame,
            "joints": list(self.joints),
            "camera_id": self.camera_id,
            "offset_mm": list(self.offset_mm) if self.offset_mm else None,
            "offset_px": list(self.offset_px) if self.offset_px else None,
            "px_displacement": {k: float(v) for k, v in sorted(self.px_displacement.items())},
        }


@dataclass
class Scene:
    spec: SceneSpec
    seed: int
    out_dir: Path
    cals: dict[str, CameraCalibration]
    ground_truth: dict[str, dict[int, np.ndarray]]
    events: list[CorruptionEvent]

    @property
    def calibration_path(self) -> Path:
        return self.out_dir / "calibration.json"

    @property
    def ground_truth_path(self) -> Path:
        return self.out_dir / "ground_truth.json"

    @property
    def heatmap_dir(self) -> Path:
        return self.out_dir / "heatmaps"

    @property
    def keypoint_dir(self) -> Path:
        return self.out_dir / "keypoints"


def actor_pose(spec: SceneSpec, actor: int, frame: int) -> np.ndarray:
    """Ground-truth joints (14, 3) for one actor at one frame."""
    direction = -1.0 if (spec.crossing and actor % 2 == 1) else 1.0
    span = spec.walk_speed_mm * (spec.n_frames - 1)
    x0 = -span / 2.0 if direction > 0 else span / 2.0
    y = (actor - (spec.n_actors - 1) / 2.0) * spec.actor_spacing_mm
    phase0 = 2.1 * actor
    pose = _BASE_POSE.copy()
    pose[:, 0] += x0 + direction * spec.walk_speed_mm * frame
    pose[:, 1] += y
    omega = 2.0 * math.pi / spec.swing_period_frames
    for j, (scale, phase) in _SWING.items():
        pose[j, 0] += direction * scale * spec.swing_amplitude_mm * math.sin(
            omega * frame + phase + phase0
        )
    return pose


def scene_center(spec: SceneSpec) -> np.ndarray:
    """The point the cameras look at (mid-walk, mid-body height)."""
    return np.array([0.0, 0.0, 1000.0])


def look_at_camera(
    camera_id: str,
    position,
    target,
    focal_px: float,
    image_width: int,
    image_height: int,
) -> CameraCalibration:
    """Pinhole camera at ``position`` looking at ``target`` (world z up)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_world)
    if np.linalg.norm(right) < 1e-9:
        raise ConfigError("camera looking straight up/down is unsupported")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    K = np.array(
        [
            [focal_px, 0.0, image_width / 2.0],
            [0.0, focal_px, image_height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    P = K @ np.hstack([R, t[:, None]])
    return CameraCalibration(
        camera_id=camera_id,
        projection=P,
        image_width=image_width,
        image_height=image_height,
    )


def ring_cameras(spec: SceneSpec, angles=None) -> dict[str, CameraCalibration]:
    """Cameras on a ring around the scene center."""
    center = scene_center(spec)
    if angles is None:
        if spec.n_cameras == 2:
            angles = [0.25, 0.25 + math.pi / 2.0]
        else:
            angles = [0.25 + 2.0 * math.pi * k / spec.n_cameras for k in range(spec.n_cameras)]
    cams = {}
    for k, ang in enumerate(angles):
        pos = center + np.array(
            [
                spec.ring_radius_mm * math.cos(ang),
                spec.ring_radius_mm * math.sin(ang),
                spec.ring_height_mm - center[2],
            ]
        )
        cam_id = f"cam{k}"
        cams[cam_id] = look_at_camera(
            cam_id, pos, center, spec.focal_px, spec.image_width, spec.image_height
        )
    return cams


def _select_coherent_corruptions(
    spec: SceneSpec, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """Isolated (actor, frame, joint) triples for peak shifts.

    Only interior frames are eligible and no two picks share (actor, joint)
    on adjacent frames, so each shift is a single-frame event with clean
    temporal neighbors.
    """
    count = int(round(spec.corruption_fraction * spec.n_actors * spec.n_frames * N_JOINTS))
    candidates = [
        (a, t, j)
        for a in range(spec.n_actors)
        for t in range(1, spec.n_frames - 1)
        for j in range(N_JOINTS)
    ]
    order = rng.permutation(len(candidates))
    picked: list[tuple[int, int, int]] = []
    taken: set[tuple[int, int, int]] = set()
    for idx in order:
        if len(picked) >= count:
            break
        a, t, j = candidates[idx]
        if any((a, tt, j) in taken for tt in (t - 1, t, t + 1)):
            continue
        picked.append((a, t, j))
        taken.add((a, t, j))
    picked.sort()
    return picked


def _mid_body_z(pose: np.ndarray) -> float:
    return float(pose[:, 2].mean())


def generate(spec: SceneSpec, seed: int, out_dir) -> Scene:
    """Generate one scene and write every pipeline input file under ``out_dir``.

    Deterministic for a fixed (spec, seed).  Raises ActorOutOfView when some
    ground-truth joint is invisible to every camera for more than half of the
    sequence (a broken camera layout).
    """
    out_dir = Path(out_dir)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    (out_dir / "keypoints").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    cals = ring_cameras(spec)
    cam_ids = sorted(cals)

    gt: dict[str, dict[int, np.ndarray]] = {
        str(a): {t: actor_pose(spec, a, t) for t in range(spec.n_frames)}
        for a in range(spec.n_actors)
    }

    # visibility audit on the clean scene
    for a in range(spec.n_actors):
        miss = np.zeros(N_JOINTS, dtype=int)
        for t in range(spec.n_frames):
            for j in range(N_JOINTS):
                seen = any(project(cals[c], gt[str(a)][t][j]).valid for c in cam_ids)
                miss[j] += 0 if seen else 1
        worst = int(miss.max())
        if worst > spec.n_frames // 2:
            raise ActorOutOfView(
                f"actor {a}: a joint is invisible to every camera in {worst}/{spec.n_frames} frames"
            )

    events: list[CorruptionEvent] = []
    shift_by_key: dict[tuple[int, int, int], CorruptionEvent] = {}
    if spec.corruption_fraction > 0 and spec.corruption_mode == "coherent":
        for a, t, j in _select_coherent_corruptions(spec, rng):
            pose = gt[str(a)][t]
            sign = 1.0 if pose[j, 2] < _mid_body_z(pose) else -1.0
            ev = CorruptionEvent(
                kind="peak_shift",
                actor=a,
                frame=t,
                joints=(j,),
                offset_mm=(0.0, 0.0, sign * spec.corruption_offset_mm),
            )
            events.append(ev)
            shift_by_key[(a, t, j)] = ev

    px_shift_by_key: dict[tuple[int, int, int, str], CorruptionEvent] = {}
    if spec.corruption_fraction > 0 and spec.corruption_mode == "per_camera":
        n_total = spec.n_actors * spec.n_frames * N_JOINTS * len(cam_ids)
        count = int(round(spec.corruption_fraction * n_total))
        candidates = [
            (a, t, j, c)
            for a in range(spec.n_actors)
            for t in range(spec.n_frames)
            for j in range(N_JOINTS)
            for c in cam_ids
        ]
        order = rng.permutation(len(candidates))
        for idx in order[:count]:
            a, t, j, c = candidates[idx]
            ang = rng.random() * 2.0 * math.pi
            ev = CorruptionEvent(
                kind="peak_shift_px",
                actor=a,
                frame=t,
                joints=(j,),
                camera_id=c,
                offset_px=(
                    spec.corruption_offset_px * math.cos(ang),
                    spec.corruption_offset_px * math.sin(ang),
                ),
            )
            events.append(ev)
            px_shift_by_key[(a, t, j, c)] = ev

    swap_lookup: dict[tuple[int, int], tuple[int, int]] = {}
    from .bodymodel import DEFAULT_COLLISION_PAIRS

    for pair_index, actor, start, end in spec.swap_windows:
        left, right = DEFAULT_COLLISION_PAIRS[pair_index]
        for t in range(start, end):
            swap_lookup[(actor, t)] = (left, right)
        events.append(
            CorruptionEvent(
                kind="swap",
                actor=actor,
                frame=start,
                joints=(left, right),
                offset_mm=None,
            )
        )

    occluded: set[tuple[int, int, int]] = set()  # (camera_index, actor, frame)
    for cam_index, actor, start, end in spec.occlusion_windows:
        for t in range(start, end):
            occluded.add((cam_index, actor, t))

    grid_w = int(round(spec.image_width / spec.heatmap_scale))
    grid_h = int(round(spec.image_height / spec.heatmap_scale))
    sigma_cells = spec.heatmap_sigma_px / spec.heatmap_scale

    for t in range(spec.n_frames):
        for ci, cam in enumerate(cam_ids):
            cal = cals[cam]
            stack = np.zeros((N_JOINTS, grid_h, grid_w), dtype=np.float64)
            skeletons = []
            for a in range(spec.n_actors):
                if (ci, a, t) in occluded:
                    continue
                pose = gt[str(a)][t]
                joints_2d: list = [None] * N_JOINTS
                for j in range(N_JOINTS):
                    modes = _joint_modes(
                        spec, pose, a, t, j, cam, cal, shift_by_key, px_shift_by_key, swap_lookup
                    )
                    if not modes:
                        continue
                    for (px, amp) in modes:
                        _render_gaussian(stack[j], px / spec.heatmap_scale, amp, sigma_cells)
                    # keypoint: argmax cell of the dominant (first) mode
                    px, amp = modes[0]
                    cell = np.round(px / spec.heatmap_scale)
                    if 0 <= cell[0] < grid_w and 0 <= cell[1] < grid_h:
                        kp = cell * spec.heatmap_scale
                        joints_2d[j] = (float(kp[0]), float(kp[1]), float(min(amp, 1.0)))
                if any(j is not None for j in joints_2d):
                    skeletons.append(
                        Skeleton2D(joints=tuple(joints_2d), camera_id=cam, frame_index=t)
                    )
            np.clip(stack, 0.0, 1.0, out=stack)
            write_heatmap_stack(
                heatmap_stack_path(out_dir / "heatmaps", t, cam),
                stack.astype(np.float32),
                scale=spec.heatmap_scale,
            )
            save_keypoints(keypoint_path(out_dir / "keypoints", t, cam), skeletons)

    # realized pixel displacement of coherent shifts, for test assertions
    for ev in events:
        if ev.kind != "peak_shift":
            continue
        a, t, j = ev.actor, ev.frame, ev.joints[0]
        pose = gt[str(a)][t]
        displaced = pose[j] + np.asarray(ev.offset_mm)
        for cam in cam_ids:
            p0 = project(cals[cam], pose[j])
            p1 = project(cals[cam], displaced)
            if p0.in_front and p1.in_front:
                ev.px_displacement[cam] = float(np.hypot(p1.x - p0.x, p1.y - p0.y))

    save_calibrations(out_dir / "calibration.json", [cals[c] for c in cam_ids])
    save_pose_sequences(out_dir / "ground_truth.json", gt)
    (out_dir / "scene_spec.json").write_text(
        json.dumps({"seed": seed, "spec": spec.to_json()}, indent=1, sort_keys=True)
    )
    (out_dir / "events.json").write_text(
        json.dumps([e.to_json() for e in events], indent=1, sort_keys=True)
    )
    return Scene(
        spec=spec, seed=seed, out_dir=out_dir, cals=cals, ground_truth=gt, events=events
    )


def _joint_modes(
    spec: SceneSpec,
    pose: np.ndarray,
    actor: int,
    frame: int,
    joint: int,
    cam: str,
    cal: CameraCalibration,
    shift_by_key,
    px_shift_by_key,
    swap_lookup,
) -> list[tuple[np.ndarray, float]]:
    """Heat-map modes for one joint in one camera: [(pixel, amplitude)], dominant first."""
    swap = swap_lookup.get((actor, frame))
    if swap is not None and joint in swap:
        left, right = swap
        dom = project(cal, pose[right])
        res = project(cal, pose[left])
        modes = []
        if dom.valid:
            modes.append((dom.xy, 1.0))
        if res.valid:
            modes.append((res.xy, spec.swap_residual))
        # keep dominant-first ordering even if the dominant is out of view
        if not dom.valid and modes:
            return []  # both joints invisible rather than anchored off-screen
        return modes

    shift = shift_by_key.get((actor, frame, joint))
    if shift is not None:
        displaced = pose[joint] + np.asarray(shift.offset_mm)
        dom = project(cal, displaced)
        res = project(cal, pose[joint])
        modes = []
        if dom.valid:
            modes.append((dom.xy, 1.0))
        if res.valid:
            modes.append((res.xy, spec.corruption_residual))
        if not dom.valid:
            return []
        return modes

    px_shift = px_shift_by_key.get((actor, frame, joint, cam))
    base = project(cal, pose[joint])
    if px_shift is not None:
        if not base.in_front:
            return []
        dom_xy = base.xy + np.asarray(px_shift.offset_px)
        modes = []
        if 0 <= dom_xy[0] < cal.image_width and 0 <= dom_xy[1] < cal.image_height:
            modes.append((dom_xy, 1.0))
            ev_disp = float(np.hypot(*np.asarray(px_shift.offset_px)))
            px_shift.px_displacement[cam] = ev_disp
        if base.valid:
            modes.append((base.xy, spec.corruption_residual))
        if not modes:
            return []
        return modes

    if not base.valid:
        return []
    return [(base.xy, 1.0)]


def _render_gaussian(grid: np.ndarray, center_cells: np.ndarray, amp: float, sigma: float) -> None:
    """Max-combine an unnormalized Gaussian bump into a grid (5-sigma patch)."""
    h, w = grid.shape
    cx, cy = float(center_cells[0]), float(center_cells[1])
    r = 5.0 * sigma
    x0, x1 = max(0, int(math.floor(cx - r))), min(w, int(math.ceil(cx + r)) + 1)
    y0, y1 = max(0, int(math.floor(cy - r))), min(h, int(math.ceil(cy + r)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) - cx
    ys = np.arange(y0, y1) - cy
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    patch = amp * np.exp(-d2 / (2.0 * sigma * sigma))
    np.maximum(grid[y0:y1, x0:x1], patch, out=grid[y0:y1, x0:x1])


def expected_triangulation_radius(spec: SceneSpec, cals=None) -> float:
    """3-sigma bound on hypothesis scatter from heat-map pixel noise.

    Linearizes backproject+triangulate around the scene center: perturb each
    pixel axis of each camera, triangulate, and accumulate the squared
    sensitivities.  The worst camera subset (pairs have poorer geometry than
    the full set) defines the bound.
    """
    if cals is None:
        cals = ring_cameras(spec)
    sigma = spec.heatmap_sigma_px
    if sigma == 0.0:
        return 0.0
    center = scene_center(spec)
    cam_ids = sorted(cals)
    worst = 0.0
    h = 0.5  # px, central differences
    for size in range(2, len(cam_ids) + 1):
        for subset in combinations(cam_ids, size):
            base_pix = {c: project(cals[c], center).xy for c in subset}
            sq_sum = 0.0
            for c in subset:
                for axis in range(2):
                    deltas = []
                    for sign in (+1.0, -1.0):
                        pix = {k: v.copy() for k, v in base_pix.items()}
                        pix[c][axis] += sign * h
                        origins = []
                        dirs = []
                        for k in subset:
                            o, d = backproject_many(cals[k], pix[k][None, :])
                            origins.append(o[0])
                            dirs.append(d[0])
                        x, _ = triangulate_arrays(np.array(origins), np.array(dirs))
                        deltas.append(x)
                    J = (deltas[0] - deltas[1]) / (2.0 * h)
                    sq_sum += float(J @ J)
            worst = max(worst, 3.0 * sigma * math.sqrt(sq_sum))
    return worst
