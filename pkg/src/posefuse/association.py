"""Linking 2D skeleton detections into person identities.

Consecutive frames of the same camera are linked by bounding-box IoU;
same-frame detections across cameras are linked by back-projected ray
distance.  Identities seen by only a single camera in a frame are pruned,
leaving detections a multi-view stage can consume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateBox
from .geometry import CameraCalibration, backproject, pairwise_ray_distance

IOU_THRESHOLD = 0.7
RAY_DISTANCE_MM = 20.0
MIN_MUTUAL_JOINTS = 5
GAP_MAX_FRAMES = 2
BOX_PAD_FRACTION = 0.05
BOUNDS_MARGIN_FRACTION = 0.10


@dataclass(frozen=True)
class Skeleton2D:
    """A detected 2D skeleton: per-joint optional (x, y, confidence)."""

    joints: tuple  # length N, entries (x, y, conf) or None
    camera_id: str
    frame_index: int

    def __post_init__(self):
        cleaned = []
        n_visible = 0
        for j in self.joints:
            if j is None:
                cleaned.append(None)
                continue
            x, y, c = float(j[0]), float(j[1]), float(j[2])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError("skeleton joint coordinates must be finite")
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"joint confidence {c} outside [0, 1]")
            cleaned.append((x, y, c))
            n_visible += 1
        if n_visible < 1:
            raise ValueError("skeleton must have at least one visible joint")
        object.__setattr__(self, "joints", tuple(cleaned))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def visible_indices(self) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j is not None]

    def visible_points(self) -> np.ndarray:
        return np.array([(j[0], j[1]) for j in self.joints if j is not None])

    def check_bounds(self, image_width: int, image_height: int) -> None:
        """Enforce that visible joints lie within a 10% margin of the image."""
        mx = BOUNDS_MARGIN_FRACTION * image_width
        my = BOUNDS_MARGIN_FRACTION * image_height
        for i, j in enumerate(self.joints):
            if j is None:
                continue
            x, y, _ = j
            if not (-mx <= x <= image_width + mx and -my <= y <= image_height + my):
                raise ValueError(
                    f"joint {i} at ({x:.1f}, {y:.1f}) outside image margin "
                    f"for {image_width}x{image_height}"
                )


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("bounding box must have positive extent")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def bounding_box(s: Skeleton2D) -> BoundingBox:
    """Tight box over visible joints, padded by 5% of its diagonal per side.

    Raises DegenerateBox when fewer than two distinct joints are visible.
    """
    pts = s.visible_points()
    if pts.shape[0] < 2:
        raise DegenerateBox("need at least two visible joints")
    x_min, y_min = pts.min(axis=0)
    x_max, y_max = pts.max(axis=0)
    diag = math.hypot(x_max - x_min, y_max - y_min)
    if diag < 1e-9:
        raise DegenerateBox("all visible joints coincide")
    pad = BOX_PAD_FRACTION * diag
    return BoundingBox(x_min - pad, y_min - pad, x_max + pad, y_max + pad)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def link_time(
    prev: Sequence[Skeleton2D],
    curr: Sequence[Skeleton2D],
    iou_threshold: float = IOU_THRESHOLD,
) -> tuple[dict[int, int], list[int]]:
    """Greedy cross-frame matching by descending IoU.

    Returns (matches, new_indices): ``matches`` maps current-skeleton index to
    previous-skeleton index for pairs at or above the threshold, each side
    used at most once; unmatched current skeletons are first occurrences.
    """

    def safe_box(s):
        try:
            return bounding_box(s)
        except DegenerateBox:
            return None

    prev_boxes = [safe_box(s) for s in prev]
    curr_boxes = [safe_box(s) for s in curr]
    pairs = []
    for ci, cb in enumerate(curr_boxes):
        if cb is None:
            continue
        for pi, pb in enumerate(prev_boxes):
            if pb is None:
                continue
            score = iou(cb, pb)
            if score >= iou_threshold:
                pairs.append((-score, ci, pi))
    pairs.sort()
    matches: dict[int, int] = {}
    used_prev: set[int] = set()
    for _, ci, pi in pairs:
        if ci in matches or pi in used_prev:
            continue
        matches[ci] = pi
        used_prev.add(pi)
    new_indices = [ci for ci in range(len(curr)) if ci not in matches]
    return matches, new_indices


def view_link_distance(
    a: Skeleton2D,
    b: Skeleton2D,
    cals: Mapping[str, CameraCalibration],
) -> tuple[int, float]:
    """(number of mutually visible joints, mean closest-ray distance in mm).

    The distance is inf when no joint is visible in both skeletons.
    """
    cal_a = cals[a.camera_id]
    cal_b = cals[b.camera_id]
    dists = []
    for ja, jb in zip(a.joints, b.joints):
        if ja is None or jb is None:
            continue
        ray_a = backproject(cal_a, (ja[0], ja[1]))
        ray_b = backproject(cal_b, (jb[0], jb[1]))
        dists.append(pairwise_ray_distance(ray_a, ray_b))
    if not dists:
        return 0, float("inf")
    return len(dists), float(np.mean(dists))


def link_views(
    a: Skeleton2D,
    b: Skeleton2D,
    cals: Mapping[str, CameraCalibration],
    ray_mm: float = RAY_DISTANCE_MM,
    min_mutual: int = MIN_MUTUAL_JOINTS,
) -> bool:
    """True when two same-frame skeletons from different cameras are one person.

    Requires at least ``min_mutual`` mutually visible joints and a mean
    closest-ray distance below ``ray_mm``.
    """
    if a.camera_id == b.camera_id or a.frame_index != b.frame_index:
        return False
    n, mean = view_link_distance(a, b, cals)
    return n >= min_mutual and mean < ray_mm


class PersonTrack:
    """One identity's detections: frame -> camera -> Skeleton2D."""

    def __init__(self, person_id: int):
        self.person_id = person_id
        self.frames: dict[int, dict[str, Skeleton2D]] = {}

    @property
    def first_frame(self) -> int:
        return min(self.frames)

    @property
    def last_frame(self) -> int:
        return max(self.frames)

    def add(self, frame: int, camera_id: str, skel: Skeleton2D) -> None:
        self.frames.setdefault(frame, {})[camera_id] = skel

    def cameras_at(self, frame: int) -> list[str]:
        return sorted(self.frames.get(frame, {}))

    def last_frame_in_camera(self, camera_id: str) -> int | None:
        seen = [f for f, cams in self.frames.items() if camera_id in cams]
        return max(seen) if seen else None

    def to_json(self) -> dict:
        return {
            "person_id": self.person_id,
            "frames": {
                str(f): {
                    cam: {"joints": [list(j) if j is not None else None for j in s.joints]}
                    for cam, s in sorted(cams.items())
                }
                for f, cams in sorted(self.frames.items())
            },
        }

    @staticmethod
    def from_json(obj: dict) -> "PersonTrack":
        track = PersonTrack(int(obj["person_id"]))
        for f, cams in obj["frames"].items():
            for cam, skel in cams.items():
                track.add(
                    int(f),
                    cam,
                    Skeleton2D(
                        joints=tuple(tuple(j) if j is not None else None for j in skel["joints"]),
                        camera_id=cam,
                        frame_index=int(f),
                    ),
                )
        return track


def prune_single_view(tracks: Sequence[PersonTrack], frame: int) -> None:
    """Drop a frame's detections from identities seen by only one camera there."""
    for tr in tracks:
        cams = tr.frames.get(frame)
        if cams is not None and len(cams) < 2:
            del tr.frames[frame]


@dataclass(frozen=True)
class AssociationParams:
    iou_threshold: float = IOU_THRESHOLD
    ray_mm: float = RAY_DISTANCE_MM
    min_mutual: int = MIN_MUTUAL_JOINTS
    gap_max: int = GAP_MAX_FRAMES


class _Components:
    """Union-find over (camera, index) detections with identity bookkeeping."""

    def __init__(self, keys):
        self.parent = {k: k for k in keys}
        self.members = {k: [k] for k in keys}
        self.identity: dict = {k: None for k in keys}

    def find(self, k):
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def cameras(self, root) -> set:
        return {cam for cam, _ in self.members[root]}

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return True
        ia, ib = self.identity[ra], self.identity[rb]
        if ia is not None and ib is not None and ia != ib:
            return False  # conflicting identities keep their closer link
        if self.cameras(ra) & self.cameras(rb):
            return False  # one detection per camera per identity
        self.parent[rb] = ra
        self.members[ra].extend(self.members[rb])
        self.identity[ra] = ia if ia is not None else ib
        return True


def associate(
    detections: Mapping[int, Mapping[str, Sequence[Skeleton2D]]],
    cals: Mapping[str, CameraCalibration],
    params: AssociationParams = AssociationParams(),
) -> list[PersonTrack]:
    """Assemble person tracks from per-frame, per-camera skeleton detections.

    Per frame: greedy IoU matching against the previous frame carries
    identities forward within each camera; cross-view ray matching groups the
    frame's detections and lets an identity absorb detections in cameras
    where it was briefly lost (up to ``gap_max`` missed frames) or never seen.
    Ambiguous cross-view links resolve in favor of the smallest mean ray
    distance.  Finally, identities seen by a single camera in the frame have
    that frame dropped.
    """
    tracks: dict[int, PersonTrack] = {}
    next_id = 0
    # last accepted skeleton per (track, camera), only for the previous frame
    prev_assign: dict[tuple[str, int], int] = {}  # (camera, det idx at t-1) -> track id
    prev_dets: dict[str, list[Skeleton2D]] = {}
    prev_frame: int | None = None

    for frame in sorted(detections):
        by_cam = {cam: list(dets) for cam, dets in sorted(detections[frame].items())}
        keys = [(cam, i) for cam, dets in by_cam.items() for i in range(len(dets))]
        comps = _Components(keys)

        # time links within each camera (single-frame memory)
        if prev_frame is not None and frame == prev_frame + 1:
            for cam, dets in by_cam.items():
                prev_list = prev_dets.get(cam, [])
                matches, _ = link_time(prev_list, dets, params.iou_threshold)
                for ci, pi in matches.items():
                    tid = prev_assign.get((cam, pi))
                    if tid is not None:
                        root = comps.find((cam, ci))
                        comps.identity[root] = tid

        # cross-view links, closest first
        edges = []
        for ai in range(len(keys)):
            cam_a, ia = keys[ai]
            for bi in range(ai + 1, len(keys)):
                cam_b, ib = keys[bi]
                if cam_a == cam_b:
                    continue
                a, b = by_cam[cam_a][ia], by_cam[cam_b][ib]
                n, mean = view_link_distance(a, b, cals)
                if n >= params.min_mutual and mean < params.ray_mm:
                    edges.append((mean, keys[ai], keys[bi]))
        edges.sort(key=lambda e: (e[0], e[1], e[2]))
        for _, ka, kb in edges:
            ra, rb = comps.find(ka), comps.find(kb)
            ia, ib = comps.identity[ra], comps.identity[rb]
            # absorbing into an existing identity must respect the per-camera gap
            if (ia is None) != (ib is None):
                tid = ia if ia is not None else ib
                absorbed = rb if ia is not None else ra
                if not _gap_ok(tracks[tid], comps.members[absorbed], frame, params.gap_max):
                    continue
            comps.union(ka, kb)

        # materialize assignments
        assign: dict[tuple[str, int], int] = {}
        roots = sorted({comps.find(k) for k in keys})
        for root in roots:
            tid = comps.identity[root]
            if tid is None:
                tid = next_id
                next_id += 1
                tracks[tid] = PersonTrack(tid)
            for cam, i in comps.members[root]:
                assign[(cam, i)] = tid
                tracks[tid].add(frame, cam, by_cam[cam][i])

        prune_single_view(list(tracks.values()), frame)
        # pruned detections must not seed next frame's IoU matching
        pruned = {tid for tid, tr in tracks.items() if frame not in tr.frames}
        prev_assign = {k: tid for k, tid in assign.items() if tid not in pruned}
        prev_dets = by_cam
        prev_frame = frame

    return [tracks[tid] for tid in sorted(tracks) if tracks[tid].frames]


def _gap_ok(track: PersonTrack, new_members, frame: int, gap_max: int) -> bool:
    """A track may absorb a detection in a camera it left at most gap_max frames ago."""
    for cam, _ in new_members:
        last = track.last_frame_in_camera(cam)
        if last is not None and frame - last - 1 > gap_max:
            return False
    return True


# ---------------------------------------------------------------------------
# File formats


def keypoint_path(directory, frame_index: int, camera_id: str) -> Path:
    return Path(directory) / f"frame_{frame_index:06d}_cam_{camera_id}.json"


def save_keypoints(path, skeletons: Sequence[Skeleton2D]) -> None:
    """Write one (frame, camera) keypoint file: a JSON array of skeletons."""
    payload = [
        {"joints": [list(j) if j is not None else None for j in s.joints]} for s in skeletons
    ]
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_keypoints(path, camera_id: str, frame_index: int) -> list[Skeleton2D]:
    """Read one (frame, camera) keypoint file."""
    payload = json.loads(Path(path).read_text())
    out = []
    for entry in payload:
        out.append(
            Skeleton2D(
                joints=tuple(tuple(j) if j is not None else None for j in entry["joints"]),
                camera_id=camera_id,
                frame_index=frame_index,
            )
        )
    return out


def save_tracks(path, tracks: Sequence[PersonTrack]) -> None:
    Path(path).write_text(
        json.dumps([t.to_json() for t in sorted(tracks, key=lambda t: t.person_id)], sort_keys=True)
    )


def load_tracks(path) -> list[PersonTrack]:
    return [PersonTrack.from_json(obj) for obj in json.loads(Path(path).read_text())]
