"""Scoring estimated 3D skeletons against ground truth.

A limb counts as correct when both endpoint joints land within half the
ground-truth limb length (configurable alpha) of their true positions.
Results are broken down by actor and body-part class, with a cross-actor
average weighted by how often each actor appears.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .bodymodel import (
    DEFAULT_PART_CLASSES,
    PART_CLASS_ORDER,
    BodyModel,
)
from .errors import NoOverlap, ZeroLengthLimb

DEFAULT_ALPHA = 0.5
HEAD_OFFSET_MM = 100.0


@dataclass(frozen=True)
class Skeleton3D:
    """Per-joint optional 3D positions (NaN rows mark missing joints)."""

    joints: np.ndarray  # (N, 3)
    frame_index: int
    person_id: int

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.ndim != 2 or j.shape[1] != 3:
            raise ValueError("joints must be (N, 3)")
        present = ~np.isnan(j).any(axis=1)
        if not np.all(np.isfinite(j[present])):
            raise ValueError("present joints must be finite")
        j.setflags(write=False)
        object.__setattr__(self, "joints", j)


def apply_head_offset(
    s: Skeleton3D,
    dz: float = HEAD_OFFSET_MM,
    head_index: int = 0,
    neck_index: int = 1,
) -> Skeleton3D:
    """Raise the head and neck joints by ``dz`` mm along world z.

    Compensates detectors trained to place these joints lower (nose level,
    between the shoulder blades) than upright-pose ground-truth conventions.
    """
    joints = s.joints.copy()
    for idx in (head_index, neck_index):
        if not np.isnan(joints[idx]).any():
            joints[idx, 2] += dz
    return Skeleton3D(joints=joints, frame_index=s.frame_index, person_id=s.person_id)


def limb_correct(est_a, est_b, gt_a, gt_b, alpha: float = DEFAULT_ALPHA) -> bool:
    """Both endpoints strictly within alpha * ground-truth limb length."""
    gt_a = np.asarray(gt_a, dtype=np.float64)
    gt_b = np.asarray(gt_b, dtype=np.float64)
    length = float(np.linalg.norm(gt_a - gt_b))
    if length < 1e-6:
        raise ZeroLengthLimb(f"ground-truth limb length {length:.3e} mm")
    est_a = np.asarray(est_a, dtype=np.float64)
    est_b = np.asarray(est_b, dtype=np.float64)
    if np.isnan(est_a).any() or np.isnan(est_b).any():
        return False
    return (
        float(np.linalg.norm(est_a - gt_a)) < alpha * length
        and float(np.linalg.norm(est_b - gt_b)) < alpha * length
    )


@dataclass
class PCPReport:
    """Correct/total limb counts per (actor, part class) plus derived rates."""

    counts: dict = field(default_factory=dict)  # (actor, class) -> [correct, total]
    appearances: dict = field(default_factory=dict)  # actor -> frames with ground truth
    part_classes: tuple = PART_CLASS_ORDER

    def add(self, actor, part_class: str, correct: bool) -> None:
        c = self.counts.setdefault((actor, part_class), [0, 0])
        c[1] += 1
        c[0] += int(correct)

    def actors(self) -> list:
        return sorted({a for a, _ in self.counts})

    def percentage(self, actor, part_class: str) -> float:
        correct, total = self.counts.get((actor, part_class), (0, 0))
        return 100.0 * correct / total if total else float("nan")

    def actor_all(self, actor) -> float:
        correct = sum(c for (a, _), (c, _t) in self.counts.items() if a == actor)
        total = sum(t for (a, _), (_c, t) in self.counts.items() if a == actor)
        return 100.0 * correct / total if total else float("nan")

    def weighted_average(self) -> float:
        num = 0.0
        den = 0
        for actor in self.actors():
            w = self.appearances.get(actor, 0)
            num += w * self.actor_all(actor)
            den += w
        return num / den if den else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ",".join(c.replace(" ", "_") for c in self.part_classes)
        buf.write(f"actor,{cols},All,Average\n")
        avg = self.weighted_average()
        for i, actor in enumerate(self.actors()):
            row = [str(actor)]
            row += [f"{self.percentage(actor, c):.2f}" for c in self.part_classes]
            row.append(f"{self.actor_all(actor):.2f}")
            row.append(f"{avg:.2f}" if i == 0 else "")
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        header = ["Actor"] + list(self.part_classes) + ["All"]
        widths = [max(9, len(h) + 2) for h in header]
        lines.append("".join(h.ljust(w) for h, w in zip(header, widths)))
        for actor in self.actors():
            row = [str(actor)]
            row += [f"{self.percentage(actor, c):.2f}" for c in self.part_classes]
            row.append(f"{self.actor_all(actor):.2f}")
            lines.append("".join(v.ljust(w) for v, w in zip(row, widths)))
        lines.append(f"Weighted average: {self.weighted_average():.2f}")
        return "\n".join(lines) + "\n"


def _mean_joint_distance(est: np.ndarray, gt: np.ndarray) -> float:
    both = ~(np.isnan(est).any(axis=1) | np.isnan(gt).any(axis=1))
    if not both.any():
        return float("inf")
    return float(np.linalg.norm(est[both] - gt[both], axis=1).mean())


def match_identities(
    estimates_at_frame: Mapping, gt_at_frame: Mapping
) -> dict:
    """Greedy nearest-mean-joint-distance matching: gt actor -> estimate id."""
    pairs = []
    for actor, gt in sorted(gt_at_frame.items(), key=lambda kv: str(kv[0])):
        for pid, est in sorted(estimates_at_frame.items(), key=lambda kv: str(kv[0])):
            d = _mean_joint_distance(est, gt)
            if math.isfinite(d):
                pairs.append((d, str(actor), str(pid), actor, pid))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    matched: dict = {}
    used = set()
    for _, _, _, actor, pid in pairs:
        if actor in matched or pid in used:
            continue
        matched[actor] = pid
        used.add(pid)
    return matched


def score(
    estimates: Mapping,
    ground_truth: Mapping,
    body: BodyModel = BodyModel(),
    part_classes: Mapping[tuple[int, int], str] = DEFAULT_PART_CLASSES,
    alpha: float = DEFAULT_ALPHA,
) -> PCPReport:
    """PCP scoring of estimates against ground truth.

    Both inputs map identity -> frame -> (N, 3) arrays (NaN for missing
    joints).  Identity correspondence is resolved per frame by nearest mean
    joint distance.  A ground-truth frame with no matched estimate counts
    every limb as incorrect.

    Raises NoOverlap when an actor never coexists with any estimate.
    """
    report = PCPReport(part_classes=PART_CLASS_ORDER)
    frames = sorted({f for seq in ground_truth.values() for f in seq})
    overlap = {actor: False for actor in ground_truth}
    for frame in frames:
        gt_here = {a: seq[frame] for a, seq in ground_truth.items() if frame in seq}
        est_here = {p: seq[frame] for p, seq in estimates.items() if frame in seq}
        matched = match_identities(est_here, gt_here)
        for actor, gt in sorted(gt_here.items(), key=lambda kv: str(kv[0])):
            report.appearances[actor] = report.appearances.get(actor, 0) + 1
            est = est_here.get(matched.get(actor))
            if est is not None:
                overlap[actor] = True
            for (i, j) in body.limb_edges:
                if np.isnan(gt[i]).any() or np.isnan(gt[j]).any():
                    continue
                cls = part_classes.get((i, j)) or part_classes.get((j, i))
                if cls is None:
                    continue
                if est is None:
                    report.add(actor, cls, False)
                else:
                    report.add(actor, cls, limb_correct(est[i], est[j], gt[i], gt[j], alpha))
    for actor, ok in overlap.items():
        if not ok:
            raise NoOverlap(f"actor {actor!r} never overlaps any estimate")
    return report


# ---------------------------------------------------------------------------
# File formats


def save_pose_sequences(path, sequences: Mapping, meta: dict | None = None) -> None:
    """Write identity -> frame -> (N, 3) pose arrays as canonical JSON.

    Frames are keyed ``%06d`` so lexicographic ordering is chronological and
    output bytes are reproducible.
    """
    payload: dict = {"frames": {}}
    if meta is not None:
        payload["meta"] = meta
    for ident, seq in sequences.items():
        for frame, joints in seq.items():
            fkey = f"{frame:06d}"
            payload["frames"].setdefault(fkey, {})[str(ident)] = [
                None if np.isnan(j).any() else [float(j[0]), float(j[1]), float(j[2])]
                for j in np.asarray(joints)
            ]
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_pose_sequences(path) -> dict[str, dict[int, np.ndarray]]:
    """Read the JSON written by save_pose_sequences (or hand-made ground truth)."""
    payload = json.loads(Path(path).read_text())
    out: dict[str, dict[int, np.ndarray]] = {}
    for fkey, actors in payload["frames"].items():
        frame = int(fkey)
        for ident, joints in actors.items():
            arr = np.array(
                [[np.nan] * 3 if j is None else [float(c) for c in j] for j in joints]
            )
            out.setdefault(str(ident), {})[frame] = arr
    return out
