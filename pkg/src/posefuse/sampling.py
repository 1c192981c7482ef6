"""Discretizing each joint's 3D state space by heat-map sampling.

For every visible joint-frame, camera subsets of size >= 2 are enumerated,
pixels are drawn independently per camera from the joint's heat-map PMF,
back-projected to rays and triangulated.  A joint seen by three cameras
yields 16 draws from each of the three pairs plus 16 from the triple; a
joint seen by two cameras yields all 64 from the single pair.  The result is
always M = 64 hypotheses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bodymodel import CRFParams
from .crf import eval_data_many
from .errors import DegenerateConfiguration, TooFewCameras
from .geometry import CameraCalibration, backproject, triangulate
from .heatmap import Heatmap, build_pmf, sample_pixel

M_STATES = 64
MAX_RETRIES = 8

# default person-window half-size as a fraction of the image diagonal
DEFAULT_MASK_DIAGONAL_FRACTION = 0.18


@dataclass(frozen=True)
class JointStateSet:
    """The discrete 3D hypotheses for one joint at one frame."""

    person_id: int
    frame_index: int
    joint_index: int
    states: np.ndarray  # (M, 3) mm
    source_subset: tuple[tuple[str, ...], ...]  # per state, the camera subset used
    residuals_mm: np.ndarray  # (M,) triangulation RMS residuals

    def __post_init__(self):
        st = np.asarray(self.states, dtype=np.float64)
        if st.ndim != 2 or st.shape[1] != 3:
            raise ValueError("states must be (M, 3)")
        if not np.all(np.isfinite(st)):
            raise ValueError("states must be finite")
        if len(self.source_subset) != st.shape[0]:
            raise ValueError("source_subset must align with states")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]


def derive_rng(master_seed: int, person_id: int, frame: int, joint: int) -> np.random.Generator:
    """Independent, reproducible stream for one (person, frame, joint) triple.

    Streams are derived by key rather than by draw order, so parallel
    sampling schedules cannot change the result.
    """
    if min(master_seed, person_id, frame, joint) < 0:
        raise ValueError("seed components must be non-negative")
    return np.random.default_rng(
        np.random.SeedSequence(entropy=[master_seed, person_id, frame, joint])
    )


def enumerate_subsets(cameras_visible) -> list[tuple[str, ...]]:
    """All camera subsets of size >= 2, smallest first, lexicographic within size."""
    cams = sorted(cameras_visible)
    if len(cams) < 2:
        raise TooFewCameras(f"need at least 2 cameras, got {len(cams)}")
    subsets: list[tuple[str, ...]] = []
    for size in range(2, len(cams) + 1):
        subsets.extend(combinations(cams, size))
    return subsets


def subset_sample_counts(n_subsets: int, total: int = M_STATES) -> list[int]:
    """Split ``total`` draws over the subsets (16 each for 4 subsets, 64 for 1)."""
    base, rem = divmod(total, n_subsets)
    return [base + (1 if i < rem else 0) for i in range(n_subsets)]


def sample_states(
    heatmaps: Mapping[str, Heatmap],
    cals: Mapping[str, CameraCalibration],
    rng: np.random.Generator,
    person_id: int = 0,
    frame_index: int = 0,
    joint_index: int = 0,
    windows: Mapping[str, tuple[int, int, int, int]] | None = None,
    fallback_state: np.ndarray | None = None,
    m_states: int = M_STATES,
) -> JointStateSet:
    """Draw the discrete hypothesis set for one joint-frame.

    ``windows`` optionally limits each camera's PMF to a grid sub-window
    (used to keep one person's samples away from other people in the scene).
    A draw whose rays are near-parallel is retried up to MAX_RETRIES times,
    then replaced by ``fallback_state`` (the previous frame's best hypothesis)
    or by the first valid state of the current set.
    """
    cam_ids = sorted(heatmaps)
    subsets = enumerate_subsets(cam_ids)
    counts = subset_sample_counts(len(subsets), m_states)
    pmfs = {
        cam: build_pmf(heatmaps[cam], None if windows is None else windows.get(cam))
        for cam in cam_ids
    }

    states = np.empty((m_states, 3))
    residuals = np.empty(m_states)
    sources: list[tuple[str, ...]] = []
    out = 0
    for subset, k in zip(subsets, counts):
        for _ in range(k):
            point = None
            residual = 0.0
            for _attempt in range(MAX_RETRIES):
                rays = [
                    backproject(cals[cam], sample_pixel(pmfs[cam], rng)) for cam in subset
                ]
                try:
                    point, residual = triangulate(rays)
                    break
                except DegenerateConfiguration:
                    continue
            if point is None:
                if fallback_state is not None:
                    point, residual = np.asarray(fallback_state, dtype=np.float64), 0.0
                elif out > 0:
                    point, residual = states[0].copy(), float(residuals[0])
                else:
                    raise DegenerateConfiguration(
                        f"joint {joint_index} frame {frame_index}: no valid draw "
                        f"after {MAX_RETRIES} retries and no fallback state"
                    )
            states[out] = point
            residuals[out] = residual
            sources.append(tuple(subset))
            out += 1

    return JointStateSet(
        person_id=person_id,
        frame_index=frame_index,
        joint_index=joint_index,
        states=states,
        source_subset=tuple(sources),
        residuals_mm=residuals,
    )


def person_window(
    keypoint_xy, heatmap: Heatmap, radius_px: float
) -> tuple[int, int, int, int]:
    """Grid-cell window of half-size ``radius_px`` image pixels around a keypoint."""
    x, y = float(keypoint_xy[0]), float(keypoint_xy[1])
    s = heatmap.scale
    x0 = int(np.floor((x - radius_px) / s))
    y0 = int(np.floor((y - radius_px) / s))
    x1 = int(np.ceil((x + radius_px) / s)) + 1
    y1 = int(np.ceil((y + radius_px) / s)) + 1
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class SamplingParams:
    master_seed: int = 0
    mask_radius_px: float | None = None  # None: DEFAULT_MASK_DIAGONAL_FRACTION of the diagonal; 0 disables
    m_states: int = M_STATES


def sample_track_states(
    track,
    heatmaps,
    cals: Mapping[str, CameraCalibration],
    params: SamplingParams = SamplingParams(),
    crf_params: CRFParams = CRFParams(),
) -> dict[tuple[int, int], JointStateSet]:
    """Sample hypothesis sets for every visible joint-frame of one track.

    ``heatmaps`` is a provider: (frame, joint) -> {camera_id: Heatmap}.  A
    camera counts as visible for a joint when the person's 2D skeleton there
    has the joint and a heat map exists.  Frames are processed in order so a
    degenerate-draw fallback can reuse the previous frame's best-supported
    hypothesis.
    """
    out: dict[tuple[int, int], JointStateSet] = {}
    best_prev: dict[int, np.ndarray] = {}
    for frame in sorted(track.frames):
        cams_at_frame = track.frames[frame]
        joints = sorted(
            {
                j
                for skel in cams_at_frame.values()
                for j in skel.visible_indices()
            }
        )
        for joint in joints:
            available = heatmaps(frame, joint)
            visible = {
                cam: available[cam]
                for cam, skel in sorted(cams_at_frame.items())
                if cam in available and skel.joints[joint] is not None
            }
            if len(visible) < 2:
                continue
            windows = None
            radius = params.mask_radius_px
            if radius is None or radius > 0:
                windows = {}
                for cam, hm in visible.items():
                    r = radius
                    if r is None:
                        r = DEFAULT_MASK_DIAGONAL_FRACTION * float(
                            np.hypot(hm.image_width, hm.image_height)
                        )
                    kp = cams_at_frame[cam].joints[joint]
                    windows[cam] = person_window((kp[0], kp[1]), hm, r)
            rng = derive_rng(params.master_seed, track.person_id, frame, joint)
            st = sample_states(
                visible,
                cals,
                rng,
                person_id=track.person_id,
                frame_index=frame,
                joint_index=joint,
                windows=windows,
                fallback_state=best_prev.get(joint),
                m_states=params.m_states,
            )
            out[(frame, joint)] = st
            support = eval_data_many(st.states, visible, cals, crf_params.epsilon_floor)
            best_prev[joint] = st.states[int(np.argmax(support))]
    return out


def dump_states_csv(path, state_sets: Sequence[JointStateSet]) -> None:
    """Debug dump: one row per hypothesis."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["person_id", "frame", "joint", "state_index", "x", "y", "z", "residual_mm"]
        )
        for st in state_sets:
            for i in range(st.n_states):
                w.writerow(
                    [
                        st.person_id,
                        st.frame_index,
                        st.joint_index,
                        i,
                        f"{st.states[i, 0]:.6f}",
                        f"{st.states[i, 1]:.6f}",
                        f"{st.states[i, 2]:.6f}",
                        f"{st.residuals_mm[i]:.6f}",
                    ]
                )
