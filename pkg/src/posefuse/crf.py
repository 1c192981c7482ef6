"""Per-person fusion model: factor evaluation and factor-graph construction.

The model couples one discrete variable per (joint, frame) — each holding the
sampled 3D hypotheses — through three factor families:

* data: mean projected heat-map support across cameras,
* temporal: a kernel on the deviation from the constant-velocity midpoint of
  the two neighboring frames (ternary),
* collision: a sigmoid on the distance between symmetric left/right joints
  that suppresses coincident placements (pairwise).

Factor tables are floored at ``epsilon_floor`` and normalized to sum to 1,
which keeps message passing strictly positive.  Ternary temporal tables are
large (M^3); they are defined by their endpoints and materialized on demand
rather than stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence

import numpy as np

from .bodymodel import BodyModel, CRFParams
from .errors import EmptyTrack
from .geometry import CameraCalibration, as_point3, project_many
from .heatmap import Heatmap, values_at

if TYPE_CHECKING:  # pragma: no cover
    from .association import PersonTrack
    from .sampling import JointStateSet

FACTOR_KINDS = ("data", "temporal", "collision")

# a heat-map source: (frame_index, joint_index) -> {camera_id: Heatmap}
HeatmapProvider = Callable[[int, int], Mapping[str, Heatmap]]


# ---------------------------------------------------------------------------
# Factor evaluation


def eval_data(
    state,
    heatmaps: Mapping[str, Heatmap],
    cals: Mapping[str, CameraCalibration],
    epsilon_floor: float = 1e-6,
) -> float:
    """Mean heat value of a 3D state projected into every available camera.

    Behind-camera and out-of-image projections contribute the heat-map floor;
    the mean itself is floored at ``epsilon_floor``.
    """
    return float(eval_data_many(as_point3(state)[None, :], heatmaps, cals, epsilon_floor)[0])


def eval_data_many(
    states: np.ndarray,
    heatmaps: Mapping[str, Heatmap],
    cals: Mapping[str, CameraCalibration],
    epsilon_floor: float = 1e-6,
) -> np.ndarray:
    """Vectorized eval_data over an (n, 3) state array."""
    if not heatmaps:
        raise ValueError("data term needs at least one camera heat map")
    states = np.asarray(states, dtype=np.float64).reshape(-1, 3)
    acc = np.zeros(states.shape[0])
    for cam in sorted(heatmaps):
        pix, in_front, _ = project_many(cals[cam], states)
        acc += values_at(heatmaps[cam], pix, in_front)
    return np.maximum(acc / len(heatmaps), epsilon_floor)


def eval_temporal(s_t, s_prev, s_next, params: CRFParams) -> float:
    """Smoothness of a state against the midpoint of its temporal neighbors.

    With the default gaussian kernel this is
    exp(-||s_t - (s_prev + s_next)/2||^2 / (2 sigma^2)); the "literal" kernel
    keeps the norm unsquared.
    """
    s_t = as_point3(s_t)
    mid = 0.5 * (as_point3(s_prev) + as_point3(s_next))
    d2 = float(((s_t - mid) ** 2).sum())
    two_s2 = 2.0 * params.sigma_temp_mm**2
    if params.temporal_kernel == "gaussian":
        return float(np.exp(-d2 / two_s2))
    return float(np.exp(-np.sqrt(d2) / two_s2))


def eval_collision(s_a, s_b, params: CRFParams) -> float:
    """Sigmoid separation score for a symmetric joint pair.

    1 / (1 + exp(theta1 - theta2 * d)) with d in collision units (default
    decimeters), rising from ~0 at coincidence to ~1 once the joints are
    safely apart; 0.5 exactly at d = theta1/theta2 units.
    """
    d = float(np.linalg.norm(as_point3(s_a) - as_point3(s_b))) / params.collision_unit_mm
    return float(1.0 / (1.0 + np.exp(params.theta1 - params.theta2 * d)))


def _temporal_raw_table(
    states_prev: np.ndarray,
    states_center: np.ndarray,
    states_next: np.ndarray,
    sigma_mm: float,
    kernel: str,
) -> np.ndarray:
    """Unfloored temporal table with axes (prev, center, next).

    States are re-centered so the squared-distance expansion stays
    well-conditioned far from the world origin.
    """
    shift = states_center.mean(axis=0)
    p = states_prev - shift
    c = states_center - shift
    n = states_next - shift
    mid = 0.5 * (p[:, None, :] + n[None, :, :])  # (P, N, 3)
    dot = np.einsum("pnd,cd->pcn", mid, c)
    d2 = (c**2).sum(axis=1)[None, :, None] - 2.0 * dot + (mid**2).sum(axis=2)[:, None, :]
    np.maximum(d2, 0.0, out=d2)
    two_s2 = 2.0 * sigma_mm**2
    if kernel == "gaussian":
        return np.exp(-d2 / two_s2)
    return np.exp(-np.sqrt(d2) / two_s2)


def _collision_raw_table(
    states_a: np.ndarray, states_b: np.ndarray, params: CRFParams
) -> np.ndarray:
    diff = states_a[:, None, :] - states_b[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2)) / params.collision_unit_mm
    return 1.0 / (1.0 + np.exp(params.theta1 - params.theta2 * d))


def floor_and_normalize(raw: np.ndarray, epsilon_floor: float) -> np.ndarray:
    """Clamp a table to the floor, then scale it to total mass 1."""
    floored = np.maximum(raw, epsilon_floor)
    return floored / floored.sum()


# ---------------------------------------------------------------------------
# Graph structure


@dataclass(frozen=True)
class Variable:
    """One discrete joint-frame variable and its sampled 3D states."""

    index: int
    person_id: int
    joint: int
    frame: int
    states: np.ndarray  # (M, 3)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]


class Factor:
    """Base class: a potential over 1..3 variables with a normalized table."""

    kind: str

    def __init__(self, var_ids: tuple[int, ...]):
        self.var_ids = var_ids

    def table(self) -> np.ndarray:
        raise NotImplementedError


class DataFactor(Factor):
    kind = "data"

    def __init__(self, var_id: int, values: np.ndarray, epsilon_floor: float):
        super().__init__((var_id,))
        self._table = floor_and_normalize(np.asarray(values, dtype=np.float64), epsilon_floor)
        self._table.setflags(write=False)

    def table(self) -> np.ndarray:
        return self._table


class CollisionFactor(Factor):
    kind = "collision"

    def __init__(
        self,
        var_ids: tuple[int, int],
        states_a: np.ndarray,
        states_b: np.ndarray,
        params: CRFParams,
    ):
        super().__init__(var_ids)
        self._table = floor_and_normalize(
            _collision_raw_table(states_a, states_b, params), params.epsilon_floor
        )
        self._table.setflags(write=False)

    def table(self) -> np.ndarray:
        return self._table


class TemporalFactor(Factor):
    """Ternary smoothness factor; its (P, C, N) table is built on demand.

    The normalizer is fixed at construction so repeated materializations are
    bit-identical.  ``sigma_mm`` is the base sigma scaled by sqrt(max gap)
    when the joint skipped frames and neighbors are farther than one step.
    """

    kind = "temporal"

    def __init__(
        self,
        var_ids: tuple[int, int, int],
        states_prev: np.ndarray,
        states_center: np.ndarray,
        states_next: np.ndarray,
        sigma_mm: float,
        kernel: str,
        epsilon_floor: float,
        center_frame: int,
        joint: int,
    ):
        super().__init__(var_ids)
        self._states = (states_prev, states_center, states_next)
        self.sigma_mm = sigma_mm
        self.kernel = kernel
        self.epsilon_floor = epsilon_floor
        self.center_frame = center_frame
        self.joint = joint
        raw = _temporal_raw_table(states_prev, states_center, states_next, sigma_mm, kernel)
        self._total = float(np.maximum(raw, epsilon_floor).sum())

    def table(self) -> np.ndarray:
        raw = _temporal_raw_table(*self._states, self.sigma_mm, self.kernel)
        np.maximum(raw, self.epsilon_floor, out=raw)
        raw /= self._total
        return raw


class FactorGraph:
    """Variables plus factors, with variable -> (factor, slot) adjacency."""

    def __init__(self, variables: Sequence[Variable], factors: Sequence[Factor]):
        self.variables = list(variables)
        self.factors = list(factors)
        self.adjacency: list[list[tuple[int, int]]] = [[] for _ in self.variables]
        for fi, f in enumerate(self.factors):
            for slot, v in enumerate(f.var_ids):
                self.adjacency[v].append((fi, slot))

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def factors_of_kind(self, kind: str) -> list[int]:
        return [i for i, f in enumerate(self.factors) if f.kind == kind]

    def variable_index(self) -> dict[tuple[int, int], int]:
        """(frame, joint) -> variable index."""
        return {(v.frame, v.joint): v.index for v in self.variables}


def temporal_sigma(base_sigma_mm: float, gap_prev: int, gap_next: int) -> float:
    """Widen the smoothness kernel when the chain skipped frames.

    A one-frame skip makes the surviving neighbors two frames apart and
    scales sigma by sqrt(2); general gaps scale by sqrt(max gap).
    """
    return base_sigma_mm * float(np.sqrt(max(gap_prev, gap_next)))


def build_graph(
    track: "PersonTrack",
    states: Mapping[tuple[int, int], "JointStateSet"],
    heatmaps: HeatmapProvider,
    cals: Mapping[str, CameraCalibration],
    params: CRFParams,
    body: BodyModel = BodyModel(),
    enabled: Iterable[str] = FACTOR_KINDS,
) -> FactorGraph:
    """Assemble the factor graph for one person track.

    ``states`` maps (frame, joint) to the sampled hypothesis set for every
    joint-frame that is visible in at least two cameras.  Structure: one data
    factor per variable; one ternary temporal factor per joint for every run
    of three consecutive visible frames (skipped frames widen sigma); one
    collision factor per symmetric pair per frame where both sides exist.

    Raises EmptyTrack when there are no variables at all.
    """
    enabled = set(enabled)
    unknown = enabled - set(FACTOR_KINDS)
    if unknown:
        raise ValueError(f"unknown factor kinds: {sorted(unknown)}")
    if "data" not in enabled:
        raise ValueError("the data term cannot be disabled")
    if not states:
        raise EmptyTrack(f"person {track.person_id}: no joint-frames survived")

    keys = sorted(states)  # (frame, joint)
    variables = []
    for idx, (frame, joint) in enumerate(keys):
        st = states[(frame, joint)]
        variables.append(
            Variable(
                index=idx,
                person_id=track.person_id,
                joint=joint,
                frame=frame,
                states=np.asarray(st.states, dtype=np.float64),
            )
        )
    index = {(v.frame, v.joint): v.index for v in variables}

    factors: list[Factor] = []
    for v in variables:
        cams = heatmaps(v.frame, v.joint)
        values = eval_data_many(v.states, cams, cals, params.epsilon_floor)
        factors.append(DataFactor(v.index, values, params.epsilon_floor))

    if "temporal" in enabled:
        joints = sorted({j for _, j in keys})
        for j in joints:
            frames = sorted(f for f, jj in keys if jj == j)
            for a, b, c in zip(frames, frames[1:], frames[2:]):
                sigma = temporal_sigma(params.sigma_temp_mm, b - a, c - b)
                vp, vc, vn = index[(a, j)], index[(b, j)], index[(c, j)]
                factors.append(
                    TemporalFactor(
                        (vp, vc, vn),
                        variables[vp].states,
                        variables[vc].states,
                        variables[vn].states,
                        sigma_mm=sigma,
                        kernel=params.temporal_kernel,
                        epsilon_floor=params.epsilon_floor,
                        center_frame=b,
                        joint=j,
                    )
                )

    if "collision" in enabled:
        frames_present = sorted({f for f, _ in keys})
        for f in frames_present:
            for left, right in body.collision_pairs:
                if (f, left) in index and (f, right) in index:
                    va, vb = index[(f, left)], index[(f, right)]
                    factors.append(
                        CollisionFactor(
                            (va, vb), variables[va].states, variables[vb].states, params
                        )
                    )

    return FactorGraph(variables, factors)
