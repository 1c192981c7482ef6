"""The articulated body model and the fusion-model parameters.

The body is a graph of 14 named joints.  Limb edges connect adjacent joints;
collision pairs are the left/right symmetric joints that must not share a
location in 3D.  Everything here is remappable through a key-value config
file so other detector conventions can be plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError

DEFAULT_JOINT_NAMES = (
    "head_top",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

DEFAULT_LIMB_EDGES = (
    (0, 1),  # head
    (1, 2),
    (1, 3),
    (1, 8),
    (1, 9),  # torso fan: neck to shoulders and hips
    (2, 4),
    (3, 5),  # upper arms
    (4, 6),
    (5, 7),  # forearms
    (8, 10),
    (9, 11),  # thighs
    (10, 12),
    (11, 13),  # shins
)

DEFAULT_COLLISION_PAIRS = (
    (2, 3),  # shoulders
    (4, 5),  # elbows
    (6, 7),  # wrists
    (8, 9),  # hips
    (10, 11),  # knees
    (12, 13),  # ankles
)

DEFAULT_PART_CLASSES = {
    (0, 1): "Head",
    (1, 2): "Torso",
    (1, 3): "Torso",
    (1, 8): "Torso",
    (1, 9): "Torso",
    (2, 4): "Upper Arm",
    (3, 5): "Upper Arm",
    (4, 6): "Forearm",
    (5, 7): "Forearm",
    (8, 10): "Thigh",
    (9, 11): "Thigh",
    (10, 12): "Shin",
    (11, 13): "Shin",
}

PART_CLASS_ORDER = ("Head", "Torso", "Upper Arm", "Forearm", "Thigh", "Shin")


@dataclass(frozen=True)
class BodyModel:
    joint_names: tuple[str, ...] = DEFAULT_JOINT_NAMES
    limb_edges: tuple[tuple[int, int], ...] = DEFAULT_LIMB_EDGES
    collision_pairs: tuple[tuple[int, int], ...] = DEFAULT_COLLISION_PAIRS
    head_index: int = 0
    neck_index: int = 1

    def __post_init__(self):
        n = len(self.joint_names)
        for i, j in self.limb_edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ConfigError(f"bad limb edge ({i}, {j}) for {n} joints")
        seen: set[int] = set()
        for left, right in self.collision_pairs:
            if not (0 <= left < n and 0 <= right < n) or left == right:
                raise ConfigError(f"bad collision pair ({left}, {right})")
            if left in seen or right in seen:
                raise ConfigError("collision pairs must be disjoint")
            seen.update((left, right))

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)


@dataclass(frozen=True)
class CRFParams:
    """Parameters of the three factor families.

    sigma_temp_mm: width of the constant-velocity smoothness kernel.
    theta1, theta2: separation sigmoid offset and slope; distances enter the
    sigmoid in units of ``collision_unit_mm`` (100 mm by default, placing the
    sigmoid midpoint at theta1/theta2 = 1.5 units = 15 cm).
    temporal_kernel: "gaussian" squares the deviation norm; "literal" keeps
    the unsquared norm in the exponent.
    """

    sigma_temp_mm: float = 20.0
    theta1: float = 15.0
    theta2: float = 10.0
    epsilon_floor: float = 1e-6
    collision_unit_mm: float = 100.0
    temporal_kernel: str = "gaussian"

    def __post_init__(self):
        if self.sigma_temp_mm <= 0:
            raise ConfigError("sigma_temp_mm must be positive")
        if self.theta2 <= 0:
            raise ConfigError("theta2 must be positive")
        if self.collision_unit_mm <= 0:
            raise ConfigError("collision_unit_mm must be positive")
        if self.temporal_kernel not in ("gaussian", "literal"):
            raise ConfigError(f"unknown temporal_kernel {self.temporal_kernel!r}")
        if not 0 < self.epsilon_floor < 1:
            raise ConfigError("epsilon_floor must lie in (0, 1)")


def _parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for chunk in text.replace(",", " ").split():
        a, _, b = chunk.partition("-")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def load_model_config(path) -> tuple[BodyModel, CRFParams]:
    """Read a body model + parameter file (``key = value`` lines, # comments).

    Recognized keys: joint_names (comma separated), limb_edges and
    collision_pairs ("i-j" lists), head_index, neck_index, plus every
    CRFParams field.  Missing keys keep their defaults.
    """
    body = BodyModel()
    params = CRFParams()
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read model config {path}: {e}") from e
    body_kw: dict = {}
    param_kw: dict = {}
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key == "joint_names":
                body_kw["joint_names"] = tuple(n.strip() for n in value.split(",") if n.strip())
            elif key == "limb_edges":
                body_kw["limb_edges"] = _parse_pairs(value)
            elif key == "collision_pairs":
                body_kw["collision_pairs"] = _parse_pairs(value)
            elif key in ("head_index", "neck_index"):
                body_kw[key] = int(value)
            elif key == "temporal_kernel":
                param_kw[key] = value
            elif key in ("sigma_temp_mm", "theta1", "theta2", "epsilon_floor", "collision_unit_mm"):
                param_kw[key] = float(value)
            else:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        except ValueError as e:
            raise ConfigError(f"{path}:{ln}: {e}") from e
    if body_kw:
        body = replace(body, **body_kw)
    if param_kw:
        params = replace(params, **param_kw)
    return body, params
