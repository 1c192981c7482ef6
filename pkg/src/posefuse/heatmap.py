"""Per-joint 2D heat maps: lookup, PMF construction and pixel sampling.

A heat map is a dense grid of values in [0, 1] covering one camera image for
one joint.  Grids may be stored at a coarser resolution than the image; the
``scale`` field is image pixels per grid cell and lookups rescale
coordinates accordingly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, EmptyHeatmap

# value returned for out-of-image or behind-camera lookups; keeps factor
# normalization and messages strictly positive
VALUE_FLOOR = 1e-6

_PFHM_MAGIC = b"PFHM"
_PFHM_VERSION = 1


@dataclass(frozen=True)
class Heatmap:
    """One joint's likelihood grid for one camera at one frame."""

    values: np.ndarray  # (h, w) float in [0, 1]
    joint_index: int
    camera_id: str
    frame_index: int
    scale: float = 1.0  # image pixels per grid cell

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("heat map grid must be 2D")
        if v.size == 0:
            raise ValueError("heat map grid must be non-empty")
        if float(v.min()) < 0.0 or float(v.max()) > 1.0 + 1e-12:
            raise ValueError("heat map values must lie in [0, 1]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def grid_height(self) -> int:
        return self.values.shape[0]

    @property
    def grid_width(self) -> int:
        return self.values.shape[1]

    @property
    def image_width(self) -> float:
        return self.grid_width * self.scale

    @property
    def image_height(self) -> float:
        return self.grid_height * self.scale


@dataclass(frozen=True)
class HeatmapPMF:
    """Sampling distribution over heat-map cells (cumulative form).

    May cover a rectangular sub-window of the grid (``x0``, ``y0`` offsets)
    so that sampling can be restricted to one person's neighborhood.
    """

    cumulative: np.ndarray  # flat, nondecreasing, last entry 1
    window_width: int
    x0: int
    y0: int
    scale: float
    total_mass: float

    def __post_init__(self):
        c = np.asarray(self.cumulative, dtype=np.float64)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("cumulative must be a non-empty vector")
        if abs(c[-1] - 1.0) > 1e-12:
            raise ValueError("cumulative must end at 1")
        if np.any(np.diff(c) < -1e-15):
            raise ValueError("cumulative must be nondecreasing")
        c.setflags(write=False)
        object.__setattr__(self, "cumulative", c)

    def cell_probabilities(self) -> np.ndarray:
        """Per-cell probabilities (flat, window row-major)."""
        return np.diff(self.cumulative, prepend=0.0)


def value_at(h: Heatmap, px, in_front: bool = True) -> float:
    """Bilinear heat value at an image pixel coordinate.

    Coordinates outside the image, or any lookup flagged as behind the
    camera, return VALUE_FLOOR.  Inside the image, the four surrounding grid
    cells are interpolated (edge cells clamp).
    """
    x, y = float(px[0]), float(px[1])
    if not in_front or not np.isfinite(x) or not np.isfinite(y):
        return VALUE_FLOOR
    if x < 0.0 or y < 0.0 or x >= h.image_width or y >= h.image_height:
        return VALUE_FLOOR
    return float(_bilinear(h.values, np.array([x / h.scale]), np.array([y / h.scale]))[0])


def values_at(h: Heatmap, pix: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Vectorized value_at over an (n, 2) pixel array with validity flags."""
    pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
    x, y = pix[:, 0], pix[:, 1]
    ok = (
        np.asarray(valid, dtype=bool)
        & np.isfinite(x)
        & np.isfinite(y)
        & (x >= 0.0)
        & (y >= 0.0)
        & (x < h.image_width)
        & (y < h.image_height)
    )
    out = np.full(pix.shape[0], VALUE_FLOOR)
    if ok.any():
        out[ok] = _bilinear(h.values, x[ok] / h.scale, y[ok] / h.scale)
    return out


def _bilinear(grid: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at grid coordinates, clamped to the grid edge."""
    h, w = grid.shape
    gx = np.clip(gx, 0.0, w - 1.0)
    gy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(gx).astype(int), w - 2) if w > 1 else np.zeros(gx.shape, int)
    y0 = np.minimum(np.floor(gy).astype(int), h - 2) if h > 1 else np.zeros(gy.shape, int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    v00 = grid[y0, x0]
    v01 = grid[y0, x1]
    v10 = grid[y1, x0]
    v11 = grid[y1, x1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def build_pmf(h: Heatmap, window: tuple[int, int, int, int] | None = None) -> HeatmapPMF:
    """Convert a heat map (or a rectangular sub-window of it) into a PMF.

    ``window`` is (x0, y0, x1, y1) in grid cells, half-open, clipped to the
    grid.  Cell probabilities are proportional to heat values.

    Raises EmptyHeatmap when the selected region has (near) zero total mass.
    """
    if window is None:
        x0, y0, x1, y1 = 0, 0, h.grid_width, h.grid_height
    else:
        x0 = max(0, int(window[0]))
        y0 = max(0, int(window[1]))
        x1 = min(h.grid_width, int(window[2]))
        y1 = min(h.grid_height, int(window[3]))
        if x0 >= x1 or y0 >= y1:
            raise EmptyHeatmap("sampling window does not intersect the grid")
    region = h.values[y0:y1, x0:x1]
    flat = region.ravel()
    total = float(flat.sum())
    if total < 1e-12:
        raise EmptyHeatmap(
            f"joint {h.joint_index} camera {h.camera_id} frame {h.frame_index}: total mass {total:.3e}"
        )
    cumulative = np.cumsum(flat) / total
    cumulative[-1] = 1.0
    return HeatmapPMF(
        cumulative=cumulative,
        window_width=x1 - x0,
        x0=x0,
        y0=y0,
        scale=h.scale,
        total_mass=total,
    )


def sample_pixel(pmf: HeatmapPMF, rng: np.random.Generator) -> np.ndarray:
    """Draw one cell from the PMF; returns the cell center in image pixels.

    Deterministic for a fixed generator state and draw sequence.
    """
    u = rng.random()
    idx = int(np.searchsorted(pmf.cumulative, u, side="right"))
    idx = min(idx, pmf.cumulative.size - 1)
    cy, cx = divmod(idx, pmf.window_width)
    return np.array([(pmf.x0 + cx) * pmf.scale, (pmf.y0 + cy) * pmf.scale])


# ---------------------------------------------------------------------------
# File formats


def write_heatmap_stack(path, stack: np.ndarray, scale: float = 1.0) -> None:
    """Write all joint channels for one (frame, camera) as a PFHM binary file.

    Layout (little-endian): magic "PFHM", version u16, n_joints u16,
    height u32, width u32, scale f32, then float32 row-major channels.
    """
    arr = np.asarray(stack, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError("stack must be (n_joints, height, width)")
    n, h, w = arr.shape
    header = _PFHM_MAGIC + struct.pack("<HHIIf", _PFHM_VERSION, n, h, w, float(scale))
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))


def read_heatmap_stack(path) -> tuple[np.ndarray, float]:
    """Read a PFHM file; returns (stack (n, h, w) float32 in [0,1], scale)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _PFHM_MAGIC:
        raise ConfigError(f"{path}: not a PFHM file")
    version, n, h, w, scale = struct.unpack("<HHIIf", raw[4:20])
    if version != _PFHM_VERSION:
        raise ConfigError(f"{path}: unsupported PFHM version {version}")
    expected = 20 + 4 * n * h * w
    if len(raw) != expected:
        raise ConfigError(f"{path}: truncated PFHM payload ({len(raw)} != {expected} bytes)")
    stack = np.frombuffer(raw[20:], dtype="<f4").reshape(n, h, w)
    return stack, float(scale)


def write_heatmap_png(path, values: np.ndarray) -> None:
    """Write one channel as 16-bit grayscale PNG (value * 65535)."""
    arr = np.asarray(values, dtype=np.float64)
    img = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    img.save(path, format="PNG")


def read_heatmap_png(path) -> np.ndarray:
    """Read one 16-bit grayscale PNG channel back into [0, 1] floats."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint16:
        raise ConfigError(f"{path}: expected 16-bit grayscale PNG, got dtype {arr.dtype}")
    return arr.astype(np.float64) / 65535.0


def heatmap_stack_path(directory, frame_index: int, camera_id: str) -> Path:
    """Canonical PFHM file name for a (frame, camera) pair."""
    return Path(directory) / f"frame_{frame_index:06d}_cam_{camera_id}.pfhm"


def load_frame_heatmaps(
    directory, frame_index: int, camera_id: str
) -> dict[int, Heatmap]:
    """Load every joint channel for one (frame, camera) from disk.

    Prefers the PFHM stack file; falls back to per-channel 16-bit PNGs named
    ``frame_{t:06d}_cam_{id}_j{joint:02d}.png``.
    """
    directory = Path(directory)
    stack_path = heatmap_stack_path(directory, frame_index, camera_id)
    maps: dict[int, Heatmap] = {}
    if stack_path.exists():
        stack, scale = read_heatmap_stack(stack_path)
        for j in range(stack.shape[0]):
            maps[j] = Heatmap(
                values=np.clip(stack[j].astype(np.float64), 0.0, 1.0),
                joint_index=j,
                camera_id=camera_id,
                frame_index=frame_index,
                scale=scale,
            )
        return maps
    pattern = f"frame_{frame_index:06d}_cam_{camera_id}_j"
    for png in sorted(directory.glob(pattern + "*.png")):
        j = int(png.stem.rsplit("_j", 1)[1])
        maps[j] = Heatmap(
            values=read_heatmap_png(png),
            joint_index=j,
            camera_id=camera_id,
            frame_index=frame_index,
            scale=1.0,
        )
    if not maps:
        raise ConfigError(
            f"no heat maps for frame {frame_index}, camera {camera_id} under {directory}"
        )
    return maps
