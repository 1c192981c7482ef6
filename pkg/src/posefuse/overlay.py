"""Rendering estimated (and ground-truth) skeletons over camera images."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, ImageDraw

from .bodymodel import BodyModel
from .geometry import CameraCalibration, project

EST_COLOR = (60, 120, 255)
GT_COLOR = (255, 60, 60)
MARKER_HALF = 2  # joint marker half-size in px


def _draw_skeleton(
    draw: ImageDraw.ImageDraw,
    image_size: tuple[int, int],
    cal: CameraCalibration,
    joints: np.ndarray,
    body: BodyModel,
    color: tuple[int, int, int],
) -> None:
    points: list[tuple[float, float] | None] = []
    for j in np.asarray(joints):
        if np.isnan(j).any():
            points.append(None)
            continue
        p = project(cal, j)
        points.append((p.x, p.y) if p.valid else None)
    for (i, j) in body.limb_edges:
        if points[i] is not None and points[j] is not None:
            draw.line([points[i], points[j]], fill=color, width=1)
    w, h = image_size
    for p in points:
        if p is None:
            continue
        x, y = int(round(p[0])), int(round(p[1]))
        draw.rectangle(
            [x - MARKER_HALF, y - MARKER_HALF, x + MARKER_HALF, y + MARKER_HALF],
            outline=color,
        )
        if 0 <= x < w and 0 <= y < h:
            draw.point((x, y), fill=color)  # exact marker pixel


def emit_overlays(
    skeletons: Mapping[str, Mapping[int, np.ndarray]],
    cals: Mapping[str, CameraCalibration],
    out_dir,
    body: BodyModel = BodyModel(),
    ground_truth: Mapping[str, Mapping[int, np.ndarray]] | None = None,
    background_dir=None,
) -> list[Path]:
    """Write one PNG per (frame, camera) with projected skeletons drawn in.

    Estimates draw in blue, ground truth (when given) in red, over a supplied
    background image (``frame_{t:06d}_cam_{id}.png`` under background_dir) or
    a black canvas.  Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = sorted({f for seq in skeletons.values() for f in seq})
    written = []
    for frame in frames:
        for cam_id in sorted(cals):
            cal = cals[cam_id]
            canvas = None
            if background_dir is not None:
                bg = Path(background_dir) / f"frame_{frame:06d}_cam_{cam_id}.png"
                if bg.exists():
                    canvas = Image.open(bg).convert("RGB")
            if canvas is None:
                canvas = Image.new("RGB", (cal.image_width, cal.image_height), (0, 0, 0))
            draw = ImageDraw.Draw(canvas)
            if ground_truth is not None:
                for seq in ground_truth.values():
                    if frame in seq:
                        _draw_skeleton(draw, canvas.size, cal, seq[frame], body, GT_COLOR)
            for seq in skeletons.values():
                if frame in seq:
                    _draw_skeleton(draw, canvas.size, cal, seq[frame], body, EST_COLOR)
            path = out_dir / f"frame_{frame:06d}_cam_{cam_id}.png"
            canvas.save(path)
            written.append(path)
    return written
