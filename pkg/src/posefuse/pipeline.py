"""End-to-end orchestration: ingest, associate, sample, optimize, evaluate.

Person tracks are processed in a thread pool (each track's sampling streams
are keyed by (person, frame, joint), so scheduling cannot change results)
and all outputs are written atomically with stable ordering, making runs
byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from .association import (
    AssociationParams,
    PersonTrack,
    Skeleton2D,
    associate,
    load_keypoints,
    save_tracks,
)
from .bodymodel import BodyModel, CRFParams, load_model_config
from .bp import run as bp_run, select_map, top_states_json
from .crf import FACTOR_KINDS, build_graph, eval_data_many
from .errors import ConfigError, EmptyTrack, PoseFuseError, StageError
from .evaluation import (
    PCPReport,
    Skeleton3D,
    apply_head_offset,
    load_pose_sequences,
    save_pose_sequences,
    score,
)
from .geometry import CameraCalibration, load_calibrations
from .heatmap import Heatmap, load_frame_heatmaps
from .sampling import SamplingParams, dump_states_csv, sample_track_states

logger = logging.getLogger("posefuse")


@dataclass(frozen=True)
class PipelineConfig:
    calibration_path: Path
    heatmap_dir: Path
    keypoint_dir: Path
    output_dir: Path
    ground_truth_path: Path | None = None
    model_config_path: Path | None = None
    crf: CRFParams = CRFParams()
    assoc: AssociationParams = AssociationParams()
    bp_iterations: int = 5
    master_seed: int = 0
    factors: tuple[str, ...] = FACTOR_KINDS
    head_offset_mm: float = 100.0
    alpha: float = 0.5
    mask_radius_px: float | None = None
    workers: int = 0
    damping: float = 0.0
    early_exit_tol: float | None = None
    dump_states: bool = False
    dump_beliefs: bool = False
    write_overlays: bool = False

    def __post_init__(self):
        factors = tuple(self.factors)
        if "data" not in factors:
            raise ConfigError("the data term cannot be disabled")
        unknown = set(factors) - set(FACTOR_KINDS)
        if unknown:
            raise ConfigError(f"unknown factors: {sorted(unknown)}")
        object.__setattr__(self, "factors", factors)
        for name in ("calibration_path", "heatmap_dir", "keypoint_dir", "output_dir"):
            object.__setattr__(self, name, Path(getattr(self, name)))
        if self.ground_truth_path is not None:
            object.__setattr__(self, "ground_truth_path", Path(self.ground_truth_path))
        if self.model_config_path is not None:
            object.__setattr__(self, "model_config_path", Path(self.model_config_path))
        for name in ("calibration_path", "heatmap_dir", "keypoint_dir"):
            p = getattr(self, name)
            if not p.exists():
                raise ConfigError(f"{name} does not exist: {p}")
        for name in ("ground_truth_path", "model_config_path"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise ConfigError(f"{name} does not exist: {p}")
        if self.bp_iterations < 0:
            raise ConfigError("bp_iterations must be non-negative")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigError("damping must lie in [0, 1)")

    @staticmethod
    def from_json(path, **overrides) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base = Path(path).parent

        def respath(v):
            p = Path(v)
            return p if p.is_absolute() else base / p

        kwargs: dict = {}
        for key in ("calibration_path", "heatmap_dir", "keypoint_dir", "output_dir",
                    "ground_truth_path", "model_config_path"):
            if raw.get(key) is not None:
                kwargs[key] = respath(raw[key])
        if "crf" in raw:
            try:
                kwargs["crf"] = CRFParams(**raw["crf"])
            except TypeError as e:
                raise ConfigError(f"bad crf params: {e}") from e
        if "association" in raw:
            try:
                kwargs["assoc"] = AssociationParams(**raw["association"])
            except TypeError as e:
                raise ConfigError(f"bad association params: {e}") from e
        for key in ("bp_iterations", "master_seed", "head_offset_mm", "alpha",
                    "mask_radius_px", "workers", "damping", "early_exit_tol",
                    "dump_states", "dump_beliefs", "write_overlays"):
            if key in raw:
                kwargs[key] = raw[key]
        if "factors" in raw:
            kwargs["factors"] = tuple(raw["factors"])
        kwargs.update(overrides)
        try:
            return PipelineConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad config {path}: {e}") from e


@dataclass
class PipelineResult:
    skeletons: dict[str, dict[int, np.ndarray]]  # person -> frame -> (N, 3)
    report: PCPReport | None
    diagnostics: dict
    results_path: Path
    report_csv_path: Path | None = None


class HeatmapStore:
    """Caching (frame, joint) -> {camera: Heatmap} provider over a directory."""

    def __init__(self, directory, cam_ids, cache_frames: int = 6):
        self.directory = Path(directory)
        self.cam_ids = sorted(cam_ids)
        self._load = lru_cache(maxsize=cache_frames * max(1, len(self.cam_ids)))(
            self._load_uncached
        )

    def _load_uncached(self, frame: int, cam: str) -> dict[int, Heatmap]:
        return load_frame_heatmaps(self.directory, frame, cam)

    def __call__(self, frame: int, joint: int) -> dict[str, Heatmap]:
        out = {}
        for cam in self.cam_ids:
            try:
                stack = self._load(frame, cam)
            except ConfigError:
                continue
            if joint in stack:
                out[cam] = stack[joint]
        return out


def _stage(name: str, frame: int | None = None):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            self.elapsed = time.perf_counter() - self.t0
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, str(exc), frame) from exc
            logger.info("stage %-16s %6.2fs", name, self.elapsed)
            return False

    return _Ctx()


def load_detections(
    keypoint_dir, cals: Mapping[str, CameraCalibration]
) -> dict[int, dict[str, list[Skeleton2D]]]:
    """Scan a keypoint directory into frame -> camera -> skeleton lists."""
    detections: dict[int, dict[str, list[Skeleton2D]]] = {}
    for path in sorted(Path(keypoint_dir).glob("frame_*_cam_*.json")):
        stem = path.stem  # frame_XXXXXX_cam_YYY
        frame_part, cam_part = stem.split("_cam_")
        frame = int(frame_part.removeprefix("frame_"))
        cam = cam_part
        if cam not in cals:
            raise ConfigError(f"keypoint file {path} names unknown camera {cam!r}")
        skels = load_keypoints(path, cam, frame)
        cal = cals[cam]
        for s in skels:
            s.check_bounds(cal.image_width, cal.image_height)
        if skels:
            detections.setdefault(frame, {})[cam] = skels
    return detections


def _process_track(
    track: PersonTrack,
    store: HeatmapStore,
    cals,
    config: PipelineConfig,
    body: BodyModel,
) -> dict:
    """Sample, optimize and decode one person track."""
    sampling = SamplingParams(
        master_seed=config.master_seed, mask_radius_px=config.mask_radius_px
    )
    states = sample_track_states(track, store, cals, sampling, config.crf)
    if not states:
        raise EmptyTrack(f"person {track.person_id}: no joint-frame visible in 2+ cameras")
    graph = build_graph(
        track, states, store, cals, config.crf, body=body, enabled=config.factors
    )
    data_only = set(config.factors) == {"data"}
    if data_only:
        # no coupling factors: the posterior argmax is the per-variable
        # data-table argmax, no message passing needed
        result = bp_run(graph, iterations=0)
    else:
        result = bp_run(
            graph,
            iterations=config.bp_iterations,
            damping=config.damping,
            early_exit_tol=config.early_exit_tol,
        )
    skeletons = select_map(graph, result, body.n_joints)
    for it, delta in enumerate(result.deltas, 1):
        logger.info(
            "person %s: iteration %d max message change %.3e", track.person_id, it, delta
        )
    return {
        "person_id": track.person_id,
        "skeletons": skeletons,
        "deltas": result.deltas,
        "states": states,
        "graph": graph,
        "bp": result,
    }


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Execute every stage and write results under ``config.output_dir``.

    Emits ``results.json`` (estimated skeletons), ``diagnostics.json``
    (message-change norms, stage info) and, when ground truth is configured,
    ``report.csv`` and ``report.txt``.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    diagnostics: dict = {"stages": {}}

    if config.model_config_path is not None:
        body, crf_params = load_model_config(config.model_config_path)
        config = replace(config, crf=crf_params)
    else:
        body = BodyModel()

    with _stage("load-calibration") as st:
        cals = load_calibrations(config.calibration_path)
    diagnostics["stages"]["load_calibration"] = st.elapsed

    with _stage("load-keypoints") as st:
        detections = load_detections(config.keypoint_dir, cals)
    diagnostics["stages"]["load_keypoints"] = st.elapsed
    diagnostics["n_frames_with_detections"] = len(detections)

    with _stage("associate") as st:
        tracks = associate(detections, cals, config.assoc)
    diagnostics["stages"]["associate"] = st.elapsed
    diagnostics["n_tracks"] = len(tracks)
    save_tracks(out_dir / "tracks.json", tracks)

    store = HeatmapStore(config.heatmap_dir, cals.keys())
    results: list[dict] = []
    with _stage("optimize") as st:
        workers = config.workers or min(4, max(1, len(tracks)))
        if workers <= 1 or len(tracks) <= 1:
            for track in tracks:
                results.append(_process_track(track, store, cals, config, body))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(_process_track, track, store, cals, config, body)
                    for track in tracks
                ]
                results = [f.result() for f in futures]
    diagnostics["stages"]["optimize"] = st.elapsed
    results.sort(key=lambda r: r["person_id"])
    diagnostics["bp_message_change"] = {
        str(r["person_id"]): r["deltas"] for r in results
    }

    with _stage("assemble") as st:
        skeletons: dict[str, dict[int, np.ndarray]] = {}
        for r in results:
            person = str(r["person_id"])
            seq: dict[int, np.ndarray] = {}
            for frame, joints in sorted(r["skeletons"].items()):
                s = Skeleton3D(joints=joints, frame_index=frame, person_id=r["person_id"])
                if config.head_offset_mm:
                    s = apply_head_offset(
                        s, config.head_offset_mm, body.head_index, body.neck_index
                    )
                seq[frame] = s.joints
            skeletons[person] = seq
    diagnostics["stages"]["assemble"] = st.elapsed

    results_path = out_dir / "results.json"
    meta = {
        "seed": config.master_seed,
        "factors": list(config.factors),
        "bp_iterations": config.bp_iterations,
        "head_offset_mm": config.head_offset_mm,
        "n_tracks": len(results),
    }
    with _stage("write") as st:
        tmp_payload = _pose_json(skeletons, meta)
        _atomic_write(results_path, tmp_payload)
        if config.dump_states:
            all_states = [s for r in results for s in r["states"].values()]
            dump_states_csv(out_dir / "states.csv", all_states)
        if config.dump_beliefs:
            dump = [
                entry
                for r in results
                for entry in top_states_json(r["graph"], r["bp"])
            ]
            _atomic_write(out_dir / "beliefs.json", json.dumps(dump, indent=1, sort_keys=True))
    diagnostics["stages"]["write"] = st.elapsed

    report = None
    report_csv = None
    if config.ground_truth_path is not None:
        with _stage("score") as st:
            gt = load_pose_sequences(config.ground_truth_path)
            report = score(skeletons, gt, body=body, alpha=config.alpha)
            report_csv = out_dir / "report.csv"
            _atomic_write(report_csv, report.to_csv())
            _atomic_write(out_dir / "report.txt", report.to_text())
        diagnostics["stages"]["score"] = st.elapsed

    if config.write_overlays:
        from .overlay import emit_overlays

        with _stage("overlay") as st:
            gt = (
                load_pose_sequences(config.ground_truth_path)
                if config.ground_truth_path is not None
                else None
            )
            emit_overlays(skeletons, cals, out_dir / "overlays", body=body, ground_truth=gt)
        diagnostics["stages"]["overlay"] = st.elapsed

    _atomic_write(out_dir / "diagnostics.json", json.dumps(diagnostics, indent=1, sort_keys=True))
    return PipelineResult(
        skeletons=skeletons,
        report=report,
        diagnostics=diagnostics,
        results_path=results_path,
        report_csv_path=report_csv,
    )


def _pose_json(skeletons, meta) -> str:
    """Canonical results JSON text (sorted keys, fixed frame-key width)."""
    payload: dict = {"meta": meta, "frames": {}}
    for ident, seq in skeletons.items():
        for frame, joints in seq.items():
            fkey = f"{frame:06d}"
            payload["frames"].setdefault(fkey, {})[str(ident)] = [
                None if np.isnan(j).any() else [float(j[0]), float(j[1]), float(j[2])]
                for j in np.asarray(joints)
            ]
    return json.dumps(payload, sort_keys=True, indent=1)
