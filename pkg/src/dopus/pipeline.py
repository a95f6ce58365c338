"""Closed-loop scan: source -> preprocess -> segment -> track -> monitor -> control -> compound."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import compound
from .compound import FrameScore, LabelVolume, histogram_scores, insert_mask, score_frame
from .control import SweepExecutor, SweepPlan, write_pose_trace
from .imaging import DuplexFrame, ImageGrid, extract_doppler_mask, load_sequence, render_composite
from .monitor import (QualityVerdict, ReidentParams, ReidentState, check_quality, episodes_from_commands,
                      format_command, object_valid, reident_step, write_event_log)
from .phantom import PhantomConfig, scan_scenario, slice_phantom
from .pose import ProbePose
from .segnet.checkpoint import load_checkpoint
from .segnet.classical import classical_segment
from .segnet.data import downsample_frame, upsample_prob
from .tracker import NEW, TrackerParams, TrackerState, extract_centers, update_tracker, write_track_csv

__all__ = [
    "ScenarioConfig",
    "PipelineConfig",
    "ScanReport",
    "ClassicalSegmenter",
    "NetworkSegmenter",
    "make_segmenter",
    "run_scan",
    "ab_compare",
    "STAGES",
]

STAGES = ("source", "preprocess", "segment", "tracker", "monitor", "control", "compound")


@dataclass
class ScenarioConfig:
    """Virtual patient and sweep; ``dropout`` zones are (start, end, multiplier) in mm of travel."""

    seed: int = 0
    length_mm: float = 150.0
    dropout: list = field(default_factory=list)
    start_tilt: float = 0.0
    n_decoys: int | None = None  # veins beside the artery; None draws 1 or 2
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class PipelineConfig:
    scenario: ScenarioConfig | None = field(default_factory=ScenarioConfig)
    replay_path: str | None = None
    segmenter: str = "classical"  # or a checkpoint path
    reident_enabled: bool = True
    tracker: TrackerParams = field(default_factory=TrackerParams)
    reident: ReidentParams = field(default_factory=ReidentParams)
    speed: float = 10.0
    slew_rate: float = 20.0
    warmup_frames: int = 15
    include_dwell_in_volume: bool = False
    volume_spacing: tuple | None = None
    out_dir: str | None = None
    write_outputs: bool = True
    max_frames_factor: float = 4.0
    rng_seed: int | None = None

    def validate(self) -> None:
        if (self.scenario is None) == (self.replay_path is None):
            raise ValueError("exactly one source (scenario or replay_path) must be set")
        if self.replay_path is not None and not Path(self.replay_path).is_dir():
            raise FileNotFoundError(f"replay sequence {self.replay_path} not found")
        if self.segmenter != "classical" and not Path(self.segmenter).is_file():
            raise FileNotFoundError(f"checkpoint {self.segmenter} not found")
        if self.speed <= 0 or self.slew_rate <= 0 or self.warmup_frames < 0:
            raise ValueError("speed and slew rate must be positive, warm-up non-negative")
        if self.write_outputs and self.out_dir is None:
            raise ValueError("out_dir is required when writing outputs")


# -- segmenters ------------------------------------------------------------------------

class ClassicalSegmenter:
    name = "classical"

    def reset(self):
        pass

    def __call__(self, frame: DuplexFrame, seed=None) -> np.ndarray:
        return classical_segment(frame, seed)


class NetworkSegmenter:
    """Runs a trained model frame by frame with continuous recurrent state."""

    def __init__(self, model, resolution: int, name: str = "network"):
        self.model = model.eval()
        self.resolution = int(resolution)
        self.name = name
        self.state = None

    def reset(self):
        r = self.resolution
        self.state = self.model.initial_state(1, r, r) if self.model.variant.recurrent else None

    def __call__(self, frame: DuplexFrame, seed=None) -> np.ndarray:
        b, d, _ = downsample_frame(frame.bmode.data, frame.doppler.data, self.resolution)
        with torch.no_grad():
            p, self.state = self.model(torch.from_numpy(b)[None, None], torch.from_numpy(d)[None, None],
                                       self.state)
        prob = upsample_prob(p[0, 0].numpy(), *frame.shape)
        return (prob > 0.5).astype(np.float64)


def make_segmenter(spec: str):
    if spec == "classical":
        return ClassicalSegmenter()
    model, header = load_checkpoint(spec)
    return NetworkSegmenter(model, header["resolution"], header["variant"]["name"])


# -- report ------------------------------------------------------------------------------

@dataclass
class ScanReport:
    frame_scores: list
    episodes: list
    commands: list
    timing: dict
    n_frames: int
    n_dwell_frames: int
    sim_duration_s: float
    sweep_distance_mm: float
    volume_path: str | None = None
    volume_dice: float | None = None
    volume_iou: float | None = None
    surface_distance: dict | None = None
    verdicts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def scored(self, include_dwell: bool = False) -> list[FrameScore]:
        return [s for s in self.frame_scores if include_dwell or not s.dwell]

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.scored()]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.scored()]))

    @property
    def success_rate(self) -> float | None:
        done = [e for e in self.episodes if e.outcome in ("RECOVERED", "FAILED")]
        if not done:
            return None
        return sum(e.outcome == "RECOVERED" for e in done) / len(done)

    def summary(self) -> dict:
        d = [s.dice for s in self.scored()]
        i = [s.iou for s in self.scored()]
        return {
            "frames": self.n_frames,
            "dwell_frames": self.n_dwell_frames,
            "dice_mean": _r(np.mean(d)),
            "dice_sd": _r(np.std(d)),
            "iou_mean": _r(np.mean(i)),
            "iou_sd": _r(np.std(i)),
            "dice_histogram": histogram_scores(d).tolist(),
            "episodes": len(self.episodes),
            "recovered": sum(e.outcome == "RECOVERED" for e in self.episodes),
            "success_rate": None if self.success_rate is None else _r(self.success_rate),
            "reident_steps": sum(len(e.offsets) for e in self.episodes),
            "sim_duration_s": _r(self.sim_duration_s),
            "sweep_distance_mm": _r(self.sweep_distance_mm),
            "volume_dice": None if self.volume_dice is None else _r(self.volume_dice),
            "volume_iou": None if self.volume_iou is None else _r(self.volume_iou),
        }

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "frames": [{"frame_index": s.frame_index, "dice": _r(s.dice), "iou": _r(s.iou), "dwell": s.dwell}
                       for s in self.frame_scores],
            "episodes": [{**asdict(e), "duration": None if e.duration is None else _r(e.duration)}
                         for e in self.episodes],
            "commands": [format_command(c) for c in self.commands],
            "verdicts": self.verdicts,
            "surface_distance": self.surface_distance,
            "volume_path": self.volume_path,
            "config": self.config,
        }


def _r(x, nd: int = 6):
    return None if x is None else round(float(x), nd)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d.pop("out_dir", None)
    d.pop("write_outputs", None)
    if cfg.segmenter != "classical":
        d["segmenter"] = Path(cfg.segmenter).name
    return _jsonable(d)


# -- sources -------------------------------------------------------------------------------

class _PhantomSource:
    """Renders each frame on demand at the executor's current pose (closed loop)."""

    closed_loop = True

    def __init__(self, sc: ScenarioConfig, seed: int):
        self.patient, self.resp = scan_scenario(seed, sc.length_mm, sc.dropout, sc.n_decoys)
        self.cfg = PhantomConfig(**{**asdict(sc.phantom), "rng_seed": int(seed)})
        x = self.patient.x_center
        start = ProbePose.from_tilt((x, 0.0, 0.0), sc.start_tilt)
        end = ProbePose.from_tilt((x, sc.length_mm, 0.0), sc.start_tilt)
        self.plan_ends = (start, end)

    def frame(self, pose: ProbePose, t: float):
        sl = slice_phantom(self.patient.vessel, self.resp, pose, t, self.cfg, self.patient.decoys)
        composite = render_composite(sl.frame.bmode, sl.frame.doppler)
        return composite, sl.ground_truth, sl.frame


class _ReplaySource:
    closed_loop = False

    def __init__(self, path: str):
        self.frames, self.gts, self.meta = load_sequence(path)


def _preprocess(composite: ImageGrid, raw: DuplexFrame) -> DuplexFrame:
    """Colour-flow mask recovered from the duplex composite; B-mode taken from the scanner stream."""
    dop = extract_doppler_mask(composite)
    return DuplexFrame(raw.bmode, dop, raw.timestamp, raw.pose, raw.frame_index)


def _track_seed(tracker: TrackerState, params: ReidentParams):
    """(row, col) of the freshest valid object's latest centre."""
    best, key = None, None
    for o in tracker.objects:
        if not object_valid(o, params):
            continue
        fresh = sum(1 for _, lab in o.history[-params.validity_window:] if lab == NEW)
        k = (fresh, -o.id)
        if key is None or k > key:
            best, key = o, k
    if best is None:
        return None
    x, y = best.last_center
    return y, x


# -- the loop ---------------------------------------------------------------------------------

def run_scan(cfg: PipelineConfig, segmenter=None) -> ScanReport:
    """Run one closed-loop scan. Deterministic given the config and seed.

    With ``reident_enabled=False`` the monitor still produces verdicts but the
    state machine is not advanced, so no commands reach the robot.
    """
    cfg.validate()
    seed = cfg.rng_seed if cfg.rng_seed is not None else (cfg.scenario.seed if cfg.scenario else 0)
    torch.set_num_threads(1)
    seg = segmenter if segmenter is not None else make_segmenter(cfg.segmenter)
    seg.reset()
    timings = {k: [] for k in STAGES}
    tracker = TrackerState()
    rstate = ReidentState()
    commands = []
    scores: list[FrameScore] = []
    verdict_counts = {"OK": 0, "NO_VALID_OBJECT": 0, "CENTER_OUTSIDE_MASK": 0}
    pred_masks, gt_masks, poses, dwell_flags = [], [], [], []

    if cfg.scenario is not None:
        src = _PhantomSource(cfg.scenario, seed)
        fps = src.cfg.frame_rate
        plan = SweepPlan(*src.plan_ends, speed=cfg.speed)
        execu = SweepExecutor(plan, fps, cfg.slew_rate, cfg.reident.safety_limit)
        max_frames = int(plan.n_frames(fps) * cfg.max_frames_factor) + 1
        n_nominal = None
    else:
        src = _ReplaySource(cfg.replay_path)
        fps = float(src.meta.get("phantom", {}).get("frame_rate", 10.0))
        execu = None
        n_nominal = len(src.frames)
        max_frames = n_nominal

    k = 0
    aborted = False
    while True:
        if execu is not None:
            if execu.finished:
                break
            if k >= max_frames:
                aborted = True
                break
        elif k >= n_nominal:
            break
        t = k / fps
        t0 = time.perf_counter()
        if execu is not None:
            pose = execu.pose
            dwell = execu.mode.value == "POSITION_HOLD"
            composite, gt, raw = src.frame(pose, t)
        else:
            raw = src.frames[k]
            pose, dwell = raw.pose, False
            composite = render_composite(raw.bmode, raw.doppler)
            gt = src.gts[k] if src.gts is not None else ImageGrid(np.zeros(raw.shape), raw.bmode.spacing)
        t1 = time.perf_counter()
        frame = _preprocess(composite, raw)
        t2 = time.perf_counter()
        mask = seg(frame, _track_seed(tracker, cfg.reident))
        mask_grid = ImageGrid(mask, frame.bmode.spacing)
        t3 = time.perf_counter()
        tracker = update_tracker(tracker, extract_centers(frame.doppler, cfg.tracker), cfg.tracker, frame.shape)
        t4 = time.perf_counter()
        verdict = check_quality(tracker, mask_grid, cfg.reident)
        verdict_counts[verdict.reason.value] += 1
        cmd = None
        if cfg.reident_enabled and k >= cfg.warmup_frames:
            tilt_now = execu.commanded_tilt if execu is not None else pose.tilt
            rstate, cmd = reident_step(rstate, verdict, t, tilt_now, cfg.reident)
        t5 = time.perf_counter()
        if cmd is not None:
            commands.append(cmd)
            if execu is not None:
                execu.apply(cmd)
        if execu is not None:
            execu.step()
        t6 = time.perf_counter()
        scores.append(score_frame(k, mask_grid, gt, dwell))
        pred_masks.append(mask_grid)
        gt_masks.append(gt)
        poses.append(pose)
        dwell_flags.append(dwell)
        t7 = time.perf_counter()
        for name, a, b in zip(STAGES, (t0, t1, t2, t3, t4, t5, t6), (t1, t2, t3, t4, t5, t6, t7)):
            timings[name].append((b - a) * 1e3)
        k += 1

    # compounding (timed as one block, reported per frame too)
    tc = time.perf_counter()
    sp = pred_masks[0].spacing if pred_masks else (1.0, 1.0)
    step_mm = cfg.speed / fps
    vsp = tuple(cfg.volume_spacing) if cfg.volume_spacing else (sp[1], step_mm, sp[0])
    pred_vol, gt_vol = _empty_volumes(poses, pred_masks, vsp)
    for m, g, p, dw in zip(pred_masks, gt_masks, poses, dwell_flags):
        if dw and not cfg.include_dwell_in_volume:
            continue
        insert_mask(pred_vol, m, p)
        insert_mask(gt_vol, g, p)
    compound_s = time.perf_counter() - tc
    if pred_masks:
        timings["compound"] = [x + compound_s * 1e3 / len(pred_masks) for x in timings["compound"]]

    pa, ga = pred_vol.aligned_with(gt_vol)
    vdice, viou = compound.dice_score(pa.data, ga.data), compound.iou_score(pa.data, ga.data)
    surf = _surface_stats(pa, ga)
    episodes = episodes_from_commands(commands, fps)
    if aborted and episodes and episodes[-1].end_clock is None:
        episodes[-1].outcome = "ABORTED"
    sim_t = k / fps
    report = ScanReport(
        frame_scores=scores,
        episodes=episodes,
        commands=commands,
        timing=_timing_stats(timings, compound_s),
        n_frames=k,
        n_dwell_frames=int(sum(dwell_flags)),
        sim_duration_s=sim_t,
        sweep_distance_mm=float(execu.progress) if execu is not None else float(k) * step_mm,
        volume_dice=vdice,
        volume_iou=viou,
        surface_distance=surf,
        verdicts=verdict_counts,
        config=config_dict(cfg),
    )
    if cfg.write_outputs:
        _write_outputs(cfg, report, pred_vol, gt_vol, tracker, execu)
    return report


def _empty_volumes(poses, masks, spacing):
    if not poses:
        return (LabelVolume.empty((0, 0, 0), (0, 0, 0), spacing),) * 2
    h, w = masks[0].shape
    sp = masks[0].spacing
    xs = [p.position[0] for p in poses]
    ys = [p.position[1] for p in poses]
    # voxel centres on the untilted pixel centres
    lo = (min(xs) - (w / 2 - 0.5) * sp[1], min(ys), 0.5 * sp[0])
    hi = (max(xs) + (w / 2 - 0.5) * sp[1], max(ys), (h - 0.5) * sp[0])
    return LabelVolume.empty(lo, hi, spacing), LabelVolume.empty(lo, hi, spacing)


def _surface_stats(pa: LabelVolume, ga: LabelVolume) -> dict | None:
    if not pa.data.any() or not ga.data.any():
        return None
    both = np.argwhere(pa.data | ga.data)
    lo = np.maximum(both.min(0) - 2, 0)
    hi = both.max(0) + 3
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    org = tuple(np.asarray(pa.origin) + lo * np.asarray(pa.spacing))
    pc = LabelVolume(pa.data[sl], pa.spacing, org)
    gc = LabelVolume(ga.data[sl], ga.spacing, org)
    try:
        _, d = compound.surface_distance_map(pc, gc)
    except ValueError:
        return None
    return {"mean_mm": _r(d.mean()), "p95_mm": _r(np.percentile(d, 95)), "max_mm": _r(d.max())}


def _timing_stats(timings: dict, compound_s: float) -> dict:
    out = {}
    for k, v in timings.items():
        a = np.asarray(v) if v else np.zeros(1)
        out[k] = {"mean_ms": float(a.mean()), "sd_ms": float(a.std())}
    per_frame = sum(np.asarray(timings[k]) for k in ("preprocess", "tracker", "monitor", "compound")
                    if timings[k]) if timings["preprocess"] else np.zeros(1)
    out["loop_excl_segment_ms"] = {"mean_ms": float(np.mean(per_frame)), "max_ms": float(np.max(per_frame))}
    out["compounding_total_s"] = compound_s
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_outputs(cfg, report: ScanReport, pred_vol, gt_vol, tracker, execu) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol_path = compound.write_metaimage(pred_vol, out / "volume_pred.mhd")
    compound.write_metaimage(gt_vol, out / "volume_gt.mhd")
    compound.write_mesh(pred_vol, out / "surface_pred.obj")
    report.volume_path = vol_path.name
    compound.write_scores_csv(report.frame_scores, out / "scores.csv")
    write_event_log(report.episodes, out / "events.jsonl")
    write_track_csv(tracker, out / "tracks.csv")
    if execu is not None:
        write_pose_trace(execu.trace, out / "pose_trace.csv")
    (out / "report.json").write_text(json.dumps(_jsonable(report.to_dict()), indent=1, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps(report.timing, indent=1, sort_keys=True) + "\n")
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name not in ("timing.json", "manifest.json"))
    manifest = {"files": {p.name: _sha256(p) for p in files}, "untracked": ["timing.json"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- paired comparison ------------------------------------------------------------------------

def ab_compare(cfg: PipelineConfig, trials: int, out_dir: str | Path | None = None, segmenter=None) -> dict:
    """Matched-seed runs with re-identification on and off.

    Per-frame scores of non-dwell frames are pooled across trials per arm.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if cfg.scenario is None:
        raise ValueError("paired comparison needs a phantom scenario")
    base = cfg.rng_seed if cfg.rng_seed is not None else cfg.scenario.seed
    seg = segmenter if segmenter is not None else make_segmenter(cfg.segmenter)
    arms = {"reident": [], "no_reident": []}
    for i in range(trials):
        for arm, enabled in (("reident", True), ("no_reident", False)):
            sc = ScenarioConfig(**{**asdict(cfg.scenario), "seed": base + i,
                                   "phantom": cfg.scenario.phantom})
            c = PipelineConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
                                  "scenario": sc, "rng_seed": base + i, "reident_enabled": enabled,
                                  "write_outputs": False, "out_dir": None})
            arms[arm].append(run_scan(c, seg))
    summary = {"trials": trials}
    for arm, reps in arms.items():
        d = np.asarray([s.dice for r in reps for s in r.scored()])
        u = np.asarray([s.iou for r in reps for s in r.scored()])
        eps = [e for r in reps for e in r.episodes]
        done = [e for e in eps if e.outcome in ("RECOVERED", "FAILED")]
        summary[arm] = {
            "dice_mean": _r(d.mean()), "dice_sd": _r(d.std()),
            "iou_mean": _r(u.mean()), "iou_sd": _r(u.std()),
            "dice_histogram": histogram_scores(d).tolist(),
            "trial_dice": [_r(r.mean_dice) for r in reps],
            "volume_dice": [_r(r.volume_dice) for r in reps],
            "episodes": len(eps),
            "recovered": sum(e.outcome == "RECOVERED" for e in eps),
            "success_rate": _r(sum(e.outcome == "RECOVERED" for e in done) / len(done)) if done else None,
            "dwell_frames": int(sum(r.n_dwell_frames for r in reps)),
        }
    summary["dice_gap"] = _r(summary["reident"]["dice_mean"] - summary["no_reident"]["dice_mean"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ab_table.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "dice_mean", "dice_sd", "iou_mean", "iou_sd", "episodes", "success_rate"])
            for arm in arms:
                s = summary[arm]
                w.writerow([arm, s["dice_mean"], s["dice_sd"], s["iou_mean"], s["iou_sd"], s["episodes"],
                            s["success_rate"]])
        (out / "ab_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
