"""Synthetic duplex sweeps: a tubular artery plus look-alike veins in speckle.

The artery carries a pulsatile colour-flow response whose strength depends on
the beam-to-flow alignment and on scripted dropout zones; veins look the
same in B-mode but show no flow, so only the Doppler channel tells them apart.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import NamedTuple, Sequence

import cv2
import numpy as np

from .imaging import DEPTH_MM, IMAGE_SIZE, DuplexFrame, ImageGrid
from .pose import ProbePose

__all__ = [
    "VesselModel",
    "DopplerResponseModel",
    "PhantomConfig",
    "PhantomSlice",
    "Sweep",
    "VirtualPatient",
    "slice_phantom",
    "generate_sweep",
    "linear_trajectory",
    "make_patient",
    "make_dataset",
    "iter_dataset",
    "scan_scenario",
]


@dataclass
class VesselModel:
    """Piecewise-linear centreline parameterised by the sweep coordinate y."""

    centerline: np.ndarray  # (N, 3) mm, y strictly increasing
    radius_profile: np.ndarray  # (N,) mm
    pulsation_period: float = 1.0
    duty_cycle: float = 0.4
    pulse_phase: float = 0.0
    has_flow: bool = True

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        self.radius_profile = np.asarray(self.radius_profile, dtype=np.float64)
        if self.centerline.ndim != 2 or self.centerline.shape[1] != 3 or len(self.centerline) < 2:
            raise ValueError("centerline must be an (N>=2, 3) array")
        if self.radius_profile.shape != (len(self.centerline),):
            raise ValueError("one radius per centreline vertex")
        if np.any(np.diff(self.centerline[:, 1]) <= 0):
            raise ValueError("centreline y must be strictly increasing")
        if self.radius_profile.min() < 0.5 or self.radius_profile.max() > 5.0:
            raise ValueError("radius outside the limb-artery range [0.5, 5] mm")
        if self.pulsation_period <= 0 or not (0 < self.duty_cycle <= 1):
            raise ValueError("invalid pulsation parameters")
        seg = np.linalg.norm(np.diff(self.centerline, axis=0), axis=1)
        self._arclength = np.concatenate([[0.0], np.cumsum(seg)])

    @classmethod
    def straight(cls, radius: float, depth: float = 18.0, x: float = 0.0,
                 y_range=(-20.0, 220.0), **kw) -> "VesselModel":
        ys = np.array(y_range, dtype=np.float64)
        cl = np.stack([np.full(2, x), ys, np.full(2, depth)], axis=1)
        return cls(cl, np.full(2, radius), **kw)

    @property
    def y_range(self) -> tuple[float, float]:
        return float(self.centerline[0, 1]), float(self.centerline[-1, 1])

    @property
    def length(self) -> float:
        return float(self._arclength[-1])

    def at_y(self, y):
        """Centre x, centre z and radius where the vessel crosses the plane y."""
        ys = self.centerline[:, 1]
        return (
            np.interp(y, ys, self.centerline[:, 0]),
            np.interp(y, ys, self.centerline[:, 2]),
            np.interp(y, ys, self.radius_profile),
        )

    def arclength_at_y(self, y):
        return np.interp(y, self.centerline[:, 1], self._arclength)

    def flow_direction(self, y: float) -> np.ndarray:
        ys = self.centerline[:, 1]
        i = int(np.clip(np.searchsorted(ys, y) - 1, 0, len(ys) - 2))
        d = self.centerline[i + 1] - self.centerline[i]
        return d / np.linalg.norm(d)

    def pulse(self, t: float) -> float:
        """Gated rectified sinusoid: >= 0.5 during systole, 0 in diastole."""
        phase = ((t / self.pulsation_period) + self.pulse_phase) % 1.0
        if phase >= self.duty_cycle:
            return 0.0
        return 0.5 + 0.5 * float(np.sin(np.pi * phase / self.duty_cycle))

    def systolic(self, t: float) -> bool:
        return ((t / self.pulsation_period) + self.pulse_phase) % 1.0 < self.duty_cycle


@dataclass
class DopplerResponseModel:
    """Colour-flow strength as a function of beam/flow alignment and position.

    ``dropout_zones`` holds (arclength start, arclength end, multiplier) triples.
    A pixel at normalised radius rho shows colour when
    ``strength * pulse * (1 - rho**2) >= noise_floor`` (parabolic flow profile
    against a wall-filter floor).
    """

    base_strength: float = 0.8
    gain_max: float = 8.0
    saturation_angle: float = 10.0
    noise_floor: float = 0.15
    dropout_zones: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.base_strength <= 1.0):
            raise ValueError("base_strength must lie in [0, 1]")
        if self.gain_max < 1.0 or self.saturation_angle <= 0 or not (0 < self.noise_floor < 1):
            raise ValueError("invalid Doppler response parameters")
        self.dropout_zones = [tuple(float(v) for v in z) for z in self.dropout_zones]
        for a, b, m in self.dropout_zones:
            if b <= a or m < 0:
                raise ValueError(f"invalid dropout zone {(a, b, m)}")

    def tilt_gain(self, alignment_deg: float) -> float:
        """Monotone in |alignment| (0 deg = beam perpendicular to flow)."""
        frac = min(1.0, abs(np.sin(np.deg2rad(alignment_deg))) / np.sin(np.deg2rad(self.saturation_angle)))
        return 1.0 + (self.gain_max - 1.0) * frac

    def dropout_multiplier(self, arclength: float) -> float:
        m = 1.0
        for a, b, mult in self.dropout_zones:
            if a <= arclength < b:
                m = min(m, mult)
        return m

    def strength(self, alignment_deg: float, arclength: float) -> float:
        s = self.base_strength * self.tilt_gain(alignment_deg) * self.dropout_multiplier(arclength)
        return float(np.clip(s, 0.0, 1.0))


@dataclass
class PhantomConfig:
    rng_seed: int = 0
    speckle_mean: float = 1.0
    speckle_var: float = 0.12
    frame_rate: float = 10.0
    image_size: int = IMAGE_SIZE
    depth_mm: float = DEPTH_MM
    fp_rate: float = 0.4
    fp_large_fraction: float = 0.2
    doppler_jitter_mm: float = 0.2
    lumen_level: float = 0.15
    wall_gain: float = 0.5
    wall_mm: float = 0.45
    contrast_loss_per_deg: float = 0.015

    def __post_init__(self):
        if self.frame_rate <= 0 or self.image_size <= 0 or self.depth_mm <= 0:
            raise ValueError("invalid phantom geometry")
        if self.speckle_var < 0 or self.speckle_mean <= 0:
            raise ValueError("invalid speckle parameters")

    @property
    def spacing(self) -> float:
        return self.depth_mm / self.image_size


class PhantomSlice(NamedTuple):
    frame: DuplexFrame
    ground_truth: ImageGrid
    info: dict


@lru_cache(maxsize=64)
def _texture(seed: int):
    rng = np.random.default_rng([seed, 7919])
    k = rng.normal(size=(5, 3))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    k *= rng.uniform(0.15, 0.6, size=(5, 1))  # rad/mm
    amp = rng.uniform(0.015, 0.04, size=5)
    phase = rng.uniform(0, 2 * np.pi, size=5)
    return k, amp, phase


def _plane_coordinates(pose: ProbePose, cfg: PhantomConfig):
    n, sp = cfg.image_size, cfg.spacing
    u = (np.arange(n) + 0.5 - n / 2.0) * sp
    v = (np.arange(n) + 0.5) * sp
    R = pose.rotation_matrix()
    p = np.asarray(pose.position)
    coords = []
    for ax in range(3):
        coords.append(p[ax] + R[ax, 0] * u[None, :] + R[ax, 2] * v[:, None])
    return coords


def _lumen_distance2(vessel: VesselModel, px, py, pz, dx=0.0, dz=0.0):
    xc, zc, r = vessel.at_y(py)
    return (px - xc - dx) ** 2 + (pz - zc - dz) ** 2, r


def slice_phantom(
    vessel: VesselModel,
    resp: DopplerResponseModel,
    pose: ProbePose,
    t: float,
    cfg: PhantomConfig,
    decoys: Sequence[VesselModel] = (),
) -> PhantomSlice:
    """Render the duplex frame and exact lumen mask seen from ``pose`` at time ``t``.

    The per-frame noise stream is keyed on (seed, t), so output is a pure
    function of its arguments.
    """
    n, sp = cfg.image_size, cfg.spacing
    spacing = (sp, sp)
    frame_index = int(round(t * cfg.frame_rate))
    y0, y1 = vessel.y_range
    info: dict = {"in_volume": True, "fp_blobs": [], "doppler_strength": 0.0}
    if not (y0 <= pose.position[1] <= y1):
        info["in_volume"] = False
        empty = ImageGrid(np.zeros((n, n)), spacing)
        frame = DuplexFrame(empty, empty, t, pose, frame_index, {"in_volume": False})
        return PhantomSlice(frame, empty, info)

    rng = np.random.default_rng([cfg.rng_seed, int(round(t * 1000.0))])
    px, py, pz = _plane_coordinates(pose, cfg)

    # tissue background, coherent in world coordinates
    k, amp, phase = _texture(cfg.rng_seed)
    bg = np.full((n, n), 0.52)
    for i in range(len(amp)):
        bg += amp[i] * np.sin(k[i, 0] * px + k[i, 1] * py + k[i, 2] * pz + phase[i])
    bg *= 1.0 - 0.25 * np.clip(pz, 0, None) / cfg.depth_mm
    bg[pz < 1.5] = 0.85

    beam = pose.beam
    off_vertical = float(np.rad2deg(np.arccos(np.clip(beam[2], -1.0, 1.0))))
    contrast = float(np.clip(1.0 - cfg.contrast_loss_per_deg * off_vertical, 0.3, 1.0))

    gt = None
    for j, ves in enumerate((vessel, *decoys)):
        d2, r = _lumen_distance2(ves, px, py, pz)
        inside = d2 < r * r
        wall = (~inside) & (d2 < (r + cfg.wall_mm) ** 2)
        bg = np.where(wall, bg * (1.0 + cfg.wall_gain * contrast), bg)
        bg = np.where(inside, bg * (1.0 - contrast * (1.0 - cfg.lumen_level)), bg)
        if j == 0:
            gt = inside

    sigma = 1.0 / np.sqrt(np.pi / 2.0)
    speckle = rng.rayleigh(sigma, size=(n, n))
    speckle = cfg.speckle_mean + (speckle - 1.0) * np.sqrt(cfg.speckle_var / ((4 - np.pi) / np.pi))
    speckle = cv2.GaussianBlur(np.clip(speckle, 0.0, None), (0, 0), 0.7)
    bmode = np.clip(bg * speckle, 0.0, 1.0)

    doppler = np.zeros((n, n), dtype=bool)
    if vessel.has_flow and gt.any():
        y_hit = float(py[gt].mean())
        arc = float(vessel.arclength_at_y(y_hit))
        flow = vessel.flow_direction(y_hit)
        alignment = float(np.rad2deg(np.arcsin(min(1.0, abs(float(beam @ flow))))))
        strength = resp.strength(alignment, arc)
        pulse = vessel.pulse(t)
        s = strength * pulse
        jit = np.clip(rng.normal(0.0, cfg.doppler_jitter_mm, size=2), -2 * cfg.doppler_jitter_mm,
                      2 * cfg.doppler_jitter_mm)
        if s > 0:
            d2j, r = _lumen_distance2(vessel, px, py, pz, jit[0], jit[1])
            rho2 = d2j / (r * r)
            doppler = (rho2 < 1.0) & (s * (1.0 - rho2) >= resp.noise_floor)
        info.update(
            doppler_strength=s, alignment_deg=alignment, pulse=pulse, arclength=arc,
            dropout_multiplier=resp.dropout_multiplier(arc), jitter_mm=jit.tolist(),
        )

    # colour noise blobs; the large ones exercise the tracker radius filter
    n_fp = rng.poisson(cfg.fp_rate) if cfg.fp_rate > 0 else 0
    if n_fp:
        rows, cols = np.mgrid[0:n, 0:n]
        for _ in range(n_fp):
            large = rng.random() < cfg.fp_large_fraction
            radius = rng.uniform(1.3, 1.8) if large else rng.uniform(0.35, 1.1)
            cr = rng.uniform(3.0, cfg.depth_mm - 3.0) / sp
            cc = rng.uniform(10, n - 10)
            blob = (rows + 0.5 - cr) ** 2 + (cols + 0.5 - cc) ** 2 <= (radius / sp) ** 2
            doppler |= blob
            info["fp_blobs"].append({"row": cr, "col": cc, "radius_mm": radius})

    frame = DuplexFrame(
        ImageGrid(bmode, spacing),
        ImageGrid(doppler.astype(np.float64), spacing),
        t,
        pose,
        frame_index,
    )
    return PhantomSlice(frame, ImageGrid(gt.astype(np.float64), spacing), info)


@dataclass
class Sweep:
    frames: list
    ground_truth: list
    infos: list
    meta: dict

    def __len__(self):
        return len(self.frames)


def generate_sweep(
    vessel: VesselModel,
    resp: DopplerResponseModel,
    trajectory: Sequence[ProbePose],
    cfg: PhantomConfig,
    decoys: Sequence[VesselModel] = (),
    t0: float = 0.0,
) -> Sweep:
    if len(trajectory) == 0:
        raise ValueError("trajectory must not be empty")
    frames, gts, infos = [], [], []
    for i, pose in enumerate(trajectory):
        t = t0 + i / cfg.frame_rate
        sl = slice_phantom(vessel, resp, pose, t, cfg, decoys)
        frames.append(sl.frame)
        gts.append(sl.ground_truth)
        infos.append(sl.info)
    meta = {
        "dropout_zones": [list(z) for z in resp.dropout_zones],
        "phantom": asdict(cfg),
        "fp_blobs": [inf["fp_blobs"] for inf in infos],
        "n_frames": len(frames),
    }
    return Sweep(frames, gts, infos, meta)


def linear_trajectory(start, end, speed: float = 10.0, frame_rate: float = 10.0,
                      tilt=0.0) -> list[ProbePose]:
    """Constant-speed poses from ``start`` toward ``end`` (end excluded).

    ``tilt`` may be a scalar or a callable of the travelled distance in mm.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    length = float(np.linalg.norm(end - start))
    if length == 0:
        return [ProbePose.from_tilt(start, tilt(0.0) if callable(tilt) else tilt)]
    n = max(1, int(round(length / speed * frame_rate)))
    step = speed / frame_rate
    direction = (end - start) / length
    poses = []
    for i in range(n):
        d = i * step
        a = tilt(d) if callable(tilt) else tilt
        poses.append(ProbePose.from_tilt(start + direction * d, a))
    return poses


# -- virtual patients --------------------------------------------------------------


@dataclass
class VirtualPatient:
    seed: int
    vessel: VesselModel
    decoys: list
    response: DopplerResponseModel
    x_center: float


def _meander(rng, ys, amplitude):
    out = np.zeros_like(ys)
    for _ in range(3):
        wl = rng.uniform(60.0, 220.0)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * ys / wl + rng.uniform(0, 2 * np.pi))
    return amplitude * out / 3.0


def make_patient(seed: int, length_mm: float = 200.0, n_decoys: int | None = None,
                 radius_range=(2.2, 2.8)) -> VirtualPatient:
    """Random artery lying in a row with 1-2 veins of the same size and look.

    The artery's slot in the row is random and the probe is centred on the
    row, so B-mode position alone does not identify it.
    """
    rng = np.random.default_rng([seed, 1])
    ys = np.arange(-20.0, length_mm + 20.0 + 1e-9, 5.0)
    if n_decoys is None:
        n_decoys = int(rng.integers(1, 3))
    n = n_decoys + 1
    radii = [rng.uniform(*radius_range) * (1.0 + _meander(rng, ys, 0.04)) for _ in range(n)]
    gaps = rng.uniform(1.5, 5.0, size=max(n - 1, 0))
    slots = [0.0]
    for i in range(n - 1):
        slots.append(slots[-1] + radii[i].mean() + radii[i + 1].mean() + gaps[i])
    x0 = rng.uniform(-3.0, 3.0)
    slots = np.asarray(slots) - np.mean(slots) + x0
    common = _meander(rng, ys, 4.0)
    z0 = rng.uniform(14.0, 24.0)
    common_z = _meander(rng, ys, 1.5)
    xs = [slots[i] + common + (_meander(rng, ys, 1.0) if n > 1 else 0.0) for i in range(n)]
    zs = [z0 + (rng.uniform(-3.0, 3.0) if n > 1 else 0.0) + common_z + _meander(rng, ys, 0.8)
          for i in range(n)]
    # keep a clear tissue gap between neighbours everywhere
    for i in range(1, n):
        d = np.hypot(xs[i] - xs[i - 1], zs[i] - zs[i - 1])
        need = radii[i] + radii[i - 1] + 1.2
        push = np.where(d < need, need - d, 0.0)
        for j in range(i, n):
            xs[j] = xs[j] + push
    k = int(rng.integers(0, n))
    artery = VesselModel(np.stack([xs[k], ys, zs[k]], 1), radii[k], pulse_phase=rng.uniform(0, 1),
                         pulsation_period=rng.uniform(0.9, 1.1))
    decoys = [VesselModel(np.stack([xs[i], ys, zs[i]], 1), radii[i], has_flow=False)
              for i in range(n) if i != k]
    resp = DopplerResponseModel(base_strength=float(rng.uniform(0.75, 0.9)))
    x_center = float(np.mean([x[0] for x in xs]))
    return VirtualPatient(seed, artery, decoys, resp, x_center)


def iter_dataset(
    n_patients: int = 7,
    sweeps_per_patient: int = 2,
    length_mm: float = 120.0,
    seed: int = 0,
    cfg: PhantomConfig | None = None,
    dropout_prob: float = 0.5,
    max_tilt: float = 10.0,
    dropout_len=(5.0, 15.0),
):
    """Yield (patient, sweeps) one patient at a time, with varied tilt and dropout scripts."""
    cfg = cfg or PhantomConfig()
    for p in range(n_patients):
        pseed = seed * 1000 + p
        patient = make_patient(pseed, length_mm)
        sweeps = []
        for s in range(sweeps_per_patient):
            rng = np.random.default_rng([pseed, 2, s])
            zones = []
            if rng.random() < dropout_prob:
                a = rng.uniform(0.1, 0.6) * length_mm
                b = a + rng.uniform(*dropout_len)
                zones.append((float(patient.vessel.arclength_at_y(a)),
                              float(patient.vessel.arclength_at_y(b)), rng.uniform(0.0, 0.15)))
            resp = DopplerResponseModel(patient.response.base_strength, dropout_zones=zones)
            t0_tilt, t1_tilt = rng.uniform(-max_tilt, max_tilt, size=2)
            traj = linear_trajectory(
                (patient.x_center, 0.0, 0.0), (patient.x_center, length_mm, 0.0),
                tilt=lambda d, a=t0_tilt, b=t1_tilt: a + (b - a) * d / length_mm,
            )
            scfg = PhantomConfig(**{**asdict(cfg), "rng_seed": int(pseed * 10 + s)})
            sw = generate_sweep(patient.vessel, resp, traj, scfg, patient.decoys)
            sw.meta.update(patient=p, sweep=s)
            sweeps.append(sw)
        yield p, sweeps


def make_dataset(n_patients: int = 7, sweeps_per_patient: int = 2, length_mm: float = 120.0,
                 seed: int = 0, cfg: PhantomConfig | None = None, **kw) -> dict[int, list[Sweep]]:
    """Sweeps grouped by virtual patient (see :func:`iter_dataset`)."""
    return dict(iter_dataset(n_patients, sweeps_per_patient, length_mm, seed, cfg, **kw))


def scan_scenario(seed: int, length_mm: float = 150.0, dropout=None, n_decoys: int | None = None):
    """Patient plus response for a closed-loop scan along y at the patient's x.

    ``dropout`` lists (start, end, multiplier) zones in mm of sweep distance.
    """
    patient = make_patient(seed, length_mm, n_decoys)
    zones = [tuple(z) for z in (dropout or [])]
    ves = patient.vessel
    shifted = [(float(ves.arclength_at_y(a)), float(ves.arclength_at_y(b)), m) for a, b, m in zones]
    resp = DopplerResponseModel(patient.response.base_strength, dropout_zones=shifted)
    return patient, resp
