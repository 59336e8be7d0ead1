"""Pulse-schedule arithmetic and synthetic ODMR contrast cubes.

A cube holds, per pixel and per swept microwave frequency, the contrast
``1 - signal/reference`` of a pulsed measurement. Synthesis runs the
magnetostatic ground truth through the Zeeman model into a four-dip spectrum
and adds camera shot noise; every pixel's noise stream is derived from
``(seed, pixel index)`` so results never depend on evaluation order.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nvcore
from .errors import AlreadyMirroredError, BadDimsError, BadSweepError, BadTimingError
from .nvcore import DEFAULT_CONSTANTS, STANDARD_AXES
from .strayfield import FieldMap

# Float32 cannot represent a value in (-1, 1) closer to +-1 than one ulp;
# clamping there keeps degenerate zero-count draws inside the open interval.
_CONTRAST_LIMIT = 1.0 - 2.0**-24


@dataclass(frozen=True)
class PulseSchedule:
    """Timing of one pulsed acquisition (all seconds/hertz/counts).

    Derived fields: ``n_points`` sweep length, ``n_r`` pulse repetitions per
    camera exposure (floor, never exceeding the exposure), ``total_time``
    covering signal+reference frames for all averages.
    """

    t_laser: float = 50e-6
    t_mw: float = 110e-9
    t_exposure: float = 20e-3
    sweep_start: float = 2.65e9
    sweep_stop: float = 2.88e9
    sweep_step: float = 1e6
    n_avg: int = 30
    n_points: int = 0
    n_r: int = 0
    total_time: float = 0.0

    def frequencies(self) -> np.ndarray:
        return self.sweep_start + self.sweep_step * np.arange(self.n_points)

    def to_json_dict(self) -> dict:
        return {
            "t_laser_s": self.t_laser,
            "t_mw_s": self.t_mw,
            "t_exposure_s": self.t_exposure,
            "sweep_start_hz": self.sweep_start,
            "sweep_stop_hz": self.sweep_stop,
            "sweep_step_hz": self.sweep_step,
            "n_avg": self.n_avg,
            "n_points": self.n_points,
            "n_r": self.n_r,
            "total_time_s": self.total_time,
            "total_time_min": round(self.total_time / 60.0, 2),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PulseSchedule":
        return cls(
            t_laser=d["t_laser_s"],
            t_mw=d["t_mw_s"],
            t_exposure=d["t_exposure_s"],
            sweep_start=d["sweep_start_hz"],
            sweep_stop=d["sweep_stop_hz"],
            sweep_step=d["sweep_step_hz"],
            n_avg=d["n_avg"],
            n_points=d["n_points"],
            n_r=d["n_r"],
            total_time=d["total_time_s"],
        )


def build_schedule(
    t_laser=50e-6,
    t_mw=110e-9,
    t_exposure=20e-3,
    sweep_start=2.65e9,
    sweep_stop=2.88e9,
    sweep_step=1e6,
    n_avg=30,
) -> PulseSchedule:
    """Fill in the derived schedule quantities from the primary settings."""
    if t_laser <= 0 or t_mw <= 0 or t_exposure <= 0:
        raise BadTimingError("pulse durations must be positive")
    if sweep_step <= 0 or sweep_stop < sweep_start or sweep_start <= 0:
        raise BadSweepError("sweep must run upward with a positive step")
    if n_avg < 1:
        raise BadTimingError("n_avg must be at least 1")
    cycle = t_laser + t_mw
    if t_exposure < cycle:
        raise BadTimingError("exposure shorter than one laser+MW cycle")
    # 1e-9 guards the floor against float dust in the division
    n_points = int(math.floor((sweep_stop - sweep_start) / sweep_step + 1e-9)) + 1
    n_r = int(math.floor(t_exposure / cycle + 1e-9))
    total_time = n_points * 2 * n_avg * t_exposure
    return PulseSchedule(
        t_laser=t_laser,
        t_mw=t_mw,
        t_exposure=t_exposure,
        sweep_start=sweep_start,
        sweep_stop=sweep_stop,
        sweep_step=sweep_step,
        n_avg=n_avg,
        n_points=n_points,
        n_r=n_r,
        total_time=total_time,
    )


@dataclass
class ContrastProfile:
    """Per-orientation dip amplitude (fractional contrast) and linewidth (HWHM, Hz)."""

    amplitudes: np.ndarray
    linewidths_hwhm: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        self.linewidths_hwhm = np.asarray(self.linewidths_hwhm, dtype=float)
        if self.amplitudes.shape != (4,) or self.linewidths_hwhm.shape != (4,):
            raise ValueError("profile needs 4 amplitudes and 4 linewidths")
        if np.any(self.amplitudes < 0) or np.any(self.linewidths_hwhm <= 0):
            raise ValueError("amplitudes must be >= 0 and linewidths > 0")


# Default per-orientation contrasts and linewidths (FWHM values halved to
# HWHM as used by the dip model), ordered [111], [1-1-1], [-11-1], [-1-11].
DEFAULT_PROFILE = ContrastProfile(
    amplitudes=np.array([1.138e-2, 0.868e-2, 0.458e-2, 0.677e-2]),
    linewidths_hwhm=np.array([4.942e6, 5.312e6, 4.961e6, 5.169e6]) / 2.0,
)


@dataclass
class DipModel:
    """Four-Lorentzian dip description at one pixel."""

    amplitudes: np.ndarray  # (4,) dimensionless
    linewidths_hwhm: np.ndarray  # (4,) Hz
    frequencies: np.ndarray  # (4,) Hz
    in_sweep: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=bool))

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        self.linewidths_hwhm = np.asarray(self.linewidths_hwhm, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.in_sweep = np.asarray(self.in_sweep, dtype=bool)
        if np.any(self.amplitudes < 0):
            raise ValueError("dip amplitudes must be non-negative")
        if np.any(self.linewidths_hwhm <= 0):
            raise ValueError("dip linewidths must be positive")


def spectrum_model(model: DipModel, nu) -> np.ndarray:
    """Dip depth (positive contrast) of the four-Lorentzian sum at ``nu``."""
    nu = np.asarray(nu, dtype=float)
    out = np.zeros_like(nu, dtype=float)
    for a, g, f in zip(model.amplitudes, model.linewidths_hwhm, model.frequencies):
        out += a * g * g / ((nu - f) ** 2 + g * g)
    return out


def dips_from_field(
    b_total,
    axes=STANDARD_AXES,
    consts=DEFAULT_CONSTANTS,
    profile: ContrastProfile = DEFAULT_PROFILE,
    sweep=None,
) -> DipModel:
    """Dip model for a total field: one lower-branch resonance per orientation.

    ``sweep = (start_hz, stop_hz)`` marks orientations whose resonance falls
    outside ``(start - 5*linewidth, stop)`` via the ``in_sweep`` flags.
    """
    quad = nvcore.project_field(b_total, axes)
    nu_lower, _ = nvcore.resonance_pair(quad.p, consts)
    in_sweep = np.ones(4, dtype=bool)
    if sweep is not None:
        start, stop = sweep
        lo = start - 5.0 * profile.linewidths_hwhm * 2.0
        in_sweep = (nu_lower > lo) & (nu_lower < stop)
    return DipModel(
        amplitudes=profile.amplitudes.copy(),
        linewidths_hwhm=profile.linewidths_hwhm.copy(),
        frequencies=nu_lower,
        in_sweep=in_sweep,
    )


@dataclass
class OdmrCube:
    """Contrast hypercube: ``contrast[y, x, f]`` (float32), frequencies in Hz.

    ``ref_counts_mean`` is the mean reference signal per pixel for a single
    exposure (the shot-noise scale of the acquisition).
    """

    frequencies: np.ndarray  # (F,)
    contrast: np.ndarray  # (H, W, F) float32
    ref_counts_mean: float
    schedule: PulseSchedule
    rng_seed: int | None = None

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.contrast = np.asarray(self.contrast, dtype=np.float32)
        if self.contrast.ndim != 3:
            raise BadDimsError("contrast must be (H, W, F)")
        if self.contrast.shape[2] != len(self.frequencies):
            raise BadDimsError("frequency axis length disagrees with contrast")
        if np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("frequencies must be strictly increasing")

    @property
    def height_px(self):
        return self.contrast.shape[0]

    @property
    def width_px(self):
        return self.contrast.shape[1]

    @property
    def n_freq(self):
        return self.contrast.shape[2]


def synth_cube(
    fieldmap: FieldMap,
    bias,
    schedule: PulseSchedule,
    photons_per_pixel,
    seed=None,
    consts=DEFAULT_CONSTANTS,
    axes=STANDARD_AXES,
    profile: ContrastProfile = DEFAULT_PROFILE,
    amplitude_scale=None,
    frame_by_frame=False,
) -> OdmrCube:
    """Simulate the acquisition over a field map with camera shot noise.

    Per pixel: total field = bias + map value; reference and signal counts
    at each sweep point are Poisson with mean ``photons_per_pixel * n_avg``
    (and ``* (1 - dip)``), aggregated analytically over the averages;
    contrast = 1 - signal/reference. ``seed=None`` (or infinite photon
    count) replaces the draws by their means. ``frame_by_frame=True`` draws
    the ``n_avg`` exposures individually instead (same statistics, slower).
    ``amplitude_scale`` optionally modulates dip amplitudes per pixel (H, W).
    """
    bias = np.asarray(bias, dtype=float)
    h, w = fieldmap.height_px, fieldmap.width_px
    freqs = schedule.frequencies()
    n_f = len(freqs)
    if amplitude_scale is not None:
        amplitude_scale = np.asarray(amplitude_scale, dtype=float)
        if amplitude_scale.shape != (h, w):
            raise BadDimsError("amplitude_scale must match the field map grid")

    noiseless = seed is None or not np.isfinite(photons_per_pixel)
    lam = photons_per_pixel * schedule.n_avg
    contrast = np.empty((h, w, n_f), dtype=np.float32)

    for iy in range(h):
        for ix in range(w):
            model = dips_from_field(
                bias + fieldmap.data[iy, ix],
                axes=axes,
                consts=consts,
                profile=profile,
                sweep=(schedule.sweep_start, schedule.sweep_stop),
            )
            if amplitude_scale is not None:
                model.amplitudes = model.amplitudes * amplitude_scale[iy, ix]
            dip = spectrum_model(model, freqs)
            if noiseless:
                contrast[iy, ix] = dip.astype(np.float32)
                continue
            rng = np.random.default_rng([seed, iy * w + ix])
            if frame_by_frame:
                ref = np.zeros(n_f)
                sig = np.zeros(n_f)
                for _ in range(schedule.n_avg):
                    ref += rng.poisson(photons_per_pixel, size=n_f)
                    sig += rng.poisson(photons_per_pixel * (1.0 - dip))
            else:
                ref = rng.poisson(lam, size=n_f).astype(float)
                sig = rng.poisson(lam * (1.0 - dip)).astype(float)
            ref = np.maximum(ref, 1.0)
            c = 1.0 - sig / ref
            contrast[iy, ix] = np.clip(c, -_CONTRAST_LIMIT, _CONTRAST_LIMIT)

    return OdmrCube(
        frequencies=freqs,
        contrast=contrast,
        ref_counts_mean=float(photons_per_pixel),
        schedule=schedule,
        rng_seed=None if noiseless else int(seed),
    )


def mirror_half_spectrum(cube: OdmrCube, consts=DEFAULT_CONSTANTS) -> OdmrCube:
    """Extend a half-swept cube across the symmetry point at D.

    The output frequency axis is the union of the measured axis and its
    mirror ``2D - nu``, deduplicated. Where a symmetric pair was measured on
    both sides, the lower-branch value is authoritative and the upper-branch
    measurement is replaced, so ``contrast(nu) == contrast(2D - nu)`` holds
    exactly by construction. Single-use by design (the result spans both
    branches). A small sweep overshoot past D is allowed; a cube whose axis
    already extends further above D than below is rejected.
    """
    d = consts.zero_field_splitting
    freqs = cube.frequencies
    if freqs.max() > d and (freqs.max() - d) >= (d - freqs.min()):
        raise AlreadyMirroredError("cube already spans both branches around D")

    n = len(freqs)
    cat = np.concatenate([freqs, 2.0 * d - freqs])
    all_freqs, inv = np.unique(cat, return_inverse=True)
    orig_bin, mir_bin = inv[:n], inv[n:]

    # src[bin] = index of the measured point supplying that bin's value;
    # lower-branch originals are written last so they win every pairing.
    src = np.full(len(all_freqs), -1, dtype=int)
    for k in np.nonzero(freqs > d)[0]:
        src[orig_bin[k]] = k
        if src[mir_bin[k]] < 0:
            src[mir_bin[k]] = k
    for k in np.nonzero(freqs <= d)[0]:
        src[orig_bin[k]] = k
        src[mir_bin[k]] = k

    return OdmrCube(
        frequencies=all_freqs,
        contrast=cube.contrast[:, :, src],
        ref_counts_mean=cube.ref_counts_mean,
        schedule=cube.schedule,
        rng_seed=cube.rng_seed,
    )


def rabi_trace(
    durations,
    t_pi_true=110e-9,
    decay=2e-6,
    f0=1e4,
    contrast=0.2,
    seed=None,
):
    """Synthetic Rabi fluorescence trace.

    ``fluor(tau) = f0 * (1 - (c/2) * (1 - cos(pi tau / t_pi) * exp(-tau/decay)))``
    so the first minimum sits at ``t_pi_true``. ``decay=None`` disables
    damping. With a seed, counts are Poisson-distributed around the model.
    Returns ``(durations, fluorescence)``.
    """
    tau = np.asarray(durations, dtype=float)
    if np.any(tau < 0):
        raise ValueError("durations must be non-negative")
    if np.any(np.diff(tau) < 0):
        raise ValueError("durations must be sorted")
    envelope = 1.0 if decay is None else np.exp(-tau / decay)
    fluor = f0 * (1.0 - 0.5 * contrast * (1.0 - np.cos(np.pi * tau / t_pi_true) * envelope))
    if seed is not None:
        fluor = np.random.default_rng(seed).poisson(fluor).astype(float)
    return tau, fluor


def zero_cube_like(schedule: PulseSchedule, width_px, height_px, photons_per_pixel=1e4):
    """Noiseless all-zero-contrast cube, handy for tests and plumbing."""
    freqs = schedule.frequencies()
    return OdmrCube(
        frequencies=freqs,
        contrast=np.zeros((height_px, width_px, len(freqs)), dtype=np.float32),
        ref_counts_mean=float(photons_per_pixel),
        schedule=schedule,
        rng_seed=None,
    )
