"""End-to-end inverse pipeline: contrast cube -> per-orientation frequency
maps -> signed projections -> lab-frame vector maps -> magnitude/angle and
shot-noise sensitivity estimates, with bias calibration and subtraction.
"""

from dataclasses import dataclass

import numpy as np

from . import nvcore
from .errors import NonPositiveError
from .fitting import (
    SpectrumFit,
    fit_cube_pixels,
    fit_four_lorentzians,
    fwhm_to_hwhm,
    hwhm_to_fwhm,
    initial_guess,
    moving_average_3x3,
)
from .nvcore import DEFAULT_CONSTANTS, ResonanceQuad
from .synth import DipModel, OdmrCube

# Eq. prefactor of the shot-noise sensitivity for an ensemble line scan.
_SENSITIVITY_PREFACTOR = 8.0 / (3.0 * np.sqrt(3.0))

# Dips ranked by contrast map onto orientations in this order: the brightest
# dip belongs to [111], then [1-1-1], then [-1-11], then [-11-1]. This is the
# documented assignment convention for calibration spectra and matches the
# default synthesis profile.
DEFAULT_AMPLITUDE_RANK = (0, 1, 3, 2)


@dataclass(frozen=True)
class Region:
    """Pixel rectangle: x/y of the top-left corner plus width/height."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("region must have positive size")
        if self.x < 0 or self.y < 0:
            raise ValueError("region origin must be non-negative")

    def slices(self):
        return slice(self.y, self.y + self.height), slice(self.x, self.x + self.width)

    def validate_inside(self, width_px, height_px):
        if self.x + self.width > width_px or self.y + self.height > height_px:
            raise ValueError("region extends outside the image")


def default_corner_regions(width_px, height_px, size=10):
    """The four size x size corner rectangles of an image."""
    return [
        Region(0, 0, size, size),
        Region(width_px - size, 0, size, size),
        Region(0, height_px - size, size, size),
        Region(width_px - size, height_px - size, size, size),
    ]


@dataclass
class BiasCalibration:
    """Reference extracted from a quiet region: bias field and dip bookkeeping."""

    region: Region
    b0: np.ndarray  # (3,) tesla
    sign_pattern: np.ndarray  # (4,)
    reference_projections: np.ndarray  # (4,) tesla, signed
    reference_resonances: np.ndarray  # (4,) Hz, orientation order
    reference_amplitudes: np.ndarray  # (4,)
    reference_linewidths_hwhm: np.ndarray  # (4,) Hz
    baseline: float

    def to_json_dict(self) -> dict:
        return {
            "region": [self.region.x, self.region.y, self.region.width, self.region.height],
            "b0_t": self.b0.tolist(),
            "sign_pattern": [int(s) for s in self.sign_pattern],
            "reference_projections_t": self.reference_projections.tolist(),
            "reference_resonances_hz": self.reference_resonances.tolist(),
            "reference_amplitudes": self.reference_amplitudes.tolist(),
            "reference_linewidths_hwhm_hz": self.reference_linewidths_hwhm.tolist(),
            "baseline": self.baseline,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BiasCalibration":
        return cls(
            region=Region(*d["region"]),
            b0=np.asarray(d["b0_t"], dtype=float),
            sign_pattern=np.asarray(d["sign_pattern"], dtype=int),
            reference_projections=np.asarray(d["reference_projections_t"], dtype=float),
            reference_resonances=np.asarray(d["reference_resonances_hz"], dtype=float),
            reference_amplitudes=np.asarray(d["reference_amplitudes"], dtype=float),
            reference_linewidths_hwhm=np.asarray(d["reference_linewidths_hwhm_hz"], dtype=float),
            baseline=float(d["baseline"]),
        )


def calibrate_bias(
    cube: OdmrCube,
    region: Region,
    consts=DEFAULT_CONSTANTS,
    amplitude_rank=DEFAULT_AMPLITUDE_RANK,
) -> BiasCalibration:
    """Extract the bias field from the mean spectrum of a quiet region.

    The region spectrum is fitted with four Lorentzians; fitted dips are
    assigned to orientations by contrast rank (see
    :data:`DEFAULT_AMPLITUDE_RANK`), then the sign search reconstructs the
    bias vector. The region must be at least 10 x 10 pixels.
    """
    if region.width < 10 or region.height < 10:
        raise ValueError("calibration region must be at least 10x10 pixels")
    region.validate_inside(cube.width_px, cube.height_px)

    sy, sx = region.slices()
    spectrum = cube.contrast[sy, sx].astype(float).mean(axis=(0, 1))
    guess = initial_guess(cube.frequencies, spectrum)
    fit = fit_four_lorentzians(cube.frequencies, spectrum, guess)

    by_rank = np.argsort(fit.amplitudes)[::-1]
    nu = np.empty(4)
    amp = np.empty(4)
    glw = np.empty(4)
    for rank, dip_idx in enumerate(by_rank):
        orient = amplitude_rank[rank]
        nu[orient] = fit.nu[dip_idx]
        amp[orient] = fit.amplitudes[dip_idx]
        glw[orient] = fit.gamma_hwhm[dip_idx]

    quad, b0 = nvcore.resolve_bias_signs(ResonanceQuad(nu), consts)
    return BiasCalibration(
        region=region,
        b0=b0,
        sign_pattern=quad.sign_pattern,
        reference_projections=quad.p,
        reference_resonances=nu,
        reference_amplitudes=amp,
        reference_linewidths_hwhm=glw,
        baseline=fit.baseline,
    )


@dataclass
class FrequencyMaps:
    """Per-orientation resonance maps plus the per-pixel fit bookkeeping.

    Arrays indexed ``[y, x, orientation]`` except the per-pixel flags.
    """

    nu: np.ndarray  # (H, W, 4) Hz
    amplitudes: np.ndarray  # (H, W, 4)
    gamma_hwhm: np.ndarray  # (H, W, 4) Hz
    baseline: np.ndarray  # (H, W)
    rss: np.ndarray  # (H, W)
    converged: np.ndarray  # (H, W) bool
    assigned: np.ndarray  # (H, W) bool, False on ambiguous dip matching


def _greedy_assign(nu_fit, reference, ambiguity_window=2e6):
    """Greedy minimum-distance bijection of fitted dips onto references.

    Returns ``(nu_by_orientation_index, ok)`` where the index array maps
    orientation j to the fitted dip assigned to it. ``ok`` is False when
    more than one fitted dip sits within ``ambiguity_window`` of the same
    reference.
    """
    cost = np.abs(nu_fit[:, None] - reference[None, :])  # (dip, orient)
    ok = not np.any((cost < ambiguity_window).sum(axis=0) > 1)
    assign = np.full(4, -1, dtype=int)
    c = cost.copy()
    for _ in range(4):
        i, j = np.unravel_index(np.argmin(c), c.shape)
        assign[j] = i
        c[i, :] = np.inf
        c[:, j] = np.inf
    return assign, ok


def frequency_maps(cube: OdmrCube, calib: BiasCalibration, workers=None) -> FrequencyMaps:
    """Fit every pixel and label each fitted dip with its NV orientation.

    The cube is expected to be spatially pre-averaged (see
    :func:`nvmag.fitting.moving_average_3x3`). Dips are matched to the
    calibration reference resonances by greedy nearest distance; pixels with
    ambiguous matching or non-converged fits are flagged.
    """
    base_guess = DipModel(
        amplitudes=calib.reference_amplitudes,
        linewidths_hwhm=calib.reference_linewidths_hwhm,
        frequencies=calib.reference_resonances,
    )
    raw = fit_cube_pixels(cube, base_guess, baseline_guess=calib.baseline, workers=workers)

    h, w = cube.height_px, cube.width_px
    nu = np.full((h, w, 4), np.nan)
    amp = np.full((h, w, 4), np.nan)
    glw = np.full((h, w, 4), np.nan)
    assigned = np.zeros((h, w), dtype=bool)
    converged = raw["converged"]

    for iy in range(h):
        for ix in range(w):
            nu_fit = raw["nu"][iy, ix]
            if not np.all(np.isfinite(nu_fit)):
                converged[iy, ix] = False
                continue
            order, ok = _greedy_assign(nu_fit, calib.reference_resonances)
            assigned[iy, ix] = ok
            nu[iy, ix] = nu_fit[order]
            amp[iy, ix] = raw["amplitudes"][iy, ix][order]
            glw[iy, ix] = raw["gamma_hwhm"][iy, ix][order]

    return FrequencyMaps(
        nu=nu,
        amplitudes=amp,
        gamma_hwhm=glw,
        baseline=raw["baseline"],
        rss=raw["rss"],
        converged=converged,
        assigned=assigned,
    )


@dataclass
class VectorMaps:
    """Reconstructed lab-frame field per pixel with validity bookkeeping."""

    b: np.ndarray  # (H, W, 3) tesla
    valid: np.ndarray  # (H, W) bool
    residual: np.ndarray  # (H, W) tesla
    sign_risk: np.ndarray  # (H, W, 4) bool
    bias_subtracted: bool


def vector_maps(
    fmaps: FrequencyMaps,
    calib: BiasCalibration,
    subtract_bias=True,
    consts=DEFAULT_CONSTANTS,
    residual_limit_factor=5.0,
    linewidth_inflation_limit=1.5,
) -> VectorMaps:
    """Signed projections with calibration signs, reconstructed per pixel.

    Validity requires a converged, unambiguously assigned fit, no sign-flip
    risk on any orientation, a reconstruction residual below
    ``residual_limit_factor`` times the median residual of converged pixels
    (the residual measures how inconsistent the four projections are with
    any single field vector), and fitted linewidths within
    ``linewidth_inflation_limit`` times the calibration reference. Strongly
    broadened lines indicate field dispersion within a pixel, where dip
    positions stop tracking the mean field.
    """
    # Inline the signed-projection arithmetic: failed pixels carry NaN, which
    # the quad constructors reject by design.
    with np.errstate(invalid="ignore"):
        m = (consts.zero_field_splitting - fmaps.nu) / consts.gyromagnetic_ratio
        signs = np.where(calib.reference_projections < 0, -1.0, 1.0)
        p = signs * m
        sign_risk = m > 2.0 * np.abs(calib.reference_projections)
        b, residual = nvcore.reconstruct_vector(p)

    valid = fmaps.converged & fmaps.assigned & ~np.any(sign_risk, axis=-1)
    finite_resid = residual[fmaps.converged & np.isfinite(residual)]
    if finite_resid.size:
        limit = residual_limit_factor * max(np.median(finite_resid), 1e-12)
        valid &= residual <= limit
    if linewidth_inflation_limit is not None:
        with np.errstate(invalid="ignore"):
            inflation = fmaps.gamma_hwhm / calib.reference_linewidths_hwhm
            valid &= ~np.any(inflation > linewidth_inflation_limit, axis=-1)
    if subtract_bias:
        b = b - calib.b0
    return VectorMaps(
        b=b,
        valid=valid,
        residual=residual,
        sign_risk=sign_risk,
        bias_subtracted=subtract_bias,
    )


def magnitude_and_angle(vm: VectorMaps, noise_floor=None):
    """Field magnitude and in-plane angle maps.

    The angle ``atan2(by, bx)`` is flagged undefined where the in-plane
    magnitude does not rise above three times the noise floor (estimated
    robustly from the valid in-plane components when not given).

    Returns ``(magnitude, angle, angle_defined)``.
    """
    bx = vm.b[..., 0]
    by = vm.b[..., 1]
    magnitude = np.linalg.norm(vm.b, axis=-1)
    inplane = np.hypot(bx, by)
    if noise_floor is None:
        vals = np.concatenate([bx[vm.valid].ravel(), by[vm.valid].ravel()])
        vals = vals[np.isfinite(vals)]
        if vals.size:
            noise_floor = 1.4826 * np.median(np.abs(vals - np.median(vals)))
        else:
            noise_floor = 0.0
    angle_defined = vm.valid & (inplane > 3.0 * noise_floor)
    angle = np.where(angle_defined, np.arctan2(by, bx), np.nan)
    return magnitude, angle, angle_defined


def t2star_from_linewidth(gamma_fwhm) -> float:
    """Dephasing time from the fitted dip linewidth (FWHM): 1 / (pi * width)."""
    gamma_fwhm = np.asarray(gamma_fwhm, dtype=float)
    if np.any(gamma_fwhm <= 0):
        raise NonPositiveError("linewidth must be positive")
    out = 1.0 / (np.pi * gamma_fwhm)
    return float(out) if out.ndim == 0 else out


def sensitivity(contrast, gamma_fwhm, counts, t_overhead, consts=DEFAULT_CONSTANTS):
    """Shot-noise-limited sensitivity (T/sqrt(Hz)) of a pulsed measurement.

    ``eta = (8 / 3 sqrt(3)) * (hbar / g_e mu_B) / (C sqrt(S)) *
    sqrt(t_o + T2*) / T2*`` with ``T2* = 1 / (pi * linewidth)``.
    """
    contrast = np.asarray(contrast, dtype=float)
    counts = np.asarray(counts, dtype=float)
    t_overhead = np.asarray(t_overhead, dtype=float)
    if np.any(contrast <= 0) or np.any(counts <= 0) or np.any(t_overhead <= 0):
        raise NonPositiveError("contrast, counts and overhead time must be positive")
    t2 = t2star_from_linewidth(gamma_fwhm)
    eta = (
        _SENSITIVITY_PREFACTOR
        * consts.hbar_over_ge_mub
        / (contrast * np.sqrt(counts))
        * np.sqrt(t_overhead + t2)
        / t2
    )
    return float(eta) if np.ndim(eta) == 0 else eta


def counts_from_sensitivity(eta, contrast, gamma_fwhm, t_overhead, consts=DEFAULT_CONSTANTS):
    """Invert :func:`sensitivity` for the per-pixel signal counts S."""
    if eta <= 0:
        raise NonPositiveError("sensitivity must be positive")
    t2 = t2star_from_linewidth(gamma_fwhm)
    root_s = (
        _SENSITIVITY_PREFACTOR
        * consts.hbar_over_ge_mub
        / (contrast * eta)
        * np.sqrt(t_overhead + t2)
        / t2
    )
    return float(root_s**2)


@dataclass
class SensitivityReport:
    """Per-orientation sensitivity estimate from corner-region fit averages."""

    contrast: np.ndarray  # (4,)
    gamma_fwhm: np.ndarray  # (4,) Hz
    t2_star: np.ndarray  # (4,) s
    counts: float
    t_overhead: float
    eta: np.ndarray  # (4,) T/sqrt(Hz)

    def to_json_dict(self) -> dict:
        return {
            "contrast": self.contrast.tolist(),
            "gamma_fwhm_hz": self.gamma_fwhm.tolist(),
            "t2_star_s": self.t2_star.tolist(),
            "counts": self.counts,
            "t_overhead_s": self.t_overhead,
            "eta_t_per_sqrt_hz": self.eta.tolist(),
        }


def sensitivity_report(
    cube: OdmrCube,
    fmaps: FrequencyMaps,
    corner_regions,
    consts=DEFAULT_CONSTANTS,
) -> SensitivityReport:
    """Spatially averaged sensitivity from the image corners.

    Fitted contrast and linewidth are pooled over the given (disjoint)
    corner regions per orientation; counts come from the cube's reference
    level and the overhead time is the laser pulse duration.
    """
    masks = []
    for region in corner_regions:
        region.validate_inside(cube.width_px, cube.height_px)
        sy, sx = region.slices()
        m = np.zeros((cube.height_px, cube.width_px), dtype=bool)
        m[sy, sx] = True
        masks.append(m)
    pooled = np.any(masks, axis=0) & fmaps.converged & fmaps.assigned

    c = np.array([np.nanmean(fmaps.amplitudes[pooled][:, i]) for i in range(4)])
    g_fwhm = np.array([hwhm_to_fwhm(np.nanmean(fmaps.gamma_hwhm[pooled][:, i])) for i in range(4)])
    t_o = cube.schedule.t_laser
    s = cube.ref_counts_mean
    eta = sensitivity(c, g_fwhm, s, t_o, consts)
    return SensitivityReport(
        contrast=c,
        gamma_fwhm=g_fwhm,
        t2_star=t2star_from_linewidth(g_fwhm),
        counts=float(s),
        t_overhead=float(t_o),
        eta=eta,
    )


def run_pipeline(
    cube: OdmrCube,
    calib_region: Region,
    subtract_bias=True,
    consts=DEFAULT_CONSTANTS,
    workers=None,
):
    """Full inverse chain: pre-average, calibrate, fit, reconstruct.

    Returns ``(calibration, frequency_maps, vector_maps)``.
    """
    smoothed = moving_average_3x3(cube)
    calib = calibrate_bias(smoothed, calib_region, consts)
    fmaps = frequency_maps(smoothed, calib, workers=workers)
    vmaps = vector_maps(fmaps, calib, subtract_bias=subtract_bias, consts=consts)
    return calib, fmaps, vmaps
