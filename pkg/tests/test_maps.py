import numpy as np
import pytest
import shapely
from shapely.geometry import Polygon

from nvmag import (
    DEFAULT_CONSTANTS,
    DEFAULT_PROFILE,
    BiasCalibration,
    Region,
    VectorMaps,
    calibrate_bias,
    counts_from_sensitivity,
    default_corner_regions,
    default_cross_scene,
    dips_from_field,
    field_map,
    frequency_maps,
    magnitude_and_angle,
    moving_average_3x3,
    project_field,
    resonance_pair,
    run_pipeline,
    sensitivity,
    sensitivity_report,
    synth_cube,
    t2star_from_linewidth,
    vector_maps,
    zero_field_map,
)
from nvmag.errors import AmbiguousSignsError, NonPositiveError
from nvmag.maps import _greedy_assign
from nvmag.strayfield import GridSpec, grid_coordinates

from conftest import PAPER_BIAS

PAPER_CONTRASTS = np.array([1.138e-2, 0.868e-2, 0.458e-2, 0.677e-2])
PAPER_LINEWIDTHS = np.array([4.942e6, 5.312e6, 4.961e6, 5.169e6])
PAPER_ETAS = np.array([828e-9, 1167e-9, 2066e-9, 1456e-9])


def _exact_calibration(bias=PAPER_BIAS):
    quad = project_field(bias)
    nu, _ = resonance_pair(quad.p)
    return BiasCalibration(
        region=Region(0, 0, 10, 10),
        b0=np.asarray(bias, dtype=float),
        sign_pattern=quad.sign_pattern,
        reference_projections=quad.p,
        reference_resonances=nu,
        reference_amplitudes=DEFAULT_PROFILE.amplitudes.copy(),
        reference_linewidths_hwhm=DEFAULT_PROFILE.linewidths_hwhm.copy(),
        baseline=0.0,
    )


def test_calibrate_bias_closed_loop(schedule):
    fm = zero_field_map(12, 12, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=21)
    calib = calibrate_bias(cube, Region(0, 0, 12, 12))
    assert np.abs(calib.b0 - PAPER_BIAS).max() < 5e-6
    assert list(calib.sign_pattern) == [1, 1, -1, -1]
    # orientation labels follow the contrast ranking
    assert np.argmax(calib.reference_amplitudes) == 0
    assert np.argmin(calib.reference_amplitudes) == 2


def test_calibrate_bias_region_too_small(bias_cube_noisy):
    with pytest.raises(ValueError):
        calibrate_bias(bias_cube_noisy, Region(0, 0, 8, 8))
    with pytest.raises(ValueError):
        calibrate_bias(bias_cube_noisy, Region(6, 6, 10, 10))  # outside 12x12


def test_calibrate_bias_zero_field_is_ambiguous(schedule):
    fm = zero_field_map(10, 10, 1e-6)
    cube = synth_cube(fm, np.zeros(3), schedule, photons_per_pixel=1e4, seed=22)
    with pytest.raises(AmbiguousSignsError):
        calibrate_bias(cube, Region(0, 0, 10, 10))


def test_calibrate_bias_quiet_corner_of_structure_scene(schedule):
    # corner pixels carry only a small stray-field contribution, checked
    # against the forward model itself
    grid = GridSpec(48, 48, 82.75e-6 / 48)
    scene = default_cross_scene(1, grid=grid)
    fm = field_map(scene)
    corner = fm.data[:10, :10].reshape(-1, 3)
    corner_mean = np.linalg.norm(corner.mean(axis=0))
    assert corner_mean < 25e-6  # verified quiet-ish corner
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=23)
    calib = calibrate_bias(cube, Region(0, 0, 10, 10))
    assert np.abs(calib.b0 - PAPER_BIAS).max() < corner_mean + 10e-6


def test_greedy_assignment_bijection():
    rng = np.random.default_rng(1)
    for _ in range(200):
        ref = np.sort(rng.uniform(2.70e9, 2.86e9, 4))
        while np.diff(ref).min() < 4e6:
            ref = np.sort(rng.uniform(2.70e9, 2.86e9, 4))
        fitted = rng.permutation(ref + rng.uniform(-1.5e6, 1.5e6, 4))
        assign, ok = _greedy_assign(fitted, ref)
        assert sorted(assign) == [0, 1, 2, 3]  # bijection
        assert ok
        assert np.all(np.abs(fitted[assign] - ref) < 2e6)


def test_greedy_assignment_flags_ambiguity():
    ref = np.array([2.70e9, 2.75e9, 2.80e9, 2.85e9])
    fitted = np.array([2.700e9, 2.7005e9, 2.80e9, 2.85e9])  # two dips on one ref
    _, ok = _greedy_assign(fitted, ref)
    assert not ok


def test_frequency_maps_uniform_cube(schedule):
    fm = zero_field_map(8, 8, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=24)
    sm = moving_average_3x3(cube)
    calib = calibrate_bias(sm, Region(0, 0, 8, 8))
    fmaps = frequency_maps(sm, calib, workers=1)
    assert fmaps.converged.all() and fmaps.assigned.all()
    # spatially constant within a few Monte-Carlo standard errors
    for i in range(4):
        spread = fmaps.nu[:, :, i].std()
        assert spread < 2.0 * 0.4e6


def test_frequency_maps_patch_sign_bookkeeping(schedule):
    # +z patch moves the [111] resonance opposite to the [1-1-1] one
    fm = zero_field_map(9, 9, 1e-6)
    fm.data[3:6, 3:6, 2] = 0.28e-3
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=None)
    calib = _exact_calibration()
    fmaps = frequency_maps(cube, calib, workers=1)
    shift_111 = fmaps.nu[4, 4, 0] - fmaps.nu[0, 0, 0]
    shift_1m1m1 = fmaps.nu[4, 4, 1] - fmaps.nu[0, 0, 1]
    assert shift_111 < -1e5 and shift_1m1m1 > 1e5


def test_frequency_maps_nan_pixel_flagged(schedule, bias_cube_noisy):
    cube = moving_average_3x3(bias_cube_noisy)
    cube.contrast[5, 5, :] = np.nan
    calib = _exact_calibration()
    fmaps = frequency_maps(cube, calib, workers=1)
    assert not fmaps.converged[5, 5]
    assert np.isnan(fmaps.nu[5, 5]).all()
    assert fmaps.converged.sum() == cube.height_px * cube.width_px - 1


def test_vector_maps_bias_only_closed_loop(schedule):
    fm = zero_field_map(10, 10, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=25)
    calib, fmaps, vmaps = run_pipeline(cube, Region(0, 0, 10, 10), workers=1)
    assert vmaps.bias_subtracted
    mean_b = np.abs(vmaps.b[vmaps.valid].mean(axis=0))
    assert np.linalg.norm(vmaps.b[vmaps.valid], axis=1).mean() < 10e-6
    # per-component bias below 3x the Monte-Carlo standard error
    se = vmaps.b[vmaps.valid].std(axis=0) / np.sqrt(vmaps.valid.sum() / 9.0)
    assert np.all(mean_b < 3.0 * se + 1e-7)


def test_vector_maps_without_subtraction(schedule):
    fm = zero_field_map(10, 10, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=26)
    calib, fmaps, vmaps = run_pipeline(
        cube, Region(0, 0, 10, 10), subtract_bias=False, workers=1
    )
    assert np.abs(vmaps.b[vmaps.valid] - PAPER_BIAS).max() < 50e-6


def test_vector_maps_r2_patch_recovery(schedule):
    # uniform patch producing the measured-structure field at the sensing
    # plane, recovered through the full pipeline at realistic noise
    patch = np.array([-0.24e-3, 0.04e-3, 0.28e-3])
    fm = zero_field_map(24, 24, 1e-6)
    fm.data[10:18, 10:18] = patch
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=42)
    calib, fmaps, vmaps = run_pipeline(cube, Region(0, 0, 10, 10))
    inner = vmaps.b[12:16, 12:16][vmaps.valid[12:16, 12:16]]
    assert inner.shape[0] > 0
    assert np.abs(inner.mean(axis=0) - patch).max() < 30e-6


def test_vector_maps_exact_frequency_maps_reproduce_field(schedule):
    # noiseless resonances, no fitting: reconstruction must match the
    # forward model pixel by pixel
    h = w = 6
    fm = zero_field_map(h, w, 1e-6)
    rng = np.random.default_rng(3)
    fm.data[:] = rng.uniform(-2e-4, 2e-4, (h, w, 3))
    calib = _exact_calibration()

    from nvmag.maps import FrequencyMaps

    nu = np.empty((h, w, 4))
    for iy in range(h):
        for ix in range(w):
            nu[iy, ix], _ = resonance_pair(project_field(PAPER_BIAS + fm.data[iy, ix]).p)
    fmaps = FrequencyMaps(
        nu=nu,
        amplitudes=np.broadcast_to(DEFAULT_PROFILE.amplitudes, (h, w, 4)).copy(),
        gamma_hwhm=np.broadcast_to(DEFAULT_PROFILE.linewidths_hwhm, (h, w, 4)).copy(),
        baseline=np.zeros((h, w)),
        rss=np.zeros((h, w)),
        converged=np.ones((h, w), dtype=bool),
        assigned=np.ones((h, w), dtype=bool),
    )
    vmaps = vector_maps(fmaps, calib, subtract_bias=True)
    assert np.abs(vmaps.b - fm.data).max() < 1e-9


def test_magnitude_and_angle_basic():
    b = np.zeros((2, 2, 3))
    b[0, 0] = [1e-3, 1e-3, 0.0]
    b[0, 1] = [0.0, 0.0, 1e-3]
    vm = VectorMaps(
        b=b,
        valid=np.ones((2, 2), dtype=bool),
        residual=np.zeros((2, 2)),
        sign_risk=np.zeros((2, 2, 4), dtype=bool),
        bias_subtracted=True,
    )
    mag, ang, defined = magnitude_and_angle(vm, noise_floor=0.0)
    assert mag[0, 0] == pytest.approx(np.sqrt(2) * 1e-3)
    assert ang[0, 0] == pytest.approx(np.pi / 4)
    assert not defined[0, 1]  # purely out-of-plane
    assert np.isnan(ang[0, 1])


def test_overlap_angle_of_45_degree_state():
    # forward-model check: the in-plane field right under the crossing
    # region aligns with the 45-degree remanent magnetization
    grid = GridSpec(64, 64, 82.75e-6 / 64)
    scene = default_cross_scene(1, grid=grid)
    fm = field_map(scene)
    x, y = grid_coordinates(grid)
    gx, gy = np.meshgrid(x, y)
    overlap = Polygon(scene.regions[2].polygon)
    inside = shapely.contains_xy(overlap, gx.ravel(), gy.ravel()).reshape(64, 64)
    assert inside.sum() >= 9
    vm = VectorMaps(
        b=fm.data,
        valid=inside,
        residual=np.zeros(inside.shape),
        sign_risk=np.zeros(inside.shape + (4,), dtype=bool),
        bias_subtracted=True,
    )
    _, ang, defined = magnitude_and_angle(vm, noise_floor=1e-6)
    median_deg = np.degrees(np.median(ang[inside & defined]))
    assert abs(median_deg - 45.0) < 10.0


def test_t2star_values():
    assert t2star_from_linewidth(4.942e6) == pytest.approx(64.41e-9, abs=5e-12)
    assert t2star_from_linewidth(5.312e6) == pytest.approx(59.92e-9, abs=5e-12)
    assert t2star_from_linewidth(1.0 / np.pi) == pytest.approx(1.0)
    with pytest.raises(NonPositiveError):
        t2star_from_linewidth(0.0)


def test_sensitivity_cross_prediction():
    s = counts_from_sensitivity(PAPER_ETAS[0], PAPER_CONTRASTS[0], PAPER_LINEWIDTHS[0], 50e-6)
    assert s == pytest.approx(1.039e4, rel=0.01)
    eta = sensitivity(PAPER_CONTRASTS, PAPER_LINEWIDTHS, s, 50e-6)
    assert np.all(np.abs(eta / PAPER_ETAS - 1.0) < 0.02)


def test_sensitivity_scaling_laws():
    base = sensitivity(0.01, 5e6, 1e4, 50e-6)
    assert sensitivity(0.02, 5e6, 1e4, 50e-6) == pytest.approx(base / 2.0, rel=1e-12)
    assert sensitivity(0.01, 5e6, 4e4, 50e-6) == pytest.approx(base / 2.0, rel=1e-12)
    # more coherence time helps, for fixed overhead
    assert sensitivity(0.01, 2e6, 1e4, 50e-6) < base
    with pytest.raises(NonPositiveError):
        sensitivity(-0.01, 5e6, 1e4, 50e-6)


def test_sensitivity_report_closed_loop(schedule):
    fm = zero_field_map(20, 20, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1.039e4, seed=27)
    sm = moving_average_3x3(cube)
    calib = calibrate_bias(sm, Region(0, 0, 10, 10))
    fmaps = frequency_maps(sm, calib)
    report = sensitivity_report(cube, fmaps, default_corner_regions(20, 20, size=10))
    assert np.all(np.abs(report.eta / PAPER_ETAS - 1.0) < 0.10)
    assert np.allclose(report.t2_star, 1.0 / (np.pi * report.gamma_fwhm))


def test_sensitivity_report_zero_noise_deterministic(schedule):
    fm = zero_field_map(12, 12, 1e-6)
    cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1.039e4, seed=None)
    calib = _exact_calibration()
    fmaps = frequency_maps(cube, calib)
    report = sensitivity_report(cube, fmaps, default_corner_regions(12, 12, size=5))
    assert np.all(np.abs(report.contrast / PAPER_CONTRASTS - 1.0) < 1e-3)
    assert np.all(np.abs(report.gamma_fwhm / PAPER_LINEWIDTHS - 1.0) < 1e-3)
    report2 = sensitivity_report(cube, fmaps, default_corner_regions(12, 12, size=5))
    assert np.array_equal(report.eta, report2.eta)


def test_sensitivity_report_photon_scaling(schedule):
    fm = zero_field_map(20, 20, 1e-6)
    etas = []
    for photons in (1e4, 2e4):
        cube = synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=photons, seed=28)
        sm = moving_average_3x3(cube)
        calib = calibrate_bias(sm, Region(0, 0, 10, 10))
        fmaps = frequency_maps(sm, calib)
        report = sensitivity_report(cube, fmaps, default_corner_regions(20, 20, size=10))
        etas.append(report.eta)
    ratio = etas[0] / etas[1]
    assert np.all(np.abs(ratio - np.sqrt(2.0)) < 0.05 * np.sqrt(2.0))


def test_calibration_json_round_trip(schedule):
    calib = _exact_calibration()
    loaded = BiasCalibration.from_json_dict(calib.to_json_dict())
    assert np.allclose(loaded.b0, calib.b0)
    assert np.array_equal(loaded.sign_pattern, calib.sign_pattern)
    assert np.allclose(loaded.reference_resonances, calib.reference_resonances)
