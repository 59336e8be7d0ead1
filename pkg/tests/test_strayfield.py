import numpy as np
import pytest
import shapely
from shapely.geometry import Polygon

from nvmag import (
    FieldMap,
    GridSpec,
    MagnetRegion,
    Scene,
    default_cross_scene,
    dipole_field,
    field_map,
    prism_field_oracle,
    rasterize,
    zero_field_map,
)
from nvmag.errors import (
    BadStateError,
    EmptySceneError,
    InsidePrismError,
    SingularPointError,
)
from nvmag.strayfield import grid_coordinates

UM = 1e-6


def _square(side, center=(0.0, 0.0)):
    h = side / 2.0
    cx, cy = center
    return np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]])


def test_dipole_on_axis():
    b = dipole_field(np.array([0.0, 0.0, 1e-6]), np.zeros((1, 3)), np.array([[0.0, 0.0, 1e-15]]))
    assert np.allclose(b, [0.0, 0.0, 2e-4], rtol=1e-12)


def test_dipole_equatorial():
    b = dipole_field(np.array([1e-6, 0.0, 0.0]), np.zeros((1, 3)), np.array([[0.0, 0.0, 1e-15]]))
    assert np.allclose(b, [0.0, 0.0, -1e-4], rtol=1e-12)


def test_dipole_moment_flip_negates_field_exactly():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-1, 1, (20, 3)) * UM
    mom = rng.uniform(-1, 1, (20, 3)) * 1e-15
    pts = rng.uniform(2, 3, (7, 3)) * UM
    assert np.array_equal(dipole_field(pts, pos, mom), -dipole_field(pts, pos, -mom))


def test_dipole_singular_point():
    with pytest.raises(SingularPointError):
        dipole_field(np.zeros(3), np.zeros((1, 3)), np.ones((1, 3)), min_distance=1e-9)


def test_rasterize_exact_tiling():
    scene = Scene(
        regions=[MagnetRegion(_square(1 * UM, (0.5 * UM, 0.5 * UM)), [8e5, 0, 0], 100e-9)],
        standoff=500e-9,
        grid=GridSpec(4, 4, UM),
        cell_size=0.5 * UM,
    )
    positions, moments = rasterize(scene)
    assert len(positions) == 4
    assert np.allclose(moments, moments[0])
    expected = 8e5 * (0.5 * UM) ** 2 * 100e-9
    assert np.allclose(moments[:, 0], expected, rtol=1e-12)


def test_rasterize_total_moment_matches_area():
    # ellipse polygon, cell at a tenth of the minor width
    scene = default_cross_scene(1, cell_size=0.5 * UM)
    scene = Scene(scene.regions[:1], scene.standoff, scene.grid, scene.cell_size)
    _, moments = rasterize(scene)
    area = Polygon(scene.regions[0].polygon).area
    expected = 8e5 * area * 100e-9
    assert abs(moments[:, 0].sum() - expected) / expected < 0.02


def test_rasterize_empty_scene():
    with pytest.raises(EmptySceneError):
        rasterize(Scene([], 500e-9, GridSpec(4, 4, UM), 0.5 * UM))


def test_convergence_in_cell_size():
    # halving the cell changes the map by < 1% at standoff >= 2 * cell
    region = MagnetRegion(_square(4 * UM), [8e5, 0, 0], 100e-9)
    grid = GridSpec(16, 16, 0.5 * UM)
    maps = []
    for cell in (0.25 * UM, 0.125 * UM):
        scene = Scene([region], standoff=0.5 * UM, grid=grid, cell_size=cell)
        maps.append(field_map(scene).data)
    diff = np.linalg.norm(maps[0] - maps[1]) / np.linalg.norm(maps[1])
    assert diff < 0.01


def test_field_map_empty_scene_is_zero():
    scene = Scene([], 500e-9, GridSpec(8, 8, UM), 0.5 * UM)
    fm = field_map(scene)
    assert np.all(fm.data == 0.0)


def test_field_map_linearity_exact():
    region = MagnetRegion(_square(2 * UM), [8e5, 3e5, 0], 100e-9)
    grid = GridSpec(8, 8, 0.5 * UM)
    plus = field_map(Scene([region], 0.5 * UM, grid, 0.2 * UM))
    minus_region = MagnetRegion(_square(2 * UM), [-8e5, -3e5, 0], 100e-9)
    minus = field_map(Scene([minus_region], 0.5 * UM, grid, 0.2 * UM))
    assert np.array_equal(plus.data, -minus.data)


def test_field_map_superposition():
    r1 = MagnetRegion(_square(2 * UM, (-3 * UM, 0)), [8e5, 0, 0], 100e-9)
    r2 = MagnetRegion(_square(2 * UM, (3 * UM, 0)), [0, 8e5, 0], 100e-9)
    grid = GridSpec(12, 12, 0.7 * UM)
    both = field_map(Scene([r1, r2], 0.5 * UM, grid, 0.2 * UM)).data
    one = field_map(Scene([r1], 0.5 * UM, grid, 0.2 * UM)).data
    two = field_map(Scene([r2], 0.5 * UM, grid, 0.2 * UM)).data
    scale = np.abs(both).max()
    assert np.abs(both - (one + two)).max() < 1e-12 * scale


def test_field_map_mirror_symmetry():
    # mirroring the scene across x=0 with Mx negated reflects Bx and keeps
    # By/Bz at mirrored pixels
    poly = np.array([[0.5, -1.0], [2.5, -0.5], [2.0, 1.5], [0.8, 1.0]]) * UM
    m = np.array([6e5, 2e5, 1e5])
    grid = GridSpec(10, 8, 0.6 * UM)
    fm = field_map(Scene([MagnetRegion(poly, m, 100e-9)], 0.5 * UM, grid, 0.15 * UM)).data
    poly_mirr = poly.copy()
    poly_mirr[:, 0] *= -1.0
    m_mirr = m * np.array([-1.0, 1.0, 1.0])
    fm_mirr = field_map(
        Scene([MagnetRegion(poly_mirr[::-1], m_mirr, 100e-9)], 0.5 * UM, grid, 0.15 * UM)
    ).data
    flipped = fm_mirr[:, ::-1, :]
    assert np.allclose(flipped[..., 0], -fm[..., 0], rtol=1e-9, atol=1e-15)
    assert np.allclose(flipped[..., 1], fm[..., 1], rtol=1e-9, atol=1e-15)
    assert np.allclose(flipped[..., 2], fm[..., 2], rtol=1e-9, atol=1e-15)


@pytest.mark.parametrize(
    "state,direction",
    [
        (1, (np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0)),
        (3, (-np.cos(np.pi / 4), -np.sin(np.pi / 4), 0.0)),
    ],
)
def test_cross_scene_overlap_direction(state, direction):
    scene = default_cross_scene(state)
    overlap = scene.regions[2]
    unit = overlap.magnetization / np.linalg.norm(overlap.magnetization)
    assert np.allclose(unit, direction, atol=1e-12)
    assert np.linalg.norm(overlap.magnetization) == pytest.approx(8.0e5)


def test_cross_scene_defaults():
    scene = default_cross_scene(2)
    assert scene.grid.width_px == scene.grid.height_px == 512
    assert scene.grid.pixel_pitch == pytest.approx(82.75e-6 / 512)
    assert scene.standoff == pytest.approx(500e-9)
    assert all(r.thickness == pytest.approx(100e-9) for r in scene.regions)


def test_cross_scene_bad_state():
    for bad in (0, 5, -1):
        with pytest.raises(BadStateError):
            default_cross_scene(bad)


def test_cross_scene_area_counted_once():
    # rasterized cell count equals the two-ellipse union area (cells claimed
    # by the overlap region must not double-count)
    scene = default_cross_scene(1, cell_size=0.25 * UM)
    positions, _ = rasterize(scene)
    cell_area = scene.cell_size**2
    raster_area = len(positions) * cell_area
    union = Polygon(scene.regions[0].polygon).union(Polygon(scene.regions[1].polygon))
    assert abs(raster_area - union.area) / union.area < 0.01
    # and the overlap cells carry the diagonal magnetization
    _, moments = rasterize(scene)
    diag = moments[np.abs(moments[:, 0] - moments[:, 1]).argsort()[:10]]
    assert np.all(diag[:, 0] > 0) and np.all(diag[:, 1] > 0)


def test_prism_far_field_matches_dipole():
    center = np.zeros(3)
    half = np.array([2.5, 2.5, 0.05]) * UM
    mag = np.array([8e5, 3e5, 1e5])
    moment = mag * np.prod(2 * half)
    diag = 2 * np.linalg.norm(half)
    rng = np.random.default_rng(2)
    pts = rng.uniform(25, 40, (20, 3)) * diag * np.sign(rng.uniform(-1, 1, (20, 3)))
    bp = prism_field_oracle(center, half, mag, pts)
    bd = dipole_field(pts, center[None, :], moment[None, :])
    rel = np.abs(bp - bd).max(axis=1) / np.linalg.norm(bd, axis=1)
    assert rel.max() < 0.01


def test_prism_on_axis_purely_z():
    b = prism_field_oracle(
        np.zeros(3), np.array([1, 1, 1]) * UM, np.array([0, 0, 8e5]),
        np.array([[0.0, 0.0, 5 * UM], [0.0, 0.0, -4 * UM]]),
    )
    assert np.abs(b[:, :2]).max() < 1e-12 * np.abs(b[:, 2]).max()


def test_prism_inside_rejected():
    with pytest.raises(InsidePrismError):
        prism_field_oracle(np.zeros(3), np.ones(3) * UM, np.array([8e5, 0, 0]), np.zeros(3))


def test_prism_vs_quadrature():
    # brute-force surface-charge integration as an independent check
    center = np.array([0.3, -0.2, 0.1]) * UM
    half = np.array([1.5, 1.0, 0.3]) * UM
    mag = np.array([5e5, -2e5, 3e5])
    pt = np.array([2.2, 1.7, -1.9]) * UM

    n = 160
    b_num = np.zeros(3)
    for axis in range(3):
        if mag[axis] == 0:
            continue
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        u = np.linspace(-half[a1], half[a1], n + 1)
        v = np.linspace(-half[a2], half[a2], n + 1)
        uc = 0.5 * (u[1:] + u[:-1])
        vc = 0.5 * (v[1:] + v[:-1])
        da = (u[1] - u[0]) * (v[1] - v[0])
        uu, vv = np.meshgrid(uc, vc)
        for sign in (1.0, -1.0):
            src = np.zeros((n * n, 3))
            src[:, axis] = center[axis] + sign * half[axis]
            src[:, a1] = center[a1] + uu.ravel()
            src[:, a2] = center[a2] + vv.ravel()
            d = pt[None, :] - src
            r3 = np.linalg.norm(d, axis=1) ** 3
            b_num += 1e-7 * sign * mag[axis] * da * (d / r3[:, None]).sum(axis=0)

    b = prism_field_oracle(center, half, mag, pt)
    assert np.abs(b - b_num).max() / np.linalg.norm(b_num) < 1e-3


def test_film_interior_field_much_smaller_than_edge():
    # wide in-plane-magnetized film: stray field concentrates at the edges
    half = np.array([100 * UM, 100 * UM, 50e-9])
    mag = np.array([8e5, 0, 0])
    interior = prism_field_oracle(np.zeros(3), half, mag, np.array([0.0, 0.0, -0.5 * UM]))
    edge = prism_field_oracle(np.zeros(3), half, mag, np.array([100 * UM, 0.0, -0.5 * UM]))
    assert np.linalg.norm(interior) < 0.05 * np.linalg.norm(edge)


def test_rasterized_prism_matches_oracle():
    # module acceptance: dipole summation within 2% of the closed form
    half_xy, thick = 2.5 * UM, 100e-9
    region = MagnetRegion(_square(5 * UM), [8e5, 0, 0], thick)
    grid = GridSpec(32, 32, 8 * UM / 32)
    scene = Scene([region], standoff=500e-9, grid=grid, cell_size=100e-9)
    fm = field_map(scene)
    x, y = grid_coordinates(grid)
    gx, gy = np.meshgrid(x, y)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, -scene.standoff)])
    oracle = prism_field_oracle(
        [0, 0, 0], [half_xy, half_xy, thick / 2], [8e5, 0, 0], pts
    ).reshape(32, 32, 3)
    norm = np.linalg.norm(oracle, axis=2)
    mask = norm > 1e-6
    rel = np.abs(fm.data - oracle)[mask] / norm[mask][:, None]
    assert rel.max() < 0.02


def test_scene_json_round_trip(tmp_path):
    scene = default_cross_scene(4, grid=GridSpec(16, 16, 5 * UM))
    path = tmp_path / "scene.json"
    scene.save(path)
    loaded = Scene.load(path)
    assert loaded.standoff == scene.standoff
    assert loaded.grid == scene.grid
    assert len(loaded.regions) == 3
    for a, b in zip(loaded.regions, scene.regions):
        assert np.array_equal(a.polygon, b.polygon)
        assert np.array_equal(a.magnetization, b.magnetization)


def test_scene_validation():
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1]]) * UM  # self-intersecting
    with pytest.raises(ValueError):
        MagnetRegion(bowtie, [8e5, 0, 0], 100e-9)
    with pytest.raises(ValueError):
        Scene([], standoff=-1.0, grid=GridSpec(4, 4, UM), cell_size=0.1 * UM)


def test_field_map_validation():
    with pytest.raises(ValueError):
        FieldMap(data=np.full((4, 4, 3), np.nan), pixel_pitch=UM)
    fm = zero_field_map(6, 4, UM)
    assert fm.width_px == 6 and fm.height_px == 4
