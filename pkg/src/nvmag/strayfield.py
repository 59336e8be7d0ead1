"""Magnetostatic forward model: stray field of thin magnetized regions.

Regions are simple polygons in the z=0 plane carrying uniform in-plane (or
general 3-vector) magnetization over a small thickness. The field map is
computed on a pixel grid on the plane ``z = -standoff`` (sensing plane below
the magnet midplane) by rasterizing each region into point dipoles and
summing the free-space dipole field. A closed-form uniformly magnetized
prism is provided as an independent oracle.

All lengths in meters, magnetization in A/m, fields in tesla.
"""

import json
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import (
    BadStateError,
    EmptySceneError,
    InsidePrismError,
    SingularPointError,
)

MU0_OVER_4PI = 1e-7


@dataclass
class GridSpec:
    width_px: int
    height_px: int
    pixel_pitch: float

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("grid must have at least one pixel")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")


@dataclass
class MagnetRegion:
    polygon: np.ndarray  # (n, 2) vertices, meters
    magnetization: np.ndarray  # (3,) A/m
    thickness: float  # meters

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=float)
        self.magnetization = np.asarray(self.magnetization, dtype=float)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2 or len(self.polygon) < 3:
            raise ValueError("polygon must be an (n, 2) array with n >= 3")
        if self.magnetization.shape != (3,):
            raise ValueError("magnetization must be a 3-vector")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")
        if not self.shape().is_valid:
            raise ValueError("polygon must be simple (non-self-intersecting)")

    def shape(self) -> Polygon:
        return Polygon(self.polygon)


@dataclass
class Scene:
    """Magnetized regions plus the sensing grid.

    When region polygons overlap, the later region in the list claims the
    overlapping cells (it overrides, it does not add).
    """

    regions: list
    standoff: float
    grid: GridSpec
    cell_size: float

    def __post_init__(self):
        if self.standoff <= 0:
            raise ValueError("standoff must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    def to_json_dict(self) -> dict:
        return {
            "regions": [
                {
                    "polygon": r.polygon.tolist(),
                    "magnetization": r.magnetization.tolist(),
                    "thickness": r.thickness,
                }
                for r in self.regions
            ],
            "standoff": self.standoff,
            "grid": {
                "width_px": self.grid.width_px,
                "height_px": self.grid.height_px,
                "pixel_pitch": self.grid.pixel_pitch,
            },
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Scene":
        return cls(
            regions=[
                MagnetRegion(
                    polygon=np.asarray(r["polygon"], dtype=float),
                    magnetization=np.asarray(r["magnetization"], dtype=float),
                    thickness=float(r["thickness"]),
                )
                for r in d["regions"]
            ],
            standoff=float(d["standoff"]),
            grid=GridSpec(
                width_px=int(d["grid"]["width_px"]),
                height_px=int(d["grid"]["height_px"]),
                pixel_pitch=float(d["grid"]["pixel_pitch"]),
            ),
            cell_size=float(d["cell_size"]),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


@dataclass
class FieldMap:
    """Per-pixel field vectors (tesla) on the sensing grid, data[y, x, :]."""

    data: np.ndarray  # (H, W, 3)
    pixel_pitch: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("field map data must be (H, W, 3)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field map must be finite")

    @property
    def height_px(self):
        return self.data.shape[0]

    @property
    def width_px(self):
        return self.data.shape[1]


def zero_field_map(width_px, height_px, pixel_pitch) -> FieldMap:
    return FieldMap(data=np.zeros((height_px, width_px, 3)), pixel_pitch=pixel_pitch)


def grid_coordinates(grid: GridSpec):
    """Pixel-center coordinates (meters), centered on the scene origin.

    Returns ``(x, y)`` 1-d arrays; pixel (iy, ix) sits at ``(x[ix], y[iy])``.
    """
    x = (np.arange(grid.width_px) - (grid.width_px - 1) / 2.0) * grid.pixel_pitch
    y = (np.arange(grid.height_px) - (grid.height_px - 1) / 2.0) * grid.pixel_pitch
    return x, y


def _ellipse_polygon(semi_major, semi_minor, angle_deg, n_vertices=256):
    t = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    pts = np.column_stack([semi_major * np.cos(t), semi_minor * np.sin(t)])
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return pts @ rot.T


# Remanent-state index -> in-plane magnetization angle of the crossing region.
_STATE_ANGLES_DEG = {1: 45.0, 2: 135.0, 3: 225.0, 4: 315.0}


def default_cross_scene(
    state_index,
    magnetization=8.0e5,
    thickness=100e-9,
    standoff=500e-9,
    grid=None,
    cell_size=250e-9,
    n_vertices=256,
) -> Scene:
    """Two crossing 40 um x 5 um ellipses, each magnetized along its major axis.

    The overlap region is magnetized along one of the four diagonals
    (45/135/225/315 degrees) selected by ``state_index``. Magnetization
    magnitude defaults to a typical permalloy value; it is a configurable
    default, not a measured one.
    """
    if state_index not in _STATE_ANGLES_DEG:
        raise BadStateError(f"state_index must be 1..4, got {state_index!r}")
    if grid is None:
        grid = GridSpec(width_px=512, height_px=512, pixel_pitch=82.75e-6 / 512)

    semi_major, semi_minor = 20e-6, 2.5e-6
    e_x = _ellipse_polygon(semi_major, semi_minor, 0.0, n_vertices)
    e_y = _ellipse_polygon(semi_major, semi_minor, 90.0, n_vertices)
    overlap = Polygon(e_x).intersection(Polygon(e_y))
    angle = np.deg2rad(_STATE_ANGLES_DEG[state_index])

    regions = [
        MagnetRegion(e_x, magnetization * np.array([1.0, 0.0, 0.0]), thickness),
        MagnetRegion(e_y, magnetization * np.array([0.0, 1.0, 0.0]), thickness),
        MagnetRegion(
            np.asarray(overlap.exterior.coords[:-1]),
            magnetization * np.array([np.cos(angle), np.sin(angle), 0.0]),
            thickness,
        ),
    ]
    return Scene(regions=regions, standoff=standoff, grid=grid, cell_size=cell_size)


def rasterize(scene: Scene):
    """Convert scene regions into point dipoles on a fixed lattice.

    The lattice is anchored at the origin (cell centers at ``(i+0.5) *
    cell_size``) so that a region rasterizes identically regardless of what
    else is in the scene. A cell belongs to the last region whose polygon
    strictly contains its center; its moment is ``M * cell_size^2 *
    thickness``.

    Returns ``(positions (n, 3), moments (n, 3))``.
    """
    if not scene.regions:
        raise EmptySceneError("scene has no regions")
    c = scene.cell_size

    shapes = [r.shape() for r in scene.regions]
    minx = min(s.bounds[0] for s in shapes)
    miny = min(s.bounds[1] for s in shapes)
    maxx = max(s.bounds[2] for s in shapes)
    maxy = max(s.bounds[3] for s in shapes)

    ix = np.arange(np.floor(minx / c), np.ceil(maxx / c) + 1)
    iy = np.arange(np.floor(miny / c), np.ceil(maxy / c) + 1)
    cx = (ix + 0.5) * c
    cy = (iy + 0.5) * c
    gx, gy = np.meshgrid(cx, cy)
    gx = gx.ravel()
    gy = gy.ravel()

    owner = np.full(gx.shape, -1, dtype=int)
    for k, s in enumerate(shapes):
        inside = shapely.contains_xy(s, gx, gy)
        owner[inside] = k

    used = owner >= 0
    if not np.any(used):
        raise EmptySceneError("no lattice cell center falls inside any region")

    positions = np.column_stack([gx[used], gy[used], np.zeros(used.sum())])
    moments = np.empty((used.sum(), 3))
    area = c * c
    for k, region in enumerate(scene.regions):
        sel = owner[used] == k
        moments[sel] = region.magnetization * area * region.thickness
    return positions, moments


def dipole_field(points, positions, moments, min_distance=0.0, chunk=4096):
    """Superposed point-dipole field (tesla) at ``points``.

    ``points`` is (..., 3); ``positions``/``moments`` are (n, 3). Raises
    :class:`SingularPointError` if any evaluation point lies closer than
    ``min_distance`` to a dipole. Summation order over dipoles is fixed, so
    results are independent of how callers partition the evaluation points.
    """
    pts = np.asarray(points, dtype=float)
    lead_shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    positions = np.asarray(positions, dtype=float)
    moments = np.asarray(moments, dtype=float)
    out = np.zeros((len(pts), 3))

    for start in range(0, len(pts), chunk):
        p = pts[start : start + chunk]
        d = p[:, None, :] - positions[None, :, :]  # (np, nm, 3)
        r2 = np.einsum("pmk,pmk->pm", d, d)
        if min_distance > 0 and np.any(r2 < min_distance * min_distance):
            raise SingularPointError("evaluation point too close to a source dipole")
        r = np.sqrt(r2)
        inv_r3 = 1.0 / (r2 * r)
        mdotd = np.einsum("pmk,mk->pm", d, moments)
        term = 3.0 * (mdotd * inv_r3 / r2)[:, :, None] * d - inv_r3[:, :, None] * moments[None, :, :]
        out[start : start + chunk] = MU0_OVER_4PI * term.sum(axis=1)
    return out.reshape(lead_shape + (3,))


def field_map(scene: Scene) -> FieldMap:
    """Evaluate the scene's stray field at every pixel center on z = -standoff."""
    if not scene.regions:
        return zero_field_map(scene.grid.width_px, scene.grid.height_px, scene.grid.pixel_pitch)
    positions, moments = rasterize(scene)
    x, y = grid_coordinates(scene.grid)
    gx, gy = np.meshgrid(x, y)
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, -scene.standoff)])
    b = dipole_field(pts, positions, moments, min_distance=scene.cell_size / 10.0)
    return FieldMap(
        data=b.reshape(scene.grid.height_px, scene.grid.width_px, 3),
        pixel_pitch=scene.grid.pixel_pitch,
    )


def _charged_rect_h(u1, u2, v1, v2, w, sigma):
    """H field of a uniformly charged rectangle, in the rectangle's own frame.

    The rectangle spans ``[u1,u2] x [v1,v2]`` in its plane; ``w`` is the
    signed normal distance of the evaluation point from that plane. Inputs
    ``u1..v2`` are corner offsets (point minus corner). Returns (Hu, Hv, Hw).
    """

    def stable_log(a, b, r):
        # log(a + r) with the a < 0 branch rationalized: (a+r)(r-a) = b^2+w^2
        s = b * b + w * w
        val = np.where(a > 0, a + r, s / np.maximum(r - a, 1e-300))
        return np.log(np.maximum(val, 1e-300))

    hu = np.zeros(np.broadcast(u1, v1, w).shape)
    hv = np.zeros_like(hu)
    hw = np.zeros_like(hu)
    for i, u in enumerate((u1, u2)):
        for j, v in enumerate((v1, v2)):
            r = np.sqrt(u * u + v * v + w * w)
            sgn = (-1.0) ** (i + j)
            hu += sgn * stable_log(v, u, r)
            hv += sgn * stable_log(u, v, r)
            hw -= sgn * np.arctan2(u * v, w * r)
    k = -sigma / (4.0 * np.pi)
    return k * hu, k * hv, k * hw


def prism_field_oracle(center, half_sizes, magnetization, points):
    """Closed-form field (tesla) of a uniformly magnetized rectangular prism.

    Surface-charge formulation: each magnetization component charges the two
    faces normal to it with density +-M. Points must lie outside the prism.
    Used as an independent check of the dipole summation.
    """
    center = np.asarray(center, dtype=float)
    half = np.asarray(half_sizes, dtype=float)
    mag = np.asarray(magnetization, dtype=float)
    pts = np.asarray(points, dtype=float)
    lead_shape = pts.shape[:-1]
    pts = pts.reshape(-1, 3)

    rel = pts - center
    if np.any(np.all(np.abs(rel) < half, axis=1)):
        raise InsidePrismError("evaluation point inside the prism")

    h = np.zeros_like(pts)
    # axis = face normal; (a1, a2) span the face plane
    for axis, m_comp in enumerate(mag):
        if m_comp == 0.0:
            continue
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        for face_sign in (1.0, -1.0):
            sigma = m_comp * face_sign
            w = rel[:, axis] - face_sign * half[axis]
            u1 = rel[:, a1] + half[a1]  # offset from the low edge
            u2 = rel[:, a1] - half[a1]  # offset from the high edge
            v1 = rel[:, a2] + half[a2]
            v2 = rel[:, a2] - half[a2]
            hu, hv, hw = _charged_rect_h(u1, u2, v1, v2, w, sigma)
            h[:, a1] += hu
            h[:, a2] += hv
            h[:, axis] += hw
    b = 4.0 * np.pi * MU0_OVER_4PI * h
    return b.reshape(lead_shape + (3,))
