"""NV axis geometry, Zeeman conversion and lab-frame vector reconstruction.

Conventions used throughout:
  * SI units (tesla, hertz, seconds).
  * The four NV axes are ordered [111], [1-1-1], [-11-1], [-1-11] in a lab
    frame whose x/y axes lie along the diamond edges and z is the surface
    normal of a (100)-cut crystal.
  * Only the lower Zeeman branch (below the zero-field splitting) is kept as
    the canonical resonance representation; the upper branch is its mirror.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import AmbiguousSignsError, NegativeSplitError, OutOfBandError

ORIENTATION_LABELS = ("[111]", "[1-1-1]", "[-11-1]", "[-1-11]")

# Sign table of the four axes; each row divided by sqrt(3) is a unit vector.
_AXIS_SIGNS = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]
)


@dataclass(frozen=True)
class PhysicalConstants:
    """Spin-physics constants of the NV ground state.

    zero_field_splitting : Hz, separation of m_s=0 and m_s=+-1 at zero field.
    gyromagnetic_ratio   : Hz/T, slope of the Zeeman shift.
    hbar_over_ge_mub     : T*s, inverse electron gyromagnetic ratio (rad).
    """

    zero_field_splitting: float = 2.87e9
    gyromagnetic_ratio: float = 28e9
    hbar_over_ge_mub: float = 1.0 / 1.7608596e11

    def __post_init__(self):
        if not 2.8e9 <= self.zero_field_splitting <= 2.95e9:
            raise ValueError("zero_field_splitting outside plausible NV range")
        if abs(self.gyromagnetic_ratio - 28e9) > 0.05 * 28e9:
            raise ValueError("gyromagnetic_ratio more than 5% from 28 GHz/T")
        if self.hbar_over_ge_mub <= 0:
            raise ValueError("hbar_over_ge_mub must be positive")


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class OrientationSet:
    """The four NV quantization axes as unit vectors, in canonical order."""

    axes: np.ndarray = field(default_factory=lambda: _AXIS_SIGNS / np.sqrt(3.0))

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=float)
        if axes.shape != (4, 3):
            raise ValueError("axes must be a (4, 3) array")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("axes must be unit vectors")
        if np.any(np.abs(axes.sum(axis=0)) > 1e-12):
            raise ValueError("axes must sum to the zero vector")
        dots = axes @ axes.T
        off = dots[~np.eye(4, dtype=bool)]
        if np.any(np.abs(off + 1.0 / 3.0) > 1e-12):
            raise ValueError("pairwise axis dot products must equal -1/3")
        object.__setattr__(self, "axes", axes)


STANDARD_AXES = OrientationSet()


@dataclass
class ProjectionQuad:
    """Signed field projections along the four axes.

    p            : (..., 4) tesla.
    sign_pattern : (..., 4) entries in {+1, -1}; the sign convention applied.
    sign_risk    : (..., 4) bool, True where the magnitude was large enough
                   relative to the reference that the inherited sign may be
                   wrong. None when not derived from a reference.
    """

    p: np.ndarray
    sign_pattern: np.ndarray
    sign_risk: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.sign_pattern = np.asarray(self.sign_pattern)
        if self.p.shape[-1] != 4:
            raise ValueError("projection quad must have 4 entries on the last axis")
        if not np.all(np.isfinite(self.p)):
            raise ValueError("projections must be finite")


@dataclass
class ResonanceQuad:
    """Lower-branch resonance frequencies, one per orientation, in Hz."""

    nu_lower: np.ndarray

    def __post_init__(self):
        self.nu_lower = np.asarray(self.nu_lower, dtype=float)
        if self.nu_lower.shape[-1] != 4:
            raise ValueError("resonance quad must have 4 entries on the last axis")
        if not np.all(np.isfinite(self.nu_lower)):
            raise ValueError("resonances must be finite")


def project_field(b, axes: OrientationSet = STANDARD_AXES) -> ProjectionQuad:
    """Project a lab-frame field onto the four NV axes.

    ``b`` may carry leading dimensions; the result broadcasts accordingly.
    Zero projections are assigned a + sign.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[-1] != 3:
        raise ValueError("field must have 3 components on the last axis")
    if not np.all(np.isfinite(b)):
        raise ValueError("field must be finite")
    p = b @ axes.axes.T
    signs = np.where(p < 0, -1, 1)
    return ProjectionQuad(p=p, sign_pattern=signs)


def resonance_pair(p_signed, consts: PhysicalConstants = DEFAULT_CONSTANTS):
    """Lower and upper resonance frequencies for a signed projection (tesla).

    Returns ``(nu_minus, nu_plus)`` with ``nu_minus = D - gamma*|p|``. Raises
    :class:`OutOfBandError` if the lower branch would reach zero or below.
    """
    p = np.abs(np.asarray(p_signed, dtype=float))
    shift = consts.gyromagnetic_ratio * p
    if np.any(shift >= consts.zero_field_splitting):
        raise OutOfBandError(
            "projection magnitude puts the lower resonance branch at or below zero"
        )
    d = consts.zero_field_splitting
    return d - shift, d + shift


def field_from_split(delta_nu, consts: PhysicalConstants = DEFAULT_CONSTANTS):
    """Convert a Zeeman splitting (Hz) to a field projection magnitude (tesla)."""
    delta_nu = np.asarray(delta_nu, dtype=float)
    if np.any(delta_nu < 0):
        raise NegativeSplitError("splitting must be non-negative")
    out = delta_nu / (2.0 * consts.gyromagnetic_ratio)
    return float(out) if out.ndim == 0 else out


def signed_projections(
    res: ResonanceQuad,
    bias_proj: ProjectionQuad,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
) -> ProjectionQuad:
    """Attach reference signs to per-orientation resonance shifts.

    Each projection is ``sign(bias_i) * (D - nu_i) / gamma``. ``sign_risk`` is
    set where the shift magnitude exceeds twice the reference projection,
    i.e. where the true sign may have flipped relative to the reference.
    """
    m = (consts.zero_field_splitting - res.nu_lower) / consts.gyromagnetic_ratio
    ref = bias_proj.p
    signs = np.where(ref < 0, -1.0, 1.0)
    p = signs * m
    risk = m > 2.0 * np.abs(ref)
    return ProjectionQuad(p=p, sign_pattern=np.where(ref < 0, -1, 1), sign_risk=risk)


def reconstruct_vector(p):
    """Recover the lab-frame field from four signed projections.

    Accepts a :class:`ProjectionQuad` or a (..., 4) array. Returns ``(b,
    residual)`` where ``residual = |p1+p2+p3+p4| * sqrt(3)/4`` is the part of
    the quad inconsistent with any single field vector (a perfect quad sums
    to zero because the axes do).
    """
    quad = p.p if isinstance(p, ProjectionQuad) else np.asarray(p, dtype=float)
    if quad.shape[-1] != 4:
        raise ValueError("projection quad must have 4 entries on the last axis")
    scale = np.sqrt(3.0) / 4.0
    b = scale * (quad @ _AXIS_SIGNS)
    residual = scale * np.abs(quad.sum(axis=-1))
    return b, residual


# Canonical iteration order over sign patterns: +1 sorts before -1, and the
# first element is pinned to +1 (the global b -> -b symmetry is resolved by
# that convention).
_CANONICAL_PATTERNS = [s for s in product((1, -1), repeat=4) if s[0] == 1]


def resolve_bias_signs(
    res: ResonanceQuad,
    consts: PhysicalConstants = DEFAULT_CONSTANTS,
    min_resolvable: float = 50e-6,
):
    """Search all sign patterns for the one consistent with a single field.

    All 16 patterns over the four shift magnitudes are scored by the
    sum-to-zero residual ``|sum_i s_i m_i|``; patterns differing by a global
    sign are equivalent, so the winner is reported with the first entry
    positive. Exact ties are broken lexicographically (+ before -).

    Raises :class:`AmbiguousSignsError` when two genuinely different patterns
    score within 10% of each other *and* at least one magnitude is at or
    below ``min_resolvable`` (tesla) - i.e. when the data cannot support the
    sign assignment. Well-separated magnitudes make symmetric ties benign;
    they are resolved deterministically by the tie-break instead.

    Returns ``(ProjectionQuad, b)`` for the winning pattern.
    """
    nu = res.nu_lower
    if nu.ndim != 1:
        raise ValueError("sign resolution operates on a single resonance quad")
    if np.any(nu <= 0) or np.any(nu >= consts.zero_field_splitting):
        raise ValueError("lower-branch resonances must lie in (0, D)")
    m = (consts.zero_field_splitting - nu) / consts.gyromagnetic_ratio

    scored = []
    for pattern in _CANONICAL_PATTERNS:
        s = np.array(pattern, dtype=float)
        scored.append((abs(float(s @ m)), pattern))

    order = sorted(range(len(scored)), key=lambda i: scored[i][0])
    best_r, best_pattern = scored[order[0]]
    second_r, second_pattern = scored[order[1]]

    near_tie = (second_r - best_r) <= 0.1 * second_r
    if near_tie and m.min() <= min_resolvable:
        raise AmbiguousSignsError(
            "sign patterns are near-degenerate at this field scale",
            candidates=[(best_pattern, best_r), (second_pattern, second_r)],
        )

    signs = np.array(best_pattern, dtype=float)
    quad = ProjectionQuad(p=signs * m, sign_pattern=np.array(best_pattern))
    b, _ = reconstruct_vector(quad)
    return quad, b
