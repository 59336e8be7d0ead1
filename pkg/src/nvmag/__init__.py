"""Widefield NV vector magnetometry: forward simulation and inverse analysis.

Submodules:
  * :mod:`nvmag.nvcore` - axis geometry, Zeeman conversion, reconstruction
  * :mod:`nvmag.strayfield` - magnetostatic forward model
  * :mod:`nvmag.synth` - pulse schedules and synthetic contrast cubes
  * :mod:`nvmag.fitting` - spatial averaging and per-pixel curve fitting
  * :mod:`nvmag.maps` - bias calibration, vector maps, sensitivity
  * :mod:`nvmag.cubeio` - cube container, CSV and PGM exports
  * :mod:`nvmag.cli` - command-line interface
"""

from .nvcore import (
    DEFAULT_CONSTANTS,
    ORIENTATION_LABELS,
    STANDARD_AXES,
    OrientationSet,
    PhysicalConstants,
    ProjectionQuad,
    ResonanceQuad,
    field_from_split,
    project_field,
    reconstruct_vector,
    resolve_bias_signs,
    resonance_pair,
    signed_projections,
)
from .strayfield import (
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
from .synth import (
    DEFAULT_PROFILE,
    ContrastProfile,
    DipModel,
    OdmrCube,
    PulseSchedule,
    build_schedule,
    dips_from_field,
    mirror_half_spectrum,
    rabi_trace,
    spectrum_model,
    synth_cube,
)
from .fitting import (
    RabiFit,
    SpectrumFit,
    fit_four_lorentzians,
    fit_quality,
    fit_rabi,
    fwhm_to_hwhm,
    hwhm_to_fwhm,
    initial_guess,
    moving_average_3x3,
)
from .maps import (
    BiasCalibration,
    FrequencyMaps,
    Region,
    SensitivityReport,
    VectorMaps,
    calibrate_bias,
    counts_from_sensitivity,
    default_corner_regions,
    frequency_maps,
    magnitude_and_angle,
    run_pipeline,
    sensitivity,
    sensitivity_report,
    t2star_from_linewidth,
    vector_maps,
)

__version__ = "0.1.0"
