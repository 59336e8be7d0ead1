import numpy as np
import pytest

from nvmag import build_schedule, synth_cube, zero_field_map

# Bias field used throughout: splits the four orientations well apart.
PAPER_BIAS = np.array([4.1e-3, 0.72e-3, 1.1e-3])

# Lower-branch resonances implied by PAPER_BIAS (MHz, orientation order).
BIAS_RESONANCES_MHZ = (2774.30, 2833.14, 2797.58, 2809.86)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def bias_cube_noiseless(schedule):
    fm = zero_field_map(5, 5, 1e-6)
    return synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=None)


@pytest.fixture(scope="session")
def bias_cube_noisy(schedule):
    fm = zero_field_map(12, 12, 1e-6)
    return synth_cube(fm, PAPER_BIAS, schedule, photons_per_pixel=1e4, seed=101)
