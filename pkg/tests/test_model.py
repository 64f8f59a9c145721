import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksprecon.model import (
    CoilSensitivityMaps,
    KSpaceSlice,
    MagnitudeImage,
    ModelError,
    SamplingMask,
    normalize_magnitude,
    validate_slice,
)


def raw_slice(data, coils=2, pe=8, ro=8, index=0):
    return types.SimpleNamespace(slice_index=index, num_coils=coils, num_pe=pe, num_ro=ro, data=data)


def test_validate_well_formed():
    data = np.ones(2 * 8 * 8, dtype=np.complex64)
    assert validate_slice(raw_slice(data)) is None


def test_validate_length_mismatch():
    data = np.ones(2 * 8 * 8 - 1, dtype=np.complex64)
    assert validate_slice(raw_slice(data)) == "length mismatch"


def test_validate_non_finite():
    data = np.ones(2 * 8 * 8, dtype=np.complex64)
    data[17] = np.nan
    assert validate_slice(raw_slice(data)) == "non-finite sample"


def test_constructor_enforces_invariants():
    with pytest.raises(ModelError, match="length mismatch"):
        KSpaceSlice(0, 2, 8, 8, np.zeros(127, dtype=np.complex64))
    ks = KSpaceSlice(3, 2, 8, 8, np.zeros(128, dtype=np.complex64))
    assert ks.data.shape == (2, 8, 8)
    assert validate_slice(ks) is None
    with pytest.raises(ValueError):
        ks.data[0, 0, 0] = 1


def test_mask_invariants():
    acquired = np.zeros(16, dtype=bool)
    acquired[6:10] = True
    SamplingMask(16, acquired, (6, 9), 4.0)
    with pytest.raises(ModelError, match="skipped"):
        SamplingMask(16, acquired, (5, 9), 4.0)
    with pytest.raises(ModelError, match="no lines"):
        SamplingMask(16, np.zeros(16, bool), None, 1.0)
    with pytest.raises(ModelError, match="inconsistent"):
        SamplingMask(16, acquired, (6, 9), 8.0)


def test_mask_string_and_rate():
    m = SamplingMask(4, [True, False, True, True], (2, 3), 4 / 3)
    assert m.to_string() == "1011"
    assert m.achieved_rate == pytest.approx(4 / 3)
    assert m.num_acs == 2


def test_sensitivity_maps_must_be_normalised():
    ones = np.ones((1, 4, 4))
    CoilSensitivityMaps(ones)
    with pytest.raises(ModelError, match="normalized"):
        CoilSensitivityMaps(2 * ones)


def test_normalize_examples():
    img = MagnitudeImage(0, np.array([[0, 2, 4]], dtype=np.float32))
    np.testing.assert_array_equal(normalize_magnitude(img).pixels, [[0, 0.5, 1]])
    zero = MagnitudeImage(0, np.zeros((2, 2)))
    np.testing.assert_array_equal(normalize_magnitude(zero).pixels, 0)
    unit = MagnitudeImage(0, np.array([[0.25, 1.0]]))
    assert normalize_magnitude(unit) is unit


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (5, 7), elements=st.floats(0, 1e4, width=32)))
def test_normalize_idempotent_and_keeps_argmax(pixels):
    img = MagnitudeImage(1, pixels)
    once = normalize_magnitude(img)
    twice = normalize_magnitude(once)
    np.testing.assert_array_equal(once.pixels, twice.pixels)
    assert np.argmax(once.pixels) == np.argmax(pixels)
    if pixels.max() > 0:
        assert once.pixels.max() == 1.0
