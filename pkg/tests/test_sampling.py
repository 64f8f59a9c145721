import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksprecon.model import KSpaceSlice, SamplingMask
from ksprecon.sampling import InvalidPolicyError, MaskPolicy, acs_block, apply_mask, generate_mask


def test_rate4_counts():
    m = generate_mask(368, MaskPolicy(4, 0.08, seed=7))
    assert m.num_acquired == 92
    assert m.num_acs == 30
    lo, hi = m.acs_range
    assert m.acquired[lo : hi + 1].all()
    # 30 lines centred on 184, extra line below
    assert (lo, hi) == (169, 198)


def test_rate1_acquires_everything():
    m = generate_mask(368, MaskPolicy(1, 0.08, seed=7))
    assert m.num_acquired == 368


def test_rate8_counts():
    m = generate_mask(368, MaskPolicy.for_rate(8, seed=7))
    assert m.num_acquired == round(368 / 8) == 46
    assert m.num_acs == 15


@pytest.mark.parametrize("num_pe,count,expected", [(16, 4, (6, 9)), (16, 5, (6, 10)), (15, 4, (5, 8)), (15, 3, (6, 8))])
def test_acs_block_centering(num_pe, count, expected):
    assert acs_block(num_pe, count) == expected


@pytest.mark.parametrize(
    "num_pe,policy,fragment",
    [
        (3, MaskPolicy(2, 0.5), "num_pe >= 4"),
        (64, MaskPolicy(0.5, 0.1), "nominal_rate >= 1"),
        (64, MaskPolicy(8, 0.5), "ceil(num_pe*acs_fraction) <= floor(num_pe/rate)"),
    ],
)
def test_invalid_policy_names_inequality(num_pe, policy, fragment):
    with pytest.raises(InvalidPolicyError) as exc:
        generate_mask(num_pe, policy)
    assert fragment in str(exc.value)


def test_per_slice_masks_differ_but_repeat():
    pol = MaskPolicy.for_rate(4, seed=11)
    a0, a0b, a1 = generate_mask(128, pol, 0), generate_mask(128, pol, 0), generate_mask(128, pol, 1)
    assert a0.to_string() == a0b.to_string()
    assert a0.to_string() != a1.to_string()


@settings(max_examples=80, deadline=None)
@given(
    num_pe=st.integers(8, 400),
    rate=st.floats(1, 8),
    acs=st.floats(0.01, 0.12),
    seed=st.integers(0, 2**64 - 1),
)
def test_mask_properties(num_pe, rate, acs, seed):
    pol = MaskPolicy(rate, acs, seed)
    try:
        m = generate_mask(num_pe, pol)
    except InvalidPolicyError:
        return
    assert m.to_string() == generate_mask(num_pe, pol).to_string()
    assert abs(m.num_acquired - num_pe / rate) <= 1
    lo, hi = m.acs_range
    assert m.acquired[lo : hi + 1].all()
    assert m.num_acs == int(np.ceil(num_pe * acs))


def _random_slice(rng, coils=3, pe=12, ro=10):
    data = rng.standard_normal((coils, pe, ro)) + 1j * rng.standard_normal((coils, pe, ro))
    return KSpaceSlice.from_array(0, data.astype(np.complex64))


def test_apply_full_mask_is_identity():
    ks = _random_slice(np.random.default_rng(0))
    out = apply_mask(ks, SamplingMask.full(12))
    np.testing.assert_array_equal(out.data, ks.data)


def test_apply_single_line():
    ks = _random_slice(np.random.default_rng(1))
    acquired = np.zeros(12, bool)
    acquired[5] = True
    out = apply_mask(ks, SamplingMask(12, acquired, None, 12.0))
    np.testing.assert_array_equal(out.data[:, 5], ks.data[:, 5])
    assert not np.delete(out.data, 5, axis=1).any()


def test_apply_shape_error():
    ks = _random_slice(np.random.default_rng(2))
    with pytest.raises(ValueError):
        apply_mask(ks, SamplingMask.full(10))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_apply_energy_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    ks = _random_slice(rng)
    acquired = rng.random(12) < 0.5
    acquired[0] = True
    mask = SamplingMask(12, acquired, None, 12 / acquired.sum())
    once = apply_mask(ks, mask)
    assert np.sum(np.abs(once.data) ** 2) <= np.sum(np.abs(ks.data) ** 2)
    np.testing.assert_array_equal(apply_mask(once, mask).data, once.data)
