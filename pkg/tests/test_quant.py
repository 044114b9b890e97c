import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from peft_forge.errors import FormatError, NumericError, ParameterError, ShapeError
from peft_forge.lora import LoraAdapter, forward
from peft_forge.numerics import SeededRng, gaussian_matrix
from peft_forge.quant import (
    QuantizedTensor, dense_footprint, dequantize, pack_codes, pack_nibbles, qlora_forward, quantize,
    round_half_away, roundtrip_bound, storage_footprint, unpack_codes, unpack_nibbles,
)

# subnormal-only tensors have no finite scale and are rejected separately
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False)
matrices = (st.tuples(st.integers(1, 8), st.integers(1, 8))
            .flatmap(lambda s: arrays(np.float64, s, elements=finite))
            .filter(lambda x: not x.any() or np.abs(x).max() > 1e-300))


def test_worked_four_bit_example():
    q = quantize(np.array([[0.4, -1.0, 0.2]]), 4)
    assert q.scale == 15.0
    assert q.codes.ravel().tolist() == [6, -15, 3]
    assert dequantize(q).ravel().tolist() == [0.4, -1.0, 0.2]


def test_eight_bit_single_value():
    q = quantize(np.array([[1.0]]), 8)
    assert q.scale == 255.0
    assert q.codes.tolist() == [[255]]


def test_zero_tensor():
    q = quantize(np.zeros((3, 2)), 4)
    assert q.is_zero and q.scale == 0.0
    assert not q.codes.any()
    assert np.array_equal(dequantize(q), np.zeros((3, 2)))
    assert QuantizedTensor.from_bytes(q.to_bytes()).is_zero


def test_subnormal_absmax_is_rejected():
    with pytest.raises(NumericError):
        quantize(np.array([[5e-324]]), 4)


def test_unsupported_bits():
    with pytest.raises(ParameterError):
        quantize(np.ones((1, 1)), 3)


def test_round_half_away_ties():
    v = np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49999999999999994, 2.4])
    assert round_half_away(v).tolist() == [1.0, 2.0, 3.0, -1.0, -3.0, 0.0, 2.0]


def test_all_byte_values_roundtrip_through_nibbles():
    raw = bytes(range(256))
    nib = unpack_nibbles(raw, 512)
    assert pack_nibbles(nib) == raw
    assert nib[0::2].tolist() == [b & 15 for b in raw]


@given(codes=st.lists(st.integers(-15, 15), min_size=1, max_size=40))
def test_code_pack_identity_four_bit(codes):
    c = np.array(codes)
    assert unpack_codes(pack_codes(c, 4), 4, c.size).tolist() == codes


@given(codes=st.lists(st.integers(-255, 255), min_size=1, max_size=40))
def test_code_pack_identity_eight_bit(codes):
    c = np.array(codes)
    assert unpack_codes(pack_codes(c, 8), 8, c.size).tolist() == codes


def test_corrupt_packed_length():
    q = quantize(np.ones((2, 3)), 4)
    bad = QuantizedTensor(q.codes, q.scales, q.bits, q.rows, q.cols, q.block_size, q.packed[:-1])
    with pytest.raises(FormatError):
        dequantize(bad)
    with pytest.raises(FormatError):
        QuantizedTensor.from_bytes(q.to_bytes()[:-1])


@settings(max_examples=200)
@given(x=matrices, bits=st.sampled_from([4, 8]))
def test_codes_in_range_and_roundtrip_bound(x, bits):
    q = quantize(x, bits)
    limit = 2 ** bits - 1
    assert np.abs(q.codes).max() <= limit
    err = np.max(np.abs(x - dequantize(q)))
    absmax = np.max(np.abs(x))
    assert err <= roundtrip_bound(x, bits) + 4 * np.spacing(absmax)


@given(x=matrices, k=st.sampled_from([0.5, 2.0, 3.0, 1e-3, 1024.0]))
def test_scale_invariance_of_codes(x, k):
    absmax = np.max(np.abs(x))
    if absmax < 1e-290 or k * absmax < 1e-290:
        return
    a, b = quantize(x, 4), quantize(k * x, 4)
    assert np.array_equal(a.codes, b.codes)
    assert b.scale == pytest.approx(a.scale / k, rel=1e-12)


@given(x=matrices, bits=st.sampled_from([4, 8]), block=st.integers(0, 9))
def test_serialized_section_roundtrip(x, bits, block):
    q = quantize(x, bits, block_size=block)
    data = q.to_bytes()
    assert len(data) == storage_footprint(q)
    back = QuantizedTensor.from_bytes(data)
    assert np.array_equal(back.codes, q.codes)
    assert np.array_equal(dequantize(back), dequantize(q))


def test_blockwise_scales_tighten_error():
    x = np.array([[1000.0, 0.001, 0.002, 0.003]])
    assert quantize(x, 4, block_size=2).scales.size == 2
    assert np.abs(dequantize(quantize(x, 4, block_size=2)) - x)[0, 2:].max() < np.abs(dequantize(quantize(x, 4)) - x)[0, 2:].max()


def test_footprint_exact_values():
    assert storage_footprint(quantize(np.ones((1, 1)), 4)) == 34
    big4 = quantize(np.ones((1024, 1024)), 4)
    big8 = quantize(np.ones((1024, 1024)), 8)
    assert storage_footprint(big4) == 24 + 8 + 524_288 + 131_072
    assert storage_footprint(big8) == 24 + 8 + 1_048_576 + 131_072
    assert dense_footprint(1024, 1024) == 2_097_152
    # 9 stored bits per entry versus 5
    assert (storage_footprint(big8) - 32) * 5 == (storage_footprint(big4) - 32) * 9


def adapter_for(rng, d, k, r):
    return LoraAdapter(base=gaussian_matrix(rng, d, k, 1.0), a=gaussian_matrix(rng, r, k, 0.5),
                       b=gaussian_matrix(rng, d, r, 0.5), rank=r, alpha=2.0 * r)


def test_qlora_zero_b_is_dequantized_base():
    rng = SeededRng(5)
    ad = adapter_for(rng, 4, 3, 2)
    ad.b = np.zeros_like(ad.b)
    qb = quantize(ad.base, 4)
    x = gaussian_matrix(rng, 3, 2, 1.0)
    assert np.array_equal(qlora_forward(qb, ad, x), dequantize(qb) @ x)


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("bits", [4, 8])
def test_qlora_error_propagation(seed, bits):
    rng = SeededRng(seed)
    ad = adapter_for(rng, 5, 6, 2)
    x = gaussian_matrix(rng, 6, 1, 1.0)
    gap = np.max(np.abs(qlora_forward(quantize(ad.base, bits), ad, x) - forward(ad, x)))
    assert gap <= np.sum(np.abs(x)) * roundtrip_bound(ad.base, bits) + 1e-12


def test_qlora_exactly_representable_base_is_bitwise_equal():
    rng = SeededRng(17)
    ks = np.array([rng.below(31) for _ in range(20)], dtype=float) - 15.0
    ks[0] = 15.0
    base = (ks / 15.0).reshape(4, 5)
    ad = adapter_for(rng, 4, 5, 2)
    ad.base = base
    q = quantize(base, 4)
    assert np.array_equal(dequantize(q), base)
    x = gaussian_matrix(rng, 5, 3, 1.0)
    assert np.array_equal(qlora_forward(q, ad, x), forward(ad, x))


def test_qlora_shape_errors():
    rng = SeededRng(1)
    ad = adapter_for(rng, 3, 3, 1)
    with pytest.raises(ShapeError):
        qlora_forward(quantize(np.ones((3, 3)), 4), ad, np.ones((4, 1)))
    with pytest.raises(ShapeError):
        qlora_forward(quantize(np.ones((2, 3)), 4), ad, np.ones((3, 1)))
