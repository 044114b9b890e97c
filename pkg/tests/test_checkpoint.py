import numpy as np
import pytest

from peft_forge import checkpoint
from peft_forge.errors import ConsistencyError, FormatError
from peft_forge.lora import init_adapter
from peft_forge.numerics import SeededRng, gaussian_matrix
from peft_forge.prune import PrunePlan, compute_masks
from peft_forge.quant import dequantize, quantize


def sample_sections():
    rng = SeededRng(31)
    base = gaussian_matrix(rng, 6, 5, 1.0)
    ad = init_adapter(rng, base, 3, 6.0)
    ad.b = gaussian_matrix(rng, 6, 3, 0.1)
    mask = compute_masks({"layer0": base}, PrunePlan(0.2))["layer0"]
    return base, ad, {
        "base": base,
        "adapter": ad,
        "q4": quantize(base, 4),
        "q8": quantize(base, 8, block_size=7),
        "mask": mask,
        "meta": {"seed": 31, "name": "unit"},
    }


def test_container_roundtrip(tmp_path):
    base, ad, sections = sample_sections()
    path = tmp_path / "c.pfck"
    checkpoint.save(path, sections)
    back = checkpoint.load(path)
    assert list(back) == list(sections)
    assert back["base"].tobytes() == base.tobytes()
    bound = back["adapter"].bind(back["base"])
    assert np.array_equal(bound.a, ad.a) and np.array_equal(bound.b, ad.b)
    assert (bound.rank, bound.alpha) == (3, 6.0)
    for key in ("q4", "q8"):
        assert np.array_equal(back[key].codes, sections[key].codes)
        assert dequantize(back[key]).tobytes() == dequantize(sections[key]).tobytes()
    assert np.array_equal(back["mask"].mask, sections["mask"].mask)
    assert back["meta"] == {"seed": 31, "name": "unit"}
    assert checkpoint.dumps(back | {"adapter": bound}) == path.read_bytes()


def test_adapter_on_quantized_base_binds_to_same_codes():
    rng = SeededRng(4)
    q = quantize(gaussian_matrix(rng, 4, 4, 1.0), 4)
    ad = init_adapter(rng, q, 2, 4.0)
    stored = checkpoint.loads(checkpoint.dumps({"q": q, "ad": ad}))
    assert stored["ad"].bind(stored["q"]).base_checksum() == ad.base_checksum()


def test_bind_rejects_other_base():
    base, _, sections = sample_sections()
    stored = checkpoint.loads(checkpoint.dumps(sections))["adapter"]
    with pytest.raises(ConsistencyError, match="checksum"):
        stored.bind(base + 1e-12)


def test_matrix_section_layout():
    data = checkpoint.matrix_to_bytes(np.array([[1.0, 2.0]]))
    assert data[:4] == b"PFMX" and len(data) == 16 + 16
    assert checkpoint.matrix_from_bytes(data).tolist() == [[1.0, 2.0]]


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncation_is_a_format_error(cut):
    data = checkpoint.dumps(sample_sections()[2])
    with pytest.raises(FormatError):
        checkpoint.loads(data[:cut])


def test_bad_magic_and_missing_file(tmp_path):
    with pytest.raises(FormatError):
        checkpoint.loads(b"XXXX" + b"\0" * 6)
    with pytest.raises(FormatError):
        checkpoint.load(tmp_path / "nope")
    with pytest.raises(FormatError):
        checkpoint.loads(checkpoint.dumps({"m": np.ones((1, 1))}) + b"\0")
