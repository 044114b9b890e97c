import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from peft_forge.errors import ConsistencyError, ParameterError, ShapeError
from peft_forge.numerics import SeededRng, gaussian_matrix
from peft_forge.prune import (
    PER_LAYER, PruneMask, PrunePlan, apply_mask, compute_masks, prune_count, reapply_masks, sparsity_report,
)

W = np.array([[0.1, -0.5], [0.3, 0.05]])


def full_sort_pruned(weights, s, excluded=()):
    """Reference: sort (magnitude, layer_id, flat index) tuples and take the first floor(s*N)."""
    entries = [(abs(float(v)), lid, i) for lid in sorted(weights) if lid not in excluded
               for i, v in enumerate(np.asarray(weights[lid]).ravel())]
    entries.sort()
    k = math.floor(round(s * len(entries), 9))
    return {(lid, i) for _, lid, i in entries[:k]}


def pruned_set(masks):
    return {(lid, int(i)) for lid, m in masks.items() for i in np.flatnonzero(~m.mask.ravel())}


def test_per_layer_worked_example():
    m = compute_masks({"w": W}, PrunePlan(0.5, PER_LAYER))["w"]
    assert m.mask.astype(int).tolist() == [[0, 1], [1, 0]]
    assert m.threshold == 0.1
    assert apply_mask(W, m).tolist() == [[0.0, -0.5], [0.3, 0.0]]


def test_global_two_layer_example():
    masks = compute_masks({"a": np.array([[0.1, 0.2]]), "b": np.array([[0.3, 0.4]])}, PrunePlan(0.5))
    assert not masks["a"].mask.any()
    assert masks["b"].mask.all()


def test_zero_sparsity_keeps_everything():
    m = compute_masks({"w": W}, PrunePlan(0.0))["w"]
    assert m.mask.all() and m.threshold == -math.inf
    assert np.array_equal(apply_mask(W, m), W)


def test_sparsity_bounds():
    with pytest.raises(ParameterError):
        PrunePlan(1.0)
    with pytest.raises(ParameterError):
        PrunePlan(-0.1)
    with pytest.raises(ParameterError):
        PrunePlan(0.1, mode="rows")


def test_prune_count_floors_after_rounding():
    assert prune_count(0.29, 100) == 29
    assert prune_count(0.05, 10_000) == 500
    assert prune_count(0.5, 3) == 1


def test_all_zero_mask_gives_zero_matrix():
    m = PruneMask(np.zeros((2, 2), dtype=bool), 1.0, 0.99, "w")
    assert not apply_mask(W, m).any()


def test_apply_mask_shape_error():
    with pytest.raises(ShapeError):
        apply_mask(np.ones((2, 3)), PruneMask(np.ones((2, 2), dtype=bool), 0.0, 0.0, "w"))


def test_reapply_restores_zeros_and_is_idempotent():
    masks = compute_masks({"w": W}, PrunePlan(0.5, PER_LAYER))
    bumped = {"w": apply_mask(W, masks["w"]) + 0.01}
    once = reapply_masks(bumped, masks)
    assert once["w"][0, 0] == 0.0 and once["w"][1, 1] == 0.0
    assert np.array_equal(reapply_masks(once, masks)["w"], once["w"])


def test_reapply_excluded_and_missing():
    other = np.ones((2, 2))
    out = reapply_masks({"w": W, "emb": other}, {"w": PruneMask(np.ones((2, 2), bool), 0, 0, "w")}, excluded={"emb"})
    assert out["emb"] is other
    with pytest.raises(ConsistencyError):
        reapply_masks({"w": W, "emb": other}, {"w": PruneMask(np.ones((2, 2), bool), 0, 0, "w")})


def random_layers(rng, count):
    return {f"layer{i}": gaussian_matrix(rng, 1 + rng.below(32), 1 + rng.below(32), 1.0) for i in range(count)}


@pytest.mark.parametrize("seed", range(200))
def test_masks_match_full_sort(seed):
    rng = SeededRng(seed)
    w = random_layers(rng, 1 + seed % 3)
    if seed % 5 == 0:
        # heavy ties exercise the (layer_id, index) tie-break
        w = {k: np.round(v) for k, v in w.items()}
    s = [0.05, 0.1, 0.3, 0.5, 0.77][seed % 5]
    assert pruned_set(compute_masks(w, PrunePlan(s))) == full_sort_pruned(w, s)
    for lid in w:
        per = compute_masks(w, PrunePlan(s, PER_LAYER))[lid]
        assert pruned_set({lid: per}) == full_sort_pruned({lid: w[lid]}, s)


@given(seed=st.integers(0, 2**32), s1=st.floats(0, 0.99), s2=st.floats(0, 0.99), mode=st.sampled_from(["global", PER_LAYER]))
def test_monotone_in_sparsity(seed, s1, s2, mode):
    lo, hi = sorted((s1, s2))
    w = random_layers(SeededRng(seed), 3)
    assert pruned_set(compute_masks(w, PrunePlan(lo, mode))) <= pruned_set(compute_masks(w, PrunePlan(hi, mode)))


@given(seed=st.integers(0, 2**32), s=st.floats(0, 0.99), mode=st.sampled_from(["global", PER_LAYER]))
def test_excluded_layers_never_pruned(seed, s, mode):
    w = random_layers(SeededRng(seed), 3)
    masks = compute_masks(w, PrunePlan(s, mode, {"layer1"}))
    assert masks["layer1"].mask.all()
    if mode == "global":
        assert pruned_set(masks) == full_sort_pruned(w, s, {"layer1"})


@pytest.mark.parametrize("s", [0.05, 0.10])
def test_achieved_sparsity_on_ten_thousand_weights(s):
    w = {"w": gaussian_matrix(SeededRng(3), 100, 100, 1.0)}
    masks = compute_masks(w, PrunePlan(s))
    report = sparsity_report(reapply_masks(w, masks), masks)
    assert abs(report.achieved - s) <= 1 / 10_000
    assert report.target == s


def test_empty_report():
    r = sparsity_report({}, {})
    assert r.layers == {} and r.achieved is None


def test_mask_bytes_roundtrip():
    rng = SeededRng(2)
    w = random_layers(rng, 2)
    for m in compute_masks(w, PrunePlan(0.3)).values():
        back = PruneMask.from_bytes(m.to_bytes())
        assert np.array_equal(back.mask, m.mask)
        assert (back.threshold, back.target_sparsity, back.layer_id, back.mode) == \
            (m.threshold, m.target_sparsity, m.layer_id, m.mode)
