import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sammpa.core import BinaryMask, SoftMask, centroid, signed_distance
from sammpa.prompt import LOGIT_CLAMP, PromptSet, generate_prompts, sigmoid, soften_mask
from tests.oracles import c_shape, random_mask


def _square():
    a = np.zeros((256, 256), bool)
    a[64:192, 64:192] = True
    return a


def test_square_prompts():
    p = generate_prompts(SoftMask.from_binary(BinaryMask(_square())))
    fg = p.foreground
    assert (fg.x, fg.y) == (127.5, 127.5)
    assert p.box.as_list() == [64, 64, 191, 191]
    assert [(q.x, q.y) for q in p.background] == [(64, 64), (191, 64), (64, 191), (191, 191)]
    assert all(q.label == 0 for q in p.background)
    assert not p.fallback_flag
    assert p.mask_logits.shape == (256, 256)


def test_expand_margin_and_clipping():
    p = generate_prompts(SoftMask.from_binary(BinaryMask(_square())), expand_margin=10)
    assert p.box.as_list() == [54, 54, 201, 201]
    a = np.zeros((32, 32), bool)
    a[0:5, 28:32] = True
    p = generate_prompts(SoftMask.from_binary(BinaryMask(a)), expand_margin=3)
    assert p.box.as_list() == [25, 0, 31, 7]
    assert p.box.contains(p.foreground.x, p.foreground.y)


def test_concave_mask_uses_distance_transform():
    m = c_shape()
    c = centroid(BinaryMask(m))
    assert not m[int(round(c.y)), int(round(c.x))]  # centroid lies in the cavity
    p = generate_prompts(SoftMask.from_binary(BinaryMask(m)))
    fg = p.foreground
    assert m[int(fg.y), int(fg.x)]
    # oracle: the foreground pixel with the greatest distance to the background
    sd = signed_distance(BinaryMask(m))
    assert sd[int(fg.y), int(fg.x)] == sd[m].max()


def test_empty_mask_fallback():
    p = generate_prompts(SoftMask(np.zeros((64, 48), np.float32)))
    assert p.fallback_flag
    assert (p.foreground.x, p.foreground.y) == (23.5, 31.5)
    assert p.box.as_list() == [12, 16, 35, 47]
    assert not p.mask_logits.any()
    assert len(p.background) == 4


def test_largest_component_only():
    a = np.zeros((64, 64), bool)
    a[5:25, 5:25] = True
    a[40:45, 40:45] = True
    p = generate_prompts(SoftMask.from_binary(BinaryMask(a)))
    assert p.box.as_list() == [5, 5, 24, 24]


def test_soften_values():
    a = np.zeros((101, 101), bool)
    a[10:91, 10:91] = True
    lg = soften_mask(BinaryMask(a))
    assert lg[50, 50] == LOGIT_CLAMP and sigmoid(lg[50, 50]) > 0.999
    assert lg[10, 50] == 0.0 and sigmoid(lg[10, 50]) == 0.5
    assert lg[50, 6] == -2.0   # four pixels outside
    assert sigmoid(lg[50, 6]) == pytest.approx(0.119, abs=5e-4)
    assert lg.min() >= -LOGIT_CLAMP


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1))
def test_prompt_invariants_random(seed):
    m = random_mask(np.random.default_rng(seed))
    p = generate_prompts(SoftMask.from_binary(BinaryMask(m)))
    assert len(p.points) == 5 and len(p.background) == 4
    if not m.any():
        assert p.fallback_flag
        return
    fg = p.foreground
    # pixel lookup rounds half up, as the generator does
    assert m[int(np.floor(fg.y + 0.5)), int(np.floor(fg.x + 0.5))]
    assert p.box.contains(fg.x, fg.y)
    assert {(q.x, q.y) for q in p.background} == set(p.box.corners())
    # thresholded sigmoid of the logits reproduces the mask
    assert np.array_equal(sigmoid(soften_mask(BinaryMask(m))) >= 0.5, m)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(-8, 8), st.integers(-8, 8))
def test_translation_covariance(seed, dy, dx):
    rng = np.random.default_rng(seed)
    base = np.zeros((64, 64), bool)
    cy, cx = rng.integers(20, 44, 2)
    base[cy - 6:cy + 7, cx - 4:cx + 9] = True
    base[cy - 6:cy, cx - 4:cx] = False   # notch, still one component
    shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
    p0 = generate_prompts(SoftMask.from_binary(BinaryMask(base)))
    p1 = generate_prompts(SoftMask.from_binary(BinaryMask(shifted)))
    b0, b1 = p0.box.as_list(), p1.box.as_list()
    assert b1 == [b0[0] + dx, b0[1] + dy, b0[2] + dx, b0[3] + dy]
    for q0, q1 in zip(p0.points, p1.points):
        assert (q1.x, q1.y, q1.label) == pytest.approx((q0.x + dx, q0.y + dy, q0.label))


def test_promptset_validation():
    p = generate_prompts(SoftMask.from_binary(BinaryMask(_square())))
    with pytest.raises(ValueError):
        PromptSet(p.background, p.box, p.mask_logits)
    with pytest.raises(ValueError):
        PromptSet(p.points, p.box, np.zeros(4))


def test_promptset_roundtrip_bytes(tmp_path):
    p = generate_prompts(SoftMask.from_binary(BinaryMask(c_shape())), expand_margin=2)
    p.save(tmp_path / "a.json")
    assert (tmp_path / "a.logits.mpad").exists()
    q = PromptSet.load(tmp_path / "a.json")
    assert q.digest() == p.digest()
    q.save(tmp_path / "b.json")
    assert (tmp_path / "a.logits.mpad").read_bytes() == (tmp_path / "b.logits.mpad").read_bytes()
    a = (tmp_path / "a.json").read_text().replace("a.logits.mpad", "X")
    b = (tmp_path / "b.json").read_text().replace("b.logits.mpad", "X")
    assert a == b
