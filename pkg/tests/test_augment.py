import numpy as np
import pytest
from helpers import naive_clahe
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anatclip.augment import (VARIANTS_PER_IMAGE, AugmentOp, AugmentPolicy, AugmentSpec, ParameterError, apply_all,
                              clahe, contrast, gamma, perturb_images, rotate, sample_policy, shift_perturbation,
                              translate)

images = arrays(np.float64, st.tuples(st.integers(16, 40), st.integers(16, 40)), elements=st.floats(0, 1))


def random_image(seed, shape=(32, 32)):
    return np.random.default_rng(seed).random(shape)


# ---------------------------------------------------------------- CLAHE

@pytest.mark.parametrize("seed", range(20))
def test_clahe_matches_naive_reference(seed):
    shape = (32, 32) if seed % 2 else (64, 64)
    img = random_image(seed, shape)
    tiles, clip = (8, 2.0) if seed % 3 else (4, 1.0 + seed / 10)
    assert np.max(np.abs(clahe(img, tiles, clip) - naive_clahe(img, tiles, clip))) < 1e-6


def test_clahe_matches_reference_on_structured_image():
    y, x = np.mgrid[0:48, 0:48]
    img = np.where((y // 12 + x // 12) % 2, 0.8, 0.1) + 0.05 * np.sin(x / 3)
    img = np.clip(img, 0, 1)
    assert np.max(np.abs(clahe(img) - naive_clahe(img))) < 1e-6


@pytest.mark.parametrize("value", [0.0, 0.3, 0.71, 1.0])
def test_clahe_keeps_constant_image(value):
    img = np.full((32, 32), value)
    np.testing.assert_allclose(clahe(img), img, atol=1e-12)


def test_clahe_rejects_tiles_larger_than_image():
    with pytest.raises(ParameterError):
        clahe(np.zeros((16, 16)), tiles=32)


@settings(max_examples=25, deadline=None)
@given(images)
def test_clahe_output_in_unit_range(img):
    out = clahe(img, tiles=4)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- point ops

def test_contrast_examples():
    np.testing.assert_allclose(contrast(np.array([[0.25, 0.75]]), 2.0), [[0.0, 1.0]])
    img = random_image(1)
    out = contrast(img, 0.5)
    np.testing.assert_allclose(out - img.mean(), 0.5 * (img - img.mean()), atol=1e-12)


def test_gamma_examples():
    assert gamma(np.array([[0.25]]), 2.0)[0, 0] == pytest.approx(0.0625)
    for g in (0.25, 0.7, 3.9):
        np.testing.assert_array_equal(gamma(np.array([[0.0, 1.0]]), g), [[0.0, 1.0]])


@pytest.mark.parametrize("op, arg", [(contrast, 0.49), (contrast, 2.01), (gamma, 0.2), (gamma, 4.5),
                                     (rotate, 181.0), (rotate, -180.5)])
def test_point_and_rotation_ranges(op, arg):
    with pytest.raises(ParameterError):
        op(np.zeros((16, 16)), arg)


# ---------------------------------------------------------------- geometry

def test_rotate_180_is_index_flip():
    img = random_image(2, (32, 32))
    np.testing.assert_allclose(rotate(img, 180.0), img[::-1, ::-1], atol=1e-6)


def test_rotate_90_is_rot90():
    img = random_image(3, (16, 16))
    out = rotate(img, 90.0)
    assert np.allclose(out, np.rot90(img), atol=1e-6) or np.allclose(out, np.rot90(img, -1), atol=1e-6)


def test_rotation_fills_corners_with_zero():
    out = rotate(np.ones((32, 32)), 45.0)
    assert out[0, 0] == 0.0 and out[16, 16] == pytest.approx(1.0)


def test_translate_examples():
    img = random_image(4, (16, 16))
    out = translate(img, 3, -2)
    np.testing.assert_array_equal(out[:14, 3:], img[2:, :13])
    assert not out[:, :3].any() and not out[14:].any()
    assert not translate(img, 16, 0, max_shift=16).any()


def test_translate_there_and_back_zeroes_one_strip():
    img = random_image(5, (16, 16))
    back = translate(translate(img, 4, 0), -4, 0)
    np.testing.assert_array_equal(back[:, :12], img[:, :12])
    assert not back[:, 12:].any()


def test_translate_bounds():
    img = np.zeros((64, 64))
    translate(img, 16, -16)
    with pytest.raises(ParameterError):
        translate(img, 17, 0)
    with pytest.raises(ParameterError):
        translate(img, 1.5, 0)
    translate(img, 40, 0, max_shift=100)


@settings(max_examples=30, deadline=None)
@given(images, st.floats(-180, 180))
def test_rotation_preserves_shape_and_range(img, theta):
    out = rotate(img, theta)
    assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(images)
def test_identity_parameters_are_bitwise(img):
    for out in (contrast(img, 1.0), gamma(img, 1.0), rotate(img, 0.0), translate(img, 0, 0)):
        np.testing.assert_array_equal(out, img)


# ---------------------------------------------------------------- specs and policy

def test_spec_text_round_trip():
    spec = AugmentSpec((AugmentOp("gamma", (1.5,)), AugmentOp("rotate", (-30.0,)), AugmentOp("translate", (4, -7))))
    assert str(spec) == "gamma(1.5)|rotate(-30)|translate(4,-7)"
    assert str(AugmentSpec.parse(str(spec))) == str(spec)


def test_spec_parse_rejects_unknown_op():
    with pytest.raises(ParameterError):
        AugmentSpec.parse("blur(2)")


def test_spec_applies_ops_in_order():
    img = random_image(6)
    spec = AugmentSpec.parse("gamma(2)|translate(3,0)")
    np.testing.assert_array_equal(spec.apply(img), translate(gamma(img, 2.0), 3, 0))


def test_policy_gives_ten_distinct_specs():
    specs = sample_policy(np.random.default_rng(0))
    assert len(specs) == VARIANTS_PER_IMAGE == 10
    assert len({str(s) for s in specs}) == 10
    assert all(1 <= len(s.ops) <= 3 and len({op.name for op in s.ops}) == len(s.ops) for s in specs)


def test_policy_is_reproducible_per_seed():
    a = [str(s) for s in sample_policy(np.random.default_rng(11))]
    b = [str(s) for s in sample_policy(np.random.default_rng(11))]
    c = [str(s) for s in sample_policy(np.random.default_rng(12))]
    assert a == b and a != c


def test_policy_parameters_stay_in_range():
    policy = AugmentPolicy.for_width(64)
    for seed in range(30):
        for spec in sample_policy(np.random.default_rng(seed), policy):
            for op in spec.ops:
                if op.name == "rotate":
                    assert -180 <= op.params[0] <= 180
                elif op.name == "translate":
                    assert max(map(abs, op.params)) <= 16
                elif op.name in ("gamma", "contrast"):
                    assert 0.5 <= op.params[0] <= 2.0
                else:
                    assert op.params[0] in (4, 8) and op.params[1] >= 1.0


def test_apply_all_gives_ten_variants_of_same_shape():
    img = random_image(7, (64, 64))
    outs = apply_all(img, sample_policy(np.random.default_rng(1)))
    assert len(outs) == 10 and all(o.shape == img.shape for o in outs)


def test_identity_policy_preserves_image():
    img = random_image(8, (64, 64))
    # collapsed ranges make every sampled op an identity; draw the ops the way the policy would
    neutral = {"contrast": (1.0,), "gamma": (1.0,), "rotate": (0.0,), "translate": (0, 0)}
    rng = np.random.default_rng(0)
    specs = [AugmentSpec(tuple(AugmentOp(n, neutral[n]) for n in rng.permutation(AugmentPolicy.identity().ops)[:k]))
             for k in rng.integers(1, 4, size=10)]
    for out in apply_all(img, specs):
        np.testing.assert_array_equal(out, img)


def test_collapsed_ranges_cannot_give_ten_distinct_specs():
    policy = AugmentPolicy(ops=("gamma",), gamma=(1.0, 1.0))
    with pytest.raises(ParameterError):
        sample_policy(np.random.default_rng(0), policy)


def test_shift_perturbation_ranges():
    rng = np.random.default_rng(3)
    for _ in range(200):
        rot, gam, tr = shift_perturbation(rng, 64).ops
        assert abs(rot.params[0]) <= 45 and 0.5 <= gam.params[0] <= 2.0
        assert max(map(abs, tr.params)) <= 8


def test_perturbation_stream_is_keyed_by_image_id():
    imgs = np.stack([random_image(s, (64, 64)) for s in range(3)])
    ids = ["a", "b", "c"]
    out, specs = perturb_images(imgs, ids, 5)
    out_rev, specs_rev = perturb_images(imgs[::-1], ids[::-1], 5)
    assert [str(s) for s in specs] == [str(s) for s in specs_rev[::-1]]
    np.testing.assert_array_equal(out, out_rev[::-1])
