import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from masdt.data import generate_synthetic_clip
from masdt.flow import (FlowField, FlowParams, clip_flow_fields, decode_flow, encode_flow, estimate_flow,
                        estimate_flow_levels, flow_images, flow_to_image, load_flow, quantize_field,
                        save_flow, to_grayscale, warp)

PARAMS = FlowParams(max_displacement=3.0)


def textured(seed, size=32, pad=8):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random((size + 2 * pad, size + 2 * pad)), 1.5) * 3


def shifted_pair(seed, dx, dy=0, size=32, pad=8):
    """(f_t, f_t1) where content of f_t moves by (dx, dy) pixels in f_t1."""
    big = textured(seed, size, pad)
    a = big[pad:pad + size, pad:pad + size]
    b = big[pad - dy:pad - dy + size, pad - dx:pad - dx + size]
    return a, b


def test_params_validation():
    with pytest.raises(ValueError):
        FlowParams(smoothness=0)
    with pytest.raises(ValueError):
        FlowParams(downscale=1.0)
    with pytest.raises(ValueError):
        FlowParams(max_displacement=0)
    p = FlowParams()
    assert (p.smoothness, p.iterations, p.levels, p.downscale) == (0.1, 100, 3, 0.5)


def test_field_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)))


def test_grayscale_weights():
    frame = np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))])
    np.testing.assert_allclose(to_grayscale(frame), 0.299)
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((4, 2, 2)))


def test_identical_frames_give_zero_flow():
    a = textured(0)[:32, :32]
    f = estimate_flow(a, a, PARAMS)
    assert max(np.abs(f.u).max(), np.abs(f.v).max()) < 1e-6


@pytest.mark.parametrize("shift", [1, 2, 3])
def test_translation_endpoint_error(shift):
    for seed in range(3):
        a, b = shifted_pair(seed, shift)
        f = estimate_flow(a, b, PARAMS)
        interior = (slice(4, -4), slice(4, -4))
        epe = np.hypot(f.u[interior] - shift, f.v[interior]).mean()
        assert epe < 0.5


def test_vertical_translation_sign():
    a, b = shifted_pair(1, 0, 2)
    f = estimate_flow(a, b, PARAMS)
    assert abs(f.v[4:-4, 4:-4].mean() - 2) < 0.5 and abs(f.u[4:-4, 4:-4].mean()) < 0.5


def test_flow_nearly_constant_under_translation():
    for seed in range(5):
        a, b = shifted_pair(seed, 3)
        assert estimate_flow(a, b, PARAMS).u[4:-4, 4:-4].std() < 0.3


def test_forward_backward_consistency():
    for seed in range(3):
        a, b = shifted_pair(seed, 2)
        fwd, bwd = estimate_flow(a, b, PARAMS), estimate_flow(b, a, PARAMS)
        assert np.mean(np.abs(fwd.u + bwd.u) + np.abs(fwd.v + bwd.v)) < 0.5


def test_estimate_flow_is_deterministic():
    a, b = shifted_pair(4, 2)
    f1, f2 = estimate_flow(a, b), estimate_flow(a, b)
    assert np.array_equal(f1.u, f2.u) and np.array_equal(f1.v, f2.v)


def test_rgb_and_gray_inputs_agree():
    clip = generate_synthetic_clip(2, "real")
    rgb = estimate_flow(clip.frames[0], clip.frames[1], PARAMS)
    gray = estimate_flow(to_grayscale(clip.frames[0]), to_grayscale(clip.frames[1]), PARAMS)
    assert np.array_equal(rgb.u, gray.u)


def test_estimate_flow_errors():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((32, 32)), np.zeros((32, 30)))
    bad = np.zeros((32, 32))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        estimate_flow(bad, np.zeros((32, 32)))
    with pytest.raises(ValueError):  # coarsest level would be 4 px
        estimate_flow(np.zeros((16, 16)), np.zeros((16, 16)), FlowParams(levels=3))


def test_warp_identity_and_integer_shift():
    img = textured(5)[:32, :32]
    zero = FlowField(np.zeros_like(img), np.zeros_like(img))
    assert np.array_equal(warp(img, zero), img)
    shift = FlowField(np.full_like(img, 2.0), np.full_like(img, -1.0))
    out = warp(img, shift)
    # out(y, x) = img(y - 1, x + 2)
    np.testing.assert_allclose(out[1:, :-2], img[:-1, 2:], atol=1e-12)


def test_warp_by_estimated_flow_reduces_mse():
    for seed in range(5):
        for shift in (1, 2, 3):
            a, b = shifted_pair(seed, shift)
            f = estimate_flow(a, b, PARAMS)
            before = np.mean((b - a) ** 2)
            after = np.mean((warp(b, f) - a) ** 2)
            assert after <= 0.5 * before


def test_residual_improves_from_coarsest_to_finest():
    for seed in range(5):
        for shift in (1, 2, 3):
            a, b = shifted_pair(seed, shift)
            levels = estimate_flow_levels(a, b, PARAMS)
            res = [np.mean(np.abs(warp(b, f) - a)) for f in levels]
            assert len(levels) == PARAMS.levels
            assert res[-1] < res[0] < np.mean(np.abs(b - a))


def _monotone_suite():
    pairs = []
    for seed in range(10):
        for shift in (1, 2, 3):
            pairs.append(shifted_pair(seed, shift))
            pairs.append(shifted_pair(seed, shift, shift, size=64))
    for seed in range(20):
        clip = generate_synthetic_clip(seed, "real")
        pairs.append((to_grayscale(clip.frames[0]), to_grayscale(clip.frames[1])))
    return pairs


@pytest.mark.xfail(strict=True, reason="Horn-Schunck refinement is not a descent method on the "
                   "warped residual; one 1-px pair in 80 rises at the middle level")
def test_residual_monotone_across_levels_on_suite():
    for a, b in _monotone_suite():
        res = [np.mean(np.abs(warp(b, f) - a)) for f in estimate_flow_levels(a, b, PARAMS)]
        assert all(r1 <= r0 for r0, r1 in zip(res, res[1:]))


def test_flow_to_image_examples():
    zero = FlowField(np.zeros((4, 4)), np.zeros((4, 4)))
    img = flow_to_image(zero, 3.0)
    np.testing.assert_array_equal(img[0], 0.5)
    np.testing.assert_array_equal(img[1], 0.5)
    np.testing.assert_array_equal(img[2], 0.0)
    edge = flow_to_image(FlowField(np.full((2, 2), 3.0), np.zeros((2, 2))), 3.0)
    np.testing.assert_array_equal(edge[:, 0, 0], [1.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        flow_to_image(zero, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 10.0))
def test_flow_image_range_and_magnitude(seed, scale):
    rng = np.random.default_rng(seed)
    f = FlowField(rng.standard_normal((6, 6)) * scale, rng.standard_normal((6, 6)) * scale)
    d = 4.0
    img = flow_to_image(f, d)
    assert img.shape == (3, 6, 6) and img.min() >= 0 and img.max() <= 1
    mag = np.hypot(f.u, f.v)
    below = mag < d
    assert np.abs(img[2][below] - mag[below] / d).max(initial=0.0) < 1e-12


def test_clip_yields_t_minus_one_flows():
    clip = generate_synthetic_clip(0, "real", frames=5)
    fields = clip_flow_fields(clip.frames, PARAMS)
    assert len(fields) == 4
    assert flow_images(fields, 3.0).shape == (4, 3, 32, 32)


def test_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = FlowField(rng.standard_normal((5, 7)), rng.standard_normal((5, 7)))
    blob = encode_flow(f)
    assert blob[:4] == b"MFLW" and len(blob) == 14 + 8 * 35
    back = decode_flow(blob)
    q = quantize_field(f)
    assert np.array_equal(back.u, q.u) and np.array_equal(back.v, q.v)
    save_flow(f, tmp_path / "a" / "pair.flo")
    assert np.array_equal(load_flow(tmp_path / "a" / "pair.flo").u, q.u)
    assert list(tmp_path.joinpath("a").iterdir()) == [tmp_path / "a" / "pair.flo"]


def test_cache_rejects_bad_records():
    f = FlowField(np.zeros((2, 2)), np.zeros((2, 2)))
    blob = encode_flow(f)
    with pytest.raises(ValueError):
        decode_flow(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        decode_flow(blob[:-4])
    with pytest.raises(ValueError):
        decode_flow(blob[:4] + (9).to_bytes(2, "little") + blob[6:])
