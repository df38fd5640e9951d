"""Tests for soft histograms, histogram-guided mixing, and cross-attention."""

import math

import numpy as np
import pytest
import torch

from splitisp.codec import LatentFeature
from splitisp.colorize import (
    NUM_BINS,
    CrossAttentionColorizer,
    HistogramColorizer,
    HistogramMixer,
    HistogramPredictor,
    ccl_loss,
    colorization_loss,
    fea_loss,
    reference_histogram,
    soft_histogram,
    validate_histogram,
)
from splitisp.errors import ConfigurationError, ShapeError


# ---------------------------------------------------------------------------
# soft histogram
# ---------------------------------------------------------------------------

def test_histogram_constant_at_bin_center_is_one_hot():
    img = torch.full((3, 4, 4), 10.0 / 255.0, dtype=torch.float64)
    hist = soft_histogram(img)
    assert hist.shape == (3, NUM_BINS)
    assert float(hist[:, 10].min()) == pytest.approx(1.0, abs=1e-12)
    assert float(hist.sum()) == pytest.approx(3.0, abs=1e-12)


def test_histogram_midpoint_splits_between_neighbors():
    img = torch.full((3, 2, 2), 10.5 / 255.0, dtype=torch.float64)
    hist = soft_histogram(img)
    assert torch.allclose(hist[:, 10], torch.full((3,), 0.5, dtype=torch.float64), atol=1e-9)
    assert torch.allclose(hist[:, 11], torch.full((3,), 0.5, dtype=torch.float64), atol=1e-9)


def test_histogram_hand_computed_four_pixels():
    ch = torch.tensor([[0.0, 1.0], [10.0 / 255.0, 10.4 / 255.0]], dtype=torch.float64)
    img = ch[None].expand(3, 2, 2)
    hist = soft_histogram(img)
    row = hist[0]
    assert float(row[0]) == pytest.approx(0.25, abs=1e-9)
    assert float(row[255]) == pytest.approx(0.25, abs=1e-9)
    assert float(row[10]) == pytest.approx((1.0 + 0.6) / 4.0, abs=1e-9)
    assert float(row[11]) == pytest.approx(0.4 / 4.0, abs=1e-9)
    assert float(row.sum()) == pytest.approx(1.0, abs=1e-12)


def test_histogram_rows_sum_to_one_float32():
    gen = torch.Generator().manual_seed(0)
    img = torch.rand(4, 3, 16, 16, generator=gen)
    hist = soft_histogram(img)
    assert hist.shape == (4, 3, NUM_BINS)
    assert hist.dtype == torch.float32
    assert float((hist.sum(dim=-1) - 1.0).abs().max()) < 1e-6
    assert float(hist.min()) >= 0.0
    validate_histogram(hist)


def test_histogram_batched_matches_per_image():
    gen = torch.Generator().manual_seed(1)
    img = torch.rand(3, 3, 8, 8, generator=gen, dtype=torch.float64)
    batched = soft_histogram(img)
    for i in range(3):
        assert torch.allclose(batched[i], soft_histogram(img[i]), atol=1e-12)


def test_histogram_clamps_out_of_range_values():
    img = torch.tensor([-0.5, 1.7, 0.0, 1.0], dtype=torch.float64).reshape(1, 2, 2)
    hist = soft_histogram(img.expand(3, 2, 2))
    assert float(hist[0, 0]) == pytest.approx(0.5, abs=1e-12)
    assert float(hist[0, 255]) == pytest.approx(0.5, abs=1e-12)


def test_histogram_invariant_to_pixel_shuffle():
    gen = torch.Generator().manual_seed(2)
    img = torch.rand(3, 6, 6, generator=gen, dtype=torch.float64)
    perm = torch.randperm(36, generator=gen)
    shuffled = img.reshape(3, -1)[:, perm].reshape(3, 6, 6)
    assert torch.allclose(soft_histogram(img), soft_histogram(shuffled), atol=1e-12)


def test_histogram_shape_validation():
    with pytest.raises(ShapeError):
        soft_histogram(torch.zeros(4, 8, 8))
    with pytest.raises(ShapeError):
        soft_histogram(torch.zeros(1, 4, 8, 8))
    with pytest.raises(ShapeError):
        soft_histogram(torch.zeros(3, 8))


def _interior_bin_image(shape, seed):
    """Image whose values sit well inside the linear segment of each bin."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 255, size=shape)
    frac = rng.uniform(0.3, 0.7, size=shape)
    return torch.from_numpy((idx + frac) / 255.0)


def _fd_grad(fn, x, step=1e-3):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def _check_grad(fn, x0, step=1e-3):
    fd = _fd_grad(fn, x0.clone(), step=step)
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    num = float((x.grad - fd).norm())
    den = max(float(fd.norm()), 1e-12)
    assert num / den < 1e-4, f"gradient mismatch: rel err {num / den:.3e}"


def test_histogram_gradient_matches_finite_differences():
    img = _interior_bin_image((3, 4, 4), seed=3).double()
    gen = torch.Generator().manual_seed(4)
    w = torch.randn(3, NUM_BINS, generator=gen, dtype=torch.float64)
    _check_grad(lambda x: (soft_histogram(x) * w).sum(), img)


def test_ccl_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(5)
    h_ref = torch.softmax(torch.randn(1, 3, NUM_BINS, generator=gen, dtype=torch.float64), dim=-1)
    h0 = torch.softmax(torch.randn(1, 3, NUM_BINS, generator=gen, dtype=torch.float64), dim=-1)
    _check_grad(lambda h: ccl_loss(h, h_ref), h0)


def test_histogram_loss_composition_gradient():
    img = _interior_bin_image((1, 3, 4, 4), seed=6).double()
    gen = torch.Generator().manual_seed(7)
    h_ref = torch.softmax(torch.randn(1, 3, NUM_BINS, generator=gen, dtype=torch.float64), dim=-1)
    # bin coordinates amplify pixel steps 255x, so a smaller step keeps the
    # central-difference truncation error below the tolerance
    _check_grad(lambda x: ccl_loss(soft_histogram(x), h_ref), img, step=1e-5)


def test_validate_histogram_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        validate_histogram(torch.zeros(3, 128))
    bad_sum = torch.full((3, NUM_BINS), 1.0 / NUM_BINS)
    validate_histogram(bad_sum)  # uniform rows pass
    with pytest.raises(ShapeError):
        validate_histogram(bad_sum * 2.0)
    neg = bad_sum.clone()
    neg[0, 0] = -0.1
    neg[0, 1] += 0.1 + 1.0 / NUM_BINS
    with pytest.raises(ShapeError):
        validate_histogram(neg)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_ccl_one_hot_shift_hand_value():
    h_ref = torch.zeros(1, 3, NUM_BINS, dtype=torch.float64)
    h_pred = torch.zeros(1, 3, NUM_BINS, dtype=torch.float64)
    for c in range(3):
        h_ref[0, c, 10] = 1.0
        h_pred[0, c, 20] = 1.0
    want = math.sqrt(6.0 / (3 * NUM_BINS))
    assert float(ccl_loss(h_pred, h_ref)) == pytest.approx(want, rel=1e-12)


def test_fea_loss_accepts_latent_features_and_tensors():
    gen = torch.Generator().manual_seed(8)
    v = torch.rand(1, 4, 8, 8, generator=gen, dtype=torch.float64)
    a = LatentFeature(v, "srgb", 2)
    b = LatentFeature(v + 0.2, "srgb", 2)
    assert float(fea_loss(a, b)) == pytest.approx(0.2, rel=1e-12)
    assert float(fea_loss(v, v + 0.2)) == pytest.approx(0.2, rel=1e-12)
    assert float(fea_loss(a, v)) == 0.0


def test_colorization_loss_hand_value():
    f_ref = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
    f_pred = f_ref + 0.2
    h_ref = torch.zeros(1, 3, NUM_BINS, dtype=torch.float64)
    h_pred = h_ref + 0.5
    total = colorization_loss(f_pred, f_ref, h_pred, h_ref, 0.01)
    assert float(total) == pytest.approx(0.2 + 0.01 * 0.5, rel=1e-12)


def test_colorization_loss_zero_weight_is_exactly_feature_term():
    gen = torch.Generator().manual_seed(9)
    f_ref = torch.rand(1, 4, 4, 4, generator=gen)
    f_pred = torch.rand(1, 4, 4, 4, generator=gen)
    h = torch.rand(1, 3, NUM_BINS, generator=gen)
    total = colorization_loss(f_pred, f_ref, h, h * 2.0, 0.0)
    assert float(total) == float(fea_loss(f_pred, f_ref))
    with pytest.raises(ConfigurationError):
        colorization_loss(f_pred, f_ref, h, h, -0.1)


# ---------------------------------------------------------------------------
# histogram predictor
# ---------------------------------------------------------------------------

def test_predictor_outputs_row_stochastic_histograms():
    torch.manual_seed(0)
    model = HistogramPredictor(8).eval()
    gen = torch.Generator().manual_seed(10)
    with torch.no_grad():
        hist = model(torch.randn(2, 8, 8, 8, generator=gen))
    assert hist.shape == (2, 3, NUM_BINS)
    validate_histogram(hist)


def test_predictor_sensitive_to_input():
    torch.manual_seed(1)
    model = HistogramPredictor(8).eval()
    gen = torch.Generator().manual_seed(11)
    a = torch.randn(1, 8, 8, 8, generator=gen)
    b = torch.randn(1, 8, 8, 8, generator=gen)
    with torch.no_grad():
        ha, hb = model(a), model(b)
    assert float((ha - hb).abs().max()) > 1e-6


# ---------------------------------------------------------------------------
# histogram mixer
# ---------------------------------------------------------------------------

def zeroed_identity_mixer(channels):
    """Mixer rigged to emit the identity matrix for every histogram."""
    torch.manual_seed(2)
    mixer = HistogramMixer(channels)
    with torch.no_grad():
        mixer.proj.weight.zero_()
        mixer.proj.bias.copy_(torch.eye(channels).flatten())
    return mixer


def test_mixer_output_shape_and_validation():
    torch.manual_seed(3)
    mixer = HistogramMixer(8)
    hist = torch.rand(2, 3, NUM_BINS, generator=torch.Generator().manual_seed(12))
    out = mixer(hist)
    assert out.shape == (2, 8, 8)
    with pytest.raises(ShapeError):
        mixer(torch.zeros(2, 3, 128))


def test_identity_mixing_matrix_preserves_features():
    bundle = HistogramColorizer(8)
    bundle.mixer = zeroed_identity_mixer(8)
    gen = torch.Generator().manual_seed(13)
    f_r = LatentFeature(torch.rand(2, 8, 8, 8, generator=gen), "raw", 2)
    hist = torch.rand(2, 3, NUM_BINS, generator=gen)
    f_c = bundle.color_feature(hist, f_r)
    assert f_c.modality == "srgb"
    assert f_c.scale == 2
    assert torch.allclose(f_c.values, f_r.values, atol=1e-7)


def test_color_feature_applies_matrix_pointwise():
    torch.manual_seed(4)
    bundle = HistogramColorizer(8)
    gen = torch.Generator().manual_seed(14)
    hist = torch.softmax(torch.randn(1, 3, NUM_BINS, generator=gen), dim=-1)
    u = torch.randn(1, 8, 1, 1, generator=gen)
    with torch.no_grad():
        matrix = bundle.mixer(hist)
        f_c = bundle.color_feature(hist, LatentFeature(u, "raw", 0))
        want = matrix[0] @ u[0, :, 0, 0]
    assert torch.allclose(f_c.values[0, :, 0, 0], want, atol=1e-6)


def test_color_feature_channel_mismatch():
    torch.manual_seed(5)
    bundle = HistogramColorizer(8)
    hist = torch.rand(1, 3, NUM_BINS)
    with pytest.raises(ShapeError):
        bundle.color_feature(hist, LatentFeature(torch.zeros(1, 4, 4, 4), "raw", 0))


# ---------------------------------------------------------------------------
# cross attention
# ---------------------------------------------------------------------------

def test_attention_weights_are_row_stochastic():
    torch.manual_seed(6)
    attn = CrossAttentionColorizer(8, heads=2)
    gen = torch.Generator().manual_seed(15)
    f_c = torch.randn(2, 8, 4, 4, generator=gen)
    f_g = torch.randn(2, 8, 4, 4, generator=gen)
    with torch.no_grad():
        w = attn.attention_weights(f_c, f_g)
    assert w.shape == (2, 2, 16, 16)
    assert float((w.sum(dim=-1) - 1.0).abs().max()) < 1e-6
    assert float(w.min()) >= 0.0


def test_attention_single_location_has_no_residual_path():
    torch.manual_seed(7)
    attn = CrossAttentionColorizer(8).eval()
    gen = torch.Generator().manual_seed(16)
    f_c = torch.randn(1, 8, 1, 1, generator=gen)
    f_g = torch.randn(1, 8, 1, 1, generator=gen)
    with torch.no_grad():
        out = attn(f_c, f_g)
        want = attn.to_out(attn.to_v(f_g))
    assert torch.allclose(out, want, atol=1e-6)
    assert float((out - f_c).abs().max()) > 1e-3  # not an identity shortcut


def test_attention_uniform_keys_average_values():
    torch.manual_seed(8)
    attn = CrossAttentionColorizer(8).eval()
    with torch.no_grad():
        attn.to_k.weight.zero_()
        attn.to_k.bias.zero_()
    gen = torch.Generator().manual_seed(17)
    f_c = torch.randn(1, 8, 2, 2, generator=gen)
    f_g = torch.randn(1, 8, 2, 2, generator=gen)
    with torch.no_grad():
        out = attn(f_c, f_g)
        v_mean = attn.to_v(f_g).mean(dim=(2, 3), keepdim=True)
        want = attn.to_out(v_mean.expand(-1, -1, 2, 2))
    assert torch.allclose(out, want, atol=1e-6)


def test_attention_invariant_to_key_pixel_order():
    torch.manual_seed(9)
    attn = CrossAttentionColorizer(8, heads=2).eval()
    gen = torch.Generator().manual_seed(18)
    f_c = torch.randn(1, 8, 4, 4, generator=gen)
    f_g = torch.randn(1, 8, 4, 4, generator=gen)
    perm = torch.randperm(16, generator=gen)
    f_g_perm = f_g.flatten(2)[:, :, perm].reshape(1, 8, 4, 4)
    with torch.no_grad():
        a = attn(f_c, f_g)
        b = attn(f_c, f_g_perm)
    assert torch.allclose(a, b, atol=1e-5)


def test_attention_query_order_permutes_output():
    torch.manual_seed(10)
    attn = CrossAttentionColorizer(8).eval()
    gen = torch.Generator().manual_seed(19)
    f_c = torch.randn(1, 8, 4, 4, generator=gen)
    f_g = torch.randn(1, 8, 4, 4, generator=gen)
    perm = torch.randperm(16, generator=gen)
    f_c_perm = f_c.flatten(2)[:, :, perm].reshape(1, 8, 4, 4)
    with torch.no_grad():
        base = attn(f_c, f_g).flatten(2)[:, :, perm].reshape(1, 8, 4, 4)
        permuted = attn(f_c_perm, f_g)
    assert torch.allclose(base, permuted, atol=1e-5)


def test_attention_validation():
    with pytest.raises(ConfigurationError):
        CrossAttentionColorizer(6, heads=4)
    torch.manual_seed(11)
    attn = CrossAttentionColorizer(8)
    with pytest.raises(ShapeError):
        attn(torch.zeros(1, 4, 4, 4), torch.zeros(1, 8, 4, 4))
    with pytest.raises(ShapeError):
        attn(torch.zeros(8, 4, 4), torch.zeros(1, 8, 4, 4))


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

def test_predict_histogram_requires_raw_modality():
    torch.manual_seed(12)
    bundle = HistogramColorizer(8)
    vals = torch.rand(1, 8, 8, 8, generator=torch.Generator().manual_seed(20))
    with pytest.raises(ConfigurationError):
        bundle.predict_histogram(LatentFeature(vals, "gray", 2))
    with pytest.raises(ConfigurationError):
        bundle.predict_histogram(vals)
    with pytest.raises(ShapeError):
        bundle.predict_histogram(LatentFeature(torch.rand(1, 4, 8, 8), "raw", 2))


def test_bundle_forward_contract():
    torch.manual_seed(13)
    bundle = HistogramColorizer(8).eval()
    gen = torch.Generator().manual_seed(21)
    f_r = LatentFeature(torch.rand(2, 8, 8, 8, generator=gen), "raw", 2)
    f_g = LatentFeature(torch.rand(2, 8, 8, 8, generator=gen), "gray", 2)
    with torch.no_grad():
        f_s, hist = bundle(f_r, f_g)
        f_s2, hist2 = bundle(f_r, f_g)
    assert f_s.modality == "srgb"
    assert f_s.scale == 2
    assert f_s.values.shape == (2, 8, 8, 8)
    validate_histogram(hist)
    assert torch.equal(f_s.values, f_s2.values)
    assert torch.equal(hist, hist2)


def test_bundle_overfits_a_single_example():
    torch.manual_seed(14)
    bundle = HistogramColorizer(8)
    gen = torch.Generator().manual_seed(22)
    f_r = LatentFeature(torch.rand(1, 8, 8, 8, generator=gen), "raw", 1)
    f_g = LatentFeature(torch.rand(1, 8, 8, 8, generator=gen), "gray", 1)
    f_target = torch.rand(1, 8, 8, 8, generator=gen)
    h_target = soft_histogram(torch.rand(1, 3, 8, 8, generator=gen))

    opt = torch.optim.Adam(bundle.parameters(), lr=1e-3)
    first = None
    for _ in range(150):
        f_s, hist = bundle(f_r, f_g)
        loss = colorization_loss(f_s, f_target, hist, h_target, 0.01)
        if first is None:
            first = float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
    final = float(loss.detach())
    assert final < 0.5 * first, f"loss {first:.4f} -> {final:.4f}"


# ---------------------------------------------------------------------------
# reference histogram
# ---------------------------------------------------------------------------

def test_reference_histogram_pools_before_counting():
    img = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    img[..., 1::2] = 1.0  # each 2x2 block at scale 1 averages to 0.5
    hist = reference_histogram(img, 1)
    assert float(hist[0, 0, 127]) == pytest.approx(0.5, abs=1e-9)
    assert float(hist[0, 0, 128]) == pytest.approx(0.5, abs=1e-9)
    unpooled = soft_histogram(img)
    assert float(unpooled[0, 0, 0]) == pytest.approx(0.5, abs=1e-9)
    assert float(unpooled[0, 0, 255]) == pytest.approx(0.5, abs=1e-9)


def test_reference_histogram_validation():
    with pytest.raises(ShapeError):
        reference_histogram(torch.zeros(1, 1, 8, 8), 1)
    with pytest.raises(ShapeError):
        reference_histogram(torch.zeros(1, 3, 6, 6), 2)  # 6 not divisible by 4
    hist = reference_histogram(torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(23)), 2)
    assert hist.shape == (2, 3, NUM_BINS)
    validate_histogram(hist)
