"""Mosaic conversions, synthetic degradation, patches, manifests, PNG I/O."""

import json
import os

import numpy as np
import pytest

from splitisp.bayer import (
    BayerRaw,
    LUMA_WEIGHTS,
    mosaic_rgb,
    normalize_raw,
    pack_cfa,
    to_grayscale,
    unpack_cfa,
)
from splitisp.errors import ConfigurationError, ShapeError, ValidationError
from splitisp.synthesis import (
    DegradationParams,
    extract_patches,
    load_manifest,
    load_raw_png,
    load_srgb_png,
    PairManifest,
    random_scene,
    save_manifest,
    save_raw_png,
    save_srgb_png,
    synth_pair,
)


def test_normalize_raw_endpoints():
    raw = BayerRaw(np.array([[0, 512], [1023, 1]], dtype=np.uint16), 10)
    norm = normalize_raw(raw)
    assert norm[0, 0] == 0.0
    assert norm[1, 0] == 1.0
    assert norm[0, 1] == pytest.approx(512 / 1023)
    raw12 = BayerRaw(np.array([[4095, 0], [0, 0]], dtype=np.uint16), 12)
    assert normalize_raw(raw12)[0, 0] == 1.0


def test_raw_range_validation_reports_coordinates():
    px = np.zeros((4, 4), dtype=np.uint16)
    px[1, 2] = 1024
    with pytest.raises(ValidationError) as info:
        BayerRaw(px, 10)
    assert "(1, 2)" in str(info.value)


def test_raw_rejects_odd_dims_and_bad_depth():
    with pytest.raises(ShapeError):
        BayerRaw(np.zeros((3, 4), dtype=np.uint16), 10)
    with pytest.raises(ConfigurationError):
        BayerRaw(np.zeros((4, 4), dtype=np.uint16), 8)
    with pytest.raises(ConfigurationError):
        BayerRaw(np.zeros((4, 4), dtype=np.uint16), 10, cfa="BGGR")


def test_pack_cfa_2x2_hand_case():
    m = np.array([[1, 2], [3, 4]], dtype=np.uint16)
    planes = pack_cfa(m)
    assert planes.shape == (1, 1, 4)
    assert planes[0, 0].tolist() == [1, 2, 3, 4]  # R, G1, G2, B


def test_pack_cfa_4x4_hand_layout():
    m = np.arange(16, dtype=np.uint16).reshape(4, 4)
    planes = pack_cfa(m)
    assert planes[..., 0].tolist() == [[0, 2], [8, 10]]   # R at even/even
    assert planes[..., 1].tolist() == [[1, 3], [9, 11]]   # G1 at even/odd
    assert planes[..., 2].tolist() == [[4, 6], [12, 14]]  # G2 at odd/even
    assert planes[..., 3].tolist() == [[5, 7], [13, 15]]  # B at odd/odd


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(0)
    m = rng.integers(0, 1024, size=(8, 8)).astype(np.uint16)
    assert np.array_equal(unpack_cfa(pack_cfa(m)), m)
    planes = rng.integers(0, 1024, size=(3, 5, 4)).astype(np.uint16)
    assert np.array_equal(pack_cfa(unpack_cfa(planes)), planes)


def test_pack_cfa_rejects_odd_dims():
    with pytest.raises(ShapeError):
        pack_cfa(np.zeros((5, 4), dtype=np.uint16))


def test_mosaic_rgb_samples_the_pattern():
    img = np.zeros((4, 4, 3))
    img[..., 0] = 0.1  # R
    img[..., 1] = 0.2  # G
    img[..., 2] = 0.3  # B
    m = mosaic_rgb(img)
    assert m[0, 0] == 0.1 and m[0, 1] == 0.2
    assert m[1, 0] == 0.2 and m[1, 1] == 0.3


def test_to_grayscale_hand_values():
    white = np.ones((2, 2, 3))
    assert np.allclose(to_grayscale(white), 1.0, atol=1e-15)
    gray = np.full((2, 2, 3), 0.42)
    assert np.allclose(to_grayscale(gray), 0.42, atol=1e-15)
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    assert np.allclose(to_grayscale(red), LUMA_WEIGHTS[0], atol=1e-15)
    assert to_grayscale(white).shape == (2, 2)


def test_synth_pair_identity_degradation_is_quantized_mosaic():
    rng = np.random.default_rng(0)
    img = random_scene(16, 16, rng)
    params = DegradationParams(gamma=1.0, gains=(1.0, 1.0, 1.0), noise_std=0.0,
                               bit_depth=10)
    raw, srgb = synth_pair(img, params, rng)
    expected = np.rint(mosaic_rgb(img) * 1023).astype(np.uint16)
    assert np.array_equal(raw.pixels, expected)
    assert np.array_equal(srgb, img)


def test_synth_pair_midgray_hand_value():
    img = np.full((8, 8, 3), 0.5)
    params = DegradationParams(gamma=2.2, gains=(1.0, 1.0, 1.0), noise_std=0.0,
                               bit_depth=10)
    raw, _ = synth_pair(img, params, np.random.default_rng(0))
    assert np.all(raw.pixels == round(0.5 ** 2.2 * 1023))
    assert np.all(raw.pixels == 223)


def test_synth_pair_quantization_error_bound():
    rng = np.random.default_rng(3)
    img = random_scene(32, 32, rng)
    params = DegradationParams(gamma=2.2, gains=(2.0, 1.0, 1.6), noise_std=0.0,
                               bit_depth=10)
    raw, _ = synth_pair(img, params, rng)
    linear = img ** 2.2 / np.array([2.0, 1.0, 1.6])
    source = mosaic_rgb(linear)
    back = raw.pixels.astype(np.float64) / 1023
    assert np.max(np.abs(back - source)) <= 0.5 / 1023 + 1e-12


def test_synth_pair_deterministic_given_rng_seed():
    img = random_scene(16, 16, np.random.default_rng(1))
    params = DegradationParams()
    a, _ = synth_pair(img, params, np.random.default_rng(42))
    b, _ = synth_pair(img, params, np.random.default_rng(42))
    assert np.array_equal(a.pixels, b.pixels)


def test_synth_pair_rejects_out_of_range_input():
    with pytest.raises(ValidationError):
        synth_pair(np.full((4, 4, 3), 1.5), DegradationParams(),
                   np.random.default_rng(0))


def test_extract_patches_even_offsets_and_alignment():
    rng = np.random.default_rng(0)
    img = random_scene(32, 32, rng)
    plane = mosaic_rgb(img)
    patches = extract_patches(plane, img, patch=8, count=20,
                              rng=np.random.default_rng(5))
    for raw_patch, srgb_patch in patches:
        assert raw_patch.shape == (8, 8)
        assert srgb_patch.shape == (8, 8, 3)
        # RGGB phase preserved: the patch is a mosaic of its own sRGB crop
        assert np.array_equal(raw_patch, mosaic_rgb(srgb_patch))


def test_extract_patches_full_image_degenerate():
    rng = np.random.default_rng(0)
    img = random_scene(16, 16, rng)
    plane = mosaic_rgb(img)
    (raw_patch, srgb_patch), = extract_patches(plane, img, 16, 1, rng)
    assert np.array_equal(raw_patch, plane)
    assert np.array_equal(srgb_patch, img)


def test_extract_patches_validation():
    rng = np.random.default_rng(0)
    img = random_scene(16, 16, rng)
    plane = mosaic_rgb(img)
    with pytest.raises(ShapeError):
        extract_patches(plane, img, 7, 1, rng)
    with pytest.raises(ShapeError):
        extract_patches(plane, img, 32, 1, rng)


def test_raw_png_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 4096, size=(16, 16)).astype(np.uint16)
    raw = BayerRaw(px, 12)
    path = tmp_path / "img_raw.png"
    save_raw_png(path, raw)
    back = load_raw_png(path, 12)
    assert np.array_equal(back.pixels, px)
    assert back.bit_depth == 12


def test_raw_png_range_checked_on_load(tmp_path):
    px = np.full((4, 4), 2000, dtype=np.uint16)  # fits 12-bit, not 10-bit
    save_raw_png(tmp_path / "too_big.png", BayerRaw(px, 12))
    with pytest.raises(ValidationError):
        load_raw_png(tmp_path / "too_big.png", 10)


def test_srgb_png_roundtrip_is_8bit_exact(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(8, 8, 3)) * 255) / 255
    path = tmp_path / "img.png"
    save_srgb_png(path, img)
    back = load_srgb_png(path)
    assert np.allclose(back, img, atol=1e-12)


def test_manifest_roundtrip_and_schema(tmp_path):
    manifest = PairManifest(bit_depth=10, dataset="unit")
    (tmp_path / "a_raw.png").touch()
    (tmp_path / "a_srgb.png").touch()
    manifest.add("a_raw.png", "a_srgb.png", "train")
    path = tmp_path / "manifest.json"
    save_manifest(path, manifest)
    doc = json.loads(path.read_text())
    assert set(doc) == {"bit_depth", "dataset", "entries"}
    assert doc["entries"][0] == {"raw": "a_raw.png", "srgb": "a_srgb.png",
                                 "split": "train"}
    back = load_manifest(path)
    assert back.bit_depth == 10 and len(back.entries) == 1


def test_manifest_rejects_overlapping_splits(tmp_path):
    manifest = PairManifest(bit_depth=10)
    manifest.add("x_raw.png", "x_srgb.png", "train")
    manifest.add("x_raw.png", "x_srgb.png", "val")
    with pytest.raises(ValidationError):
        manifest.validate()


def test_manifest_rejects_missing_files(tmp_path):
    manifest = PairManifest(bit_depth=10)
    manifest.add("ghost_raw.png", "ghost_srgb.png", "train")
    path = tmp_path / "manifest.json"
    doc = {"bit_depth": 10, "dataset": "x", "entries": manifest.entries}
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_manifest(path)
    assert load_manifest(path, check_files=False).entries


def test_manifest_rejects_bad_split(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"bit_depth": 10, "dataset": "x", "entries": [
        {"raw": "a.png", "srgb": "b.png", "split": "test"}]}))
    with pytest.raises(ValidationError):
        load_manifest(path, check_files=False)


def test_random_scene_shape_and_range():
    img = random_scene(32, 48, np.random.default_rng(0))
    assert img.shape == (32, 48, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    other = random_scene(32, 48, np.random.default_rng(1))
    assert not np.array_equal(img, other)
