import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradinvert.data import (
    ImageFormatError, SyntheticSpec, decode_pnm, default_threads, encode_pnm, generate_synthetic, load_manifest,
    read_image, write_dataset, write_image,
)
from gradinvert.metrics import mse


def test_zero_variation_gives_identical_class_images():
    ds = generate_synthetic(SyntheticSpec(sigma_intra=0.0, num_classes=3))
    for k in range(3):
        imgs = [s.image for s in ds.samples if s.label == k]
        assert len(imgs) == 9
        for im in imgs[1:]:
            np.testing.assert_array_equal(im, imgs[0])


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=4))
    b = generate_synthetic(SyntheticSpec(seed=4))
    c = generate_synthetic(SyntheticSpec(seed=5))
    assert all(x.image.tobytes() == y.image.tobytes() and x.id == y.id for x, y in zip(a.samples, b.samples))
    assert a.samples[0].image.tobytes() != c.samples[0].image.tobytes()


def _within_class_mse(sigma):
    ds = generate_synthetic(SyntheticSpec(sigma_intra=sigma, num_classes=4, seed=2))
    vals = []
    for k in range(4):
        imgs = [s.image for s in ds.samples if s.label == k]
        vals += [mse(a, b) for a, b in itertools.combinations(imgs, 2)]
    return np.mean(vals)


def test_within_class_spread_grows_with_sigma():
    spreads = [_within_class_mse(s) for s in (0.05, 0.2, 0.5)]
    assert spreads[0] < spreads[1] < spreads[2]


def test_pixels_in_range_and_splits_disjoint():
    ds = generate_synthetic(SyntheticSpec(sigma_intra=0.8))
    for s in ds.samples:
        assert s.image.shape == (1, 16, 16)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    ids = {split: {s.id for s in ds.split(split)} for split in ("victim", "prior", "train")}
    assert not ids["victim"] & ids["prior"]
    assert not ids["victim"] & ids["train"]
    assert not ids["prior"] & ids["train"]
    assert len(ds.split("victim")) == 20 and len(ds.split("prior")) == 30


def test_invalid_sigma():
    with pytest.raises(ValueError):
        SyntheticSpec(sigma_intra=1.5)


def test_p5_fixture():
    data = b"P5\n16 16\n255\n" + bytes(range(256))
    img = decode_pnm(data)
    assert img.shape == (1, 16, 16)
    assert img[0, 0, 0] == 0.0 and img[0, 15, 15] == 1.0
    assert img[0, 0, 1] == pytest.approx(1 / 255)


def test_p5_comments_and_16_bit():
    data = b"P5 # comment\n2 1\n65535\n" + np.array([0, 65535], dtype=">u2").tobytes()
    assert decode_pnm(data).tolist() == [[[0.0, 1.0]]]


def test_p6_round_trip():
    img = np.random.default_rng(0).random((3, 4, 5))
    back = decode_pnm(encode_pnm(img, 255))
    assert back.shape == (3, 4, 5)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


@settings(max_examples=30, deadline=None)
@given(img=arrays(np.float64, (1, 7, 5), elements=st.floats(0, 1)))
def test_16_bit_quantization_bound(img, tmp_path_factory):
    path = tmp_path_factory.mktemp("img") / "x.pgm"
    write_image(img, path)
    assert np.abs(read_image(path) - img).max() <= 1 / 131070 + 1e-15


@pytest.mark.parametrize("data", [
    b"P5\n16 16\n0\n" + bytes(256),
    b"P5\n16 16\n255\n" + bytes(255),
    b"P3\n1 1\n255\n0",
    b"P5\n16",
    b"P5\nab 16\n255\n",
    b"P5\n0 16\n255\n",
    b"P5\n1 1\n70000\n\0\0",
])
def test_malformed_images(data):
    with pytest.raises(ImageFormatError):
        decode_pnm(data)


def test_dataset_manifest_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_classes=2, victims_per_class=1, priors_per_class=1, train_per_class=1))
    manifest = write_dataset(ds, tmp_path)
    loaded = load_manifest(manifest)
    assert [(s.id, s.label, s.split) for s in loaded.samples] == [(s.id, s.label, s.split) for s in ds.samples]
    for a, b in zip(loaded.samples, ds.samples):
        assert np.abs(a.image - b.image).max() <= 1 / 131070 + 1e-15


def test_thread_env(monkeypatch):
    monkeypatch.setenv("GRADINVERT_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("GRADINVERT_THREADS", "junk")
    assert default_threads() == 1


def test_sigma_bounds_deviation_from_prototype():
    proto = generate_synthetic(SyntheticSpec(sigma_intra=0.0, seed=7))
    noisy = generate_synthetic(SyntheticSpec(sigma_intra=0.1, seed=7))
    worst = max(np.abs(a.image - b.image).max() for a, b in zip(proto.samples, noisy.samples))
    assert 0.05 < worst <= 0.1 + 1e-12
