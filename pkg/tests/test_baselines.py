import numpy as np
import pytest

from oracles import between_class_variance, otsu_exhaustive
from tbdetect.baselines import (PRESETS, DegenerateThresholdWarning, OtsuConfig, otsu_segment,
                                otsu_threshold, project)
from tbdetect.imagecore import Image
from tbdetect.metrics import jaccard
from tbdetect.synthgen import SynthConfig, generate


def test_bimodal():
    h = np.zeros(256, int)
    h[10], h[200] = 500, 300
    t = otsu_threshold(h)
    assert 10 <= t <= 199
    assert t == 10  # ties resolve downward


def test_single_level_is_degenerate():
    h = np.zeros(256, int)
    h[77] = 1000
    with pytest.warns(DegenerateThresholdWarning):
        assert otsu_threshold(h) == 77


def test_empty_histogram():
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(256, int))


def test_matches_exhaustive_argmax(rng):
    for _ in range(60):
        hist = rng.integers(0, rng.integers(2, 1000), 256)
        hist[rng.random(256) < rng.uniform(0, 0.9)] = 0
        if hist.sum() == 0 or np.count_nonzero(hist) < 2:
            continue
        t = otsu_threshold(hist)
        assert t == otsu_exhaustive(hist)
        best = between_class_variance(list(hist), t)
        for u in range(255):
            v = between_class_variance(list(hist), u)
            assert v is None or v <= best


def test_red_minus_green_segments_synthetic_rods():
    cfg = SynthConfig(image_size=(256, 256), n_distractors=(0, 0), seed=5)
    img, truth, _ = generate(cfg)
    pred = otsu_segment(img, OtsuConfig("red_minus_green"))
    covered = (pred.bits & truth.bits).sum() / truth.bits.sum()
    assert covered >= 0.8


def test_uniform_image_degenerate():
    img = Image(np.full((32, 32, 3), 120, np.uint8), "u")
    with pytest.warns(DegenerateThresholdWarning):
        m = otsu_segment(img, OtsuConfig("grayscale"))
    assert m.count() in (0, 32 * 32)


def test_invert_flips_bits(rng):
    img = Image(rng.integers(0, 256, (40, 40, 3), dtype=np.uint8), "r")
    a = otsu_segment(img, OtsuConfig("red_minus_green", invert=False))
    b = otsu_segment(img, OtsuConfig("red_minus_green", invert=True))
    assert np.array_equal(a.bits, 1 - b.bits)


def test_projection_ranges():
    px = np.array([[[255, 0, 0], [0, 255, 0], [255, 255, 255]]], np.uint8)
    img = Image(px, "p")
    assert project(img, "red_minus_green").tolist() == [[255, 0, 127]]
    assert project(img, "grayscale").tolist() == [[76, 150, 255]]


def test_presets_are_distinct():
    assert PRESETS["gray"].channel == "grayscale" and PRESETS["gray"].morphology == "open"
    assert PRESETS["rg"].channel == "red_minus_green" and PRESETS["rg"].morphology == "close"
    img, truth, _ = generate(SynthConfig(image_size=(256, 256), seed=2))
    for p in PRESETS.values():
        assert 0.0 <= jaccard(otsu_segment(img, p), truth) <= 1.0
