import numpy as np
import pytest

from oracles import flood_fill_labels
from tbdetect.imagecore import BACILLI, NON_BACILLI, BinaryMask, DimensionError, Image
from tbdetect.roiext import (InsufficientRegionsWarning, connected_components, dump_rois, extract_rois,
                             harvest_labeled_regions, label)


def _img(h, w, seed=0):
    return Image(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8), "im")


def test_empty():
    assert connected_components(np.zeros((10, 10))) == []
    assert extract_rois(_img(10, 10), BinaryMask(np.zeros((10, 10)), "im")) == []


def test_two_blocks():
    m = np.zeros((10, 12), np.uint8)
    m[2:5, 1:4] = 1
    m[4:7, 6:9] = 1
    comps = connected_components(m)
    assert [c.bbox for c in comps] == [(1, 2, 3, 3), (6, 4, 3, 3)]
    assert [c.area for c in comps] == [9, 9]


def test_diagonal_connectivity():
    m = np.zeros((3, 3), np.uint8)
    m[0, 0] = m[1, 1] = 1
    assert len(connected_components(m, 8)) == 1
    assert len(connected_components(m, 4)) == 2
    with pytest.raises(ValueError):
        connected_components(m, 6)


@pytest.mark.parametrize("connectivity", [4, 8])
def test_labels_match_flood_fill(rng, connectivity):
    for _ in range(30):
        h, w = rng.integers(1, 40, 2)
        bits = (rng.random((h, w)) < rng.uniform(0.2, 0.7)).astype(np.uint8)
        ours, n = label(bits, connectivity)
        ref, n_ref = flood_fill_labels(bits, connectivity)
        assert n == n_ref
        assert np.array_equal(ours, ref)


def test_partition(rng):
    bits = (rng.random((50, 50)) < 0.4).astype(np.uint8)
    comps = connected_components(bits)
    seen = np.zeros_like(bits)
    for c in comps:
        assert not seen[c.pixels[:, 0], c.pixels[:, 1]].any()
        seen[c.pixels[:, 0], c.pixels[:, 1]] = 1
    assert np.array_equal(seen, bits)


def test_rod_roi_margin():
    m = np.zeros((40, 40), np.uint8)
    m[10:13, 15:25] = 1  # 10 wide, 3 tall at x=15, y=10
    img = _img(40, 40)
    (roi,) = extract_rois(img, BinaryMask(m, "im"), min_area=20, margin=4)
    assert roi.bbox == (11, 6, 18, 11)
    assert roi.area_px == 30
    assert np.array_equal(roi.pixels, img.pixels[6:17, 11:29])


def test_roi_clamped_at_border():
    m = np.zeros((40, 40), np.uint8)
    m[0:3, 0:10] = 1
    (roi,) = extract_rois(_img(40, 40), BinaryMask(m, "im"))
    assert roi.bbox == (0, 0, 14, 7)


def test_area_filter():
    m = np.zeros((40, 40), np.uint8)
    m[5:7, 5:8] = 1  # area 6
    m[20:30, 20:25] = 1
    rois = extract_rois(_img(40, 40), BinaryMask(m, "im"), min_area=20)
    assert [r.area_px for r in rois] == [50]
    assert extract_rois(_img(40, 40), BinaryMask(m, "im"), min_area=1, max_area=10)[0].area_px == 6


def test_roi_bbox_hits_component(rng):
    bits = (rng.random((64, 64)) < 0.3).astype(np.uint8)
    img = _img(64, 64)
    comps = {c.id: c for c in connected_components(bits)}
    for roi in extract_rois(img, BinaryMask(bits, "im"), min_area=1):
        x, y, w, h = roi.bbox
        pix = comps[roi.component_id].pixels
        assert ((pix[:, 0] >= y) & (pix[:, 0] < y + h) & (pix[:, 1] >= x) & (pix[:, 1] < x + w)).any()


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        extract_rois(_img(10, 10), BinaryMask(np.zeros((10, 11))))


def _five_rods():
    m = np.zeros((120, 120), np.uint8)
    for k in range(5):
        m[10 + 20 * k: 14 + 20 * k, 10:30] = 1
    return BinaryMask(m, "im")


def test_harvest_positive_sampling_deterministic():
    img, truth = _img(120, 120), _five_rods()
    a = harvest_labeled_regions(img, truth, 3, 0, seed=7)
    b = harvest_labeled_regions(img, truth, 3, 0, seed=7)
    assert len(a) == 3 and all(r.label == BACILLI for r in a)
    assert [r.roi.bbox for r in a] == [r.roi.bbox for r in b]


def test_harvest_negatives_do_not_touch_truth():
    img, truth = _img(120, 120), _five_rods()
    regs = harvest_labeled_regions(img, truth, 0, 10, seed=1)
    assert len(regs) == 10 and all(r.label == NON_BACILLI for r in regs)
    pos_sizes = {r.roi.bbox[2:] for r in harvest_labeled_regions(img, truth, 5, 0)}
    for r in regs:
        x, y, w, h = r.roi.bbox
        assert truth.bits[y:y + h, x:x + w].sum() == 0
        assert (w, h) in pos_sizes


def test_harvest_empty_and_short_supply():
    img, truth = _img(120, 120), _five_rods()
    assert harvest_labeled_regions(img, truth, 0, 0) == []
    with pytest.warns(InsufficientRegionsWarning):
        regs = harvest_labeled_regions(img, truth, 8, 0)
    assert len(regs) == 5


def test_dump(tmp_path):
    rois = extract_rois(_img(120, 120), _five_rods())
    paths = dump_rois(rois, tmp_path)
    assert paths[0].name == "im_c1.png"
    assert (tmp_path / "im_c1.json").read_text().startswith('{"area": 80')
