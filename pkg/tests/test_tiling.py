import numpy as np
import pytest

from tbdetect.imagecore import BinaryMask, Image
from tbdetect.tiling import (PatchGrid, TilingError, crop_to_multiple, dump_patches, fit_mask, patch_count,
                             prepare_image, prepare_mask, stitch, tile, tile_mask)


def _image(h, w, seed=0):
    return Image(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8), "im")


@pytest.mark.parametrize("w,h,n,rows,cols", [(2816, 2048, 88, 8, 11), (2560, 1792, 70, 7, 10),
                                             (2880, 2048, 88, 8, 11)])
def test_patch_counts_per_image(w, h, n, rows, cols):
    grid = PatchGrid("x", h, w)
    assert (len(grid), grid.rows, grid.cols) == (n, rows, cols)


def test_identity_tiling():
    img = _image(256, 256)
    patches = tile(img)
    assert len(patches) == 1
    assert np.array_equal(patches[0].pixels, img.pixels)


def test_floor_rule_300():
    img = _image(300, 300)
    patches = tile(img)
    assert len(patches) == 1
    assert np.array_equal(patches[0].pixels, img.pixels[:256, :256])


def test_row_major_order_and_provenance():
    img = _image(600, 800, seed=3)
    patches = tile(img, 256)
    assert [p.grid_pos for p in patches] == [(r, c) for r in range(2) for c in range(3)]
    for p in patches:
        y, x = p.grid_pos[0] * 256, p.grid_pos[1] * 256
        assert np.array_equal(p.pixels, img.pixels[y:y + 256, x:x + 256])


def test_pad_policy():
    img = _image(300, 520)
    patches = tile(img, 256, "pad")
    assert len(patches) == 2 * 3 == patch_count(300, 520, 256, "pad")
    last = patches[-1].pixels
    assert np.array_equal(last[:44, :8], img.pixels[256:, 512:])
    assert not last[44:].any() and not last[:, 8:].any()


def test_crop_too_small():
    with pytest.raises(TilingError):
        tile(_image(100, 300))
    with pytest.raises(TilingError):
        tile(_image(300, 300), patch_size=4)


def test_stitch_two_by_one():
    grid = PatchGrid("m", 512, 256)
    ones, zeros = BinaryMask(np.ones((256, 256))), BinaryMask(np.zeros((256, 256)))
    out = stitch([((1, 0), zeros), ((0, 0), ones)], grid)
    assert out.bits[:256].all() and not out.bits[256:].any()


def test_stitch_order_independent(rng):
    bits = (rng.random((512, 768)) > 0.5).astype(np.uint8)
    parts = tile_mask(BinaryMask(bits, "m"))
    grid = PatchGrid("m", 512, 768)
    a = stitch(parts, grid).bits
    shuffled = [parts[i] for i in rng.permutation(len(parts))]
    assert np.array_equal(a, stitch(shuffled, grid).bits)
    assert np.array_equal(a, bits)


def test_stitch_errors():
    grid = PatchGrid("m", 512, 256)
    z = BinaryMask(np.zeros((256, 256)))
    with pytest.raises(TilingError, match="missing"):
        stitch([((0, 0), z)], grid)
    with pytest.raises(TilingError, match="duplicate"):
        stitch([((0, 0), z), ((0, 0), z), ((1, 0), z)], grid)
    with pytest.raises(TilingError, match="expected"):
        stitch([((0, 0), z), ((1, 0), BinaryMask(np.zeros((128, 128))))], grid)


def test_round_trip_crops_to_multiple(rng):
    bits = (rng.random((700, 530)) > 0.7).astype(np.uint8)
    grid = PatchGrid("m", 700, 530)
    out = stitch(tile_mask(BinaryMask(bits, "m")), grid)
    assert np.array_equal(out.bits, crop_to_multiple(bits))
    img = _image(700, 530)
    rebuilt = np.zeros((512, 512, 3), np.uint8)
    for p in tile(img):
        y, x = grid.origin(p.grid_pos)
        rebuilt[y:y + 256, x:x + 256] = p.pixels
    assert np.array_equal(rebuilt, crop_to_multiple(img.pixels))


def test_fit_mask():
    m = BinaryMask(np.ones((512, 512)))
    assert fit_mask(m, (300, 600)).bits.shape == (300, 600)
    assert fit_mask(m, (300, 600)).bits[:, 512:].sum() == 0


def test_prepare_resize_and_crop():
    img = _image(1944, 2592)
    assert prepare_image(img, (2560, 1792)).dims == (1792, 2560)
    assert len(tile(prepare_image(img, (2560, 1792)))) == 70
    cropped = prepare_image(img, (2560, 1792), mode="crop")
    assert np.array_equal(cropped.pixels, img.pixels[76:76 + 1792, 16:16 + 2560])
    m = BinaryMask((np.random.default_rng(0).random((1944, 2592)) > 0.5).astype(np.uint8))
    resized = prepare_mask(m, (2560, 1792))
    assert resized.dims == (1792, 2560) and set(np.unique(resized.bits)) <= {0, 1}


def test_dump_names(tmp_path):
    paths = dump_patches(tile(_image(256, 512)), tmp_path)
    assert [p.name for p in paths] == ["im_r0_c0.png", "im_r0_c1.png"]
