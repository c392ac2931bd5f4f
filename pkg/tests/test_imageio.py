"""Raster file I/O and the synthetic data sources."""

import numpy as np
import pytest

from dpc.data import list_images, load_patch_dataset, random_patches, synthetic_image, toy_corpus, write_toy_images
from dpc.fileutil import atomic_write
from dpc.imageio import ImageFormatError, read_image, to_float, to_uint8, write_image


class TestImageFiles:
    """PNG and PPM reading and writing."""

    @pytest.mark.parametrize("ext", [".ppm", ".png"])
    def test_round_trip(self, tmp_path, rng, ext):
        pixels = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        path = tmp_path / f"img{ext}"
        write_image(path, pixels)
        np.testing.assert_array_equal(read_image(path), pixels)

    def test_ppm_header_with_comment(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
        np.testing.assert_array_equal(read_image(path), np.arange(6, dtype=np.uint8).reshape(1, 2, 3))

    def test_truncated_ppm(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_garbage(self, tmp_path):
        path = tmp_path / "g.png"
        path.write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_float_conversion_round_trip(self, rng):
        pixels = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
        x = to_float(pixels)
        assert x.shape == (3, 4, 6) and x.dtype == np.float32
        np.testing.assert_array_equal(to_uint8(x), pixels)


class TestAtomicWrite:
    """Outputs appear whole or not at all."""

    def test_no_temp_files_left(self, tmp_path):
        atomic_write(tmp_path / "a.bin", b"xyz")
        assert [p.name for p in tmp_path.iterdir()] == ["a.bin"]
        assert (tmp_path / "a.bin").read_bytes() == b"xyz"


class TestData:
    """Synthetic images and patch extraction."""

    def test_synthetic_range(self, rng):
        img = synthetic_image(rng, 40, 24)
        assert img.shape == (3, 40, 24) and img.min() >= 0 and img.max() <= 1

    def test_toy_corpus_deterministic(self):
        a, b = toy_corpus(10, 16, seed=3), toy_corpus(10, 16, seed=3)
        assert a.shape == (10, 3, 16, 16)
        np.testing.assert_array_equal(a, b)

    def test_patches_need_large_enough_images(self):
        with pytest.raises(ValueError):
            random_patches([np.zeros((3, 8, 8))], 2, 16)

    def test_folder_loading(self, tmp_path):
        write_toy_images(tmp_path, 3, size=32)
        (tmp_path / "broken.png").write_bytes(b"xx")
        (tmp_path / "notes.txt").write_text("ignored")
        assert len(list_images(tmp_path)) == 4
        patches = load_patch_dataset(tmp_path, 5, 16, seed=0)
        assert patches.shape == (5, 3, 16, 16)
