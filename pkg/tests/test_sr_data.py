"""Synthetic data, bicubic degradation and patch sampling"""

import numpy as np
import pytest

from errors import ConfigError, ShapeError
from sr_data import (
    DatasetSpec, ImagePair, bicubic_downsample, cubic_kernel, dihedral, downsample_matrix,
    dataset_from_folders, generate_dataset, load_image, load_png_folder, sample_patch_batch,
)


class TestBicubic:
    def test_kernel_values(self):
        np.testing.assert_allclose(cubic_kernel(np.array([0.0, 0.5, 1.0, 1.5, 2.0])),
                                   [1.0, 0.5625, 0.0, -0.0625, 0.0])

    def test_interior_taps_at_scale_two(self):
        row = downsample_matrix(16, 2)[3]
        np.testing.assert_allclose(row[5:9], [-0.0625, 0.5625, 0.5625, -0.0625])
        assert np.count_nonzero(row) == 4

    def test_rows_sum_to_one(self):
        for scale in (2, 3, 4):
            np.testing.assert_allclose(downsample_matrix(24, scale).sum(axis=1), 1.0)

    def test_linear_ramp_is_reproduced_in_the_interior(self):
        ramp = np.tile(np.arange(16, dtype=np.float64), (3, 16, 1))
        lr = bicubic_downsample(ramp, 2)
        assert lr.shape == (3, 8, 8)
        np.testing.assert_allclose(lr[:, :, 1:-1], np.tile(np.arange(1, 7) * 2 + 0.5, (3, 8, 1)), atol=1e-5)

    def test_constant_image_is_unchanged(self):
        flat = np.full((3, 12, 12), 0.3, dtype=np.float32)
        np.testing.assert_allclose(bicubic_downsample(flat, 4), 0.3, atol=1e-6)

    def test_scale_one_copies(self):
        image = np.random.default_rng(0).random((3, 5, 5)).astype(np.float32)
        out = bicubic_downsample(image, 1)
        np.testing.assert_array_equal(out, image)
        assert out is not image

    def test_indivisible_size(self):
        with pytest.raises(ShapeError):
            bicubic_downsample(np.zeros((3, 9, 8)), 2)


class TestSyntheticDataset:
    def test_shapes_and_split(self, tiny_dataset):
        train, val = tiny_dataset
        assert len(train) == 4 and len(val) == 2
        for pair in train + val:
            assert pair.hr.shape == (3, 24, 24)
            assert pair.lr.shape == (3, 12, 12)
            assert pair.hr.dtype == np.float32
            assert 0.0 <= pair.hr.min() and pair.hr.max() <= 1.0
        assert {p.id for p in train}.isdisjoint({p.id for p in val})

    def test_deterministic(self):
        spec = DatasetSpec(seed=3, count_train=2, count_val=1, image_size=16, scale=2)
        a, b = generate_dataset(spec), generate_dataset(spec)
        for pa, pb in zip(a.train + a.val, b.train + b.val):
            np.testing.assert_array_equal(pa.hr, pb.hr)

    def test_seed_changes_images(self):
        a = generate_dataset(DatasetSpec(seed=0, count_train=1, count_val=0, image_size=16))
        b = generate_dataset(DatasetSpec(seed=1, count_train=1, count_val=0, image_size=16))
        assert not np.array_equal(a.train[0].hr, b.train[0].hr)

    def test_mean_rgb_is_train_mean(self, tiny_dataset):
        expected = np.mean([p.hr.mean(axis=(1, 2)) for p in tiny_dataset.train], axis=0)
        np.testing.assert_allclose(tiny_dataset.mean_rgb, expected, rtol=1e-6)

    def test_manifest(self, tiny_dataset, tmp_path):
        manifest = tiny_dataset.manifest()
        assert manifest["source"] == "synthetic"
        assert manifest["count_train"] == 4
        assert len(manifest["mean_rgb"]) == 3
        tiny_dataset.save_manifest(tmp_path / "data.json")
        assert (tmp_path / "data.json").exists()

    @pytest.mark.parametrize("kwargs", [
        {"image_size": 25, "scale": 2},
        {"count_train": 0},
        {"textures": ("plaid",)},
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ConfigError):
            DatasetSpec(**kwargs)


class TestPatches:
    @pytest.fixture
    def blocky_pair(self, rng):
        """HR is LR repeated 2x2, so any co-located crop satisfies hr[::2, ::2] == lr"""
        lr = rng.random((3, 10, 10)).astype(np.float32)
        hr = np.kron(lr, np.ones((1, 2, 2), dtype=np.float32))
        return ImagePair("blocky", hr, lr)

    def test_dihedral_group(self):
        x = np.arange(12).reshape(3, 4)
        square = np.arange(16).reshape(4, 4)
        images = {dihedral(square, k).tobytes() for k in range(8)}
        assert len(images) == 8
        assert dihedral(x, 4).shape == (4, 3)
        np.testing.assert_array_equal(dihedral(dihedral(x, 1), 1), x)

    @pytest.mark.parametrize("augment", [False, True])
    def test_patches_are_co_located(self, blocky_pair, rng, augment):
        lr, hr = sample_patch_batch([blocky_pair], batch=16, lr_patch=4, augment=augment, rng=rng)
        assert lr.shape == (16, 3, 4, 4) and hr.shape == (16, 3, 8, 8)
        np.testing.assert_array_equal(hr[:, :, ::2, ::2], lr)

    def test_mean_is_subtracted_from_both(self, blocky_pair):
        mean = np.array([0.1, 0.2, 0.3], dtype=np.float32)
        plain = sample_patch_batch([blocky_pair], 4, 4, False, np.random.default_rng(5))
        shifted = sample_patch_batch([blocky_pair], 4, 4, False, np.random.default_rng(5), mean_rgb=mean)
        for a, b in zip(plain, shifted):
            np.testing.assert_allclose(a - b, np.broadcast_to(mean.reshape(1, 3, 1, 1), a.shape), atol=1e-6)

    def test_patch_larger_than_image(self, blocky_pair, rng):
        with pytest.raises(ShapeError):
            sample_patch_batch([blocky_pair], 1, 11, False, rng)


class TestLoadImage:
    def test_npy(self, tmp_path):
        image = np.random.default_rng(0).random((3, 6, 8)).astype(np.float32)
        np.save(tmp_path / "img.npy", image)
        np.testing.assert_array_equal(load_image(tmp_path / "img.npy"), image)

    def test_npy_must_be_channel_first(self, tmp_path):
        np.save(tmp_path / "img.npy", np.zeros((6, 8, 3)))
        with pytest.raises(ShapeError):
            load_image(tmp_path / "img.npy")

    def test_png(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        pixels = np.zeros((4, 6, 3), dtype=np.uint8)
        pixels[..., 0] = 255
        Image.fromarray(pixels).save(tmp_path / "red.png")
        image = load_image(tmp_path / "red.png")
        assert image.shape == (3, 4, 6)
        np.testing.assert_allclose(image[0], 1.0)
        np.testing.assert_allclose(image[1:], 0.0)

    def test_png_folders(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        rng = np.random.default_rng(1)
        for split, count in (("train", 2), ("val", 1)):
            (tmp_path / split).mkdir()
            for i in range(count):
                pixels = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
                Image.fromarray(pixels).save(tmp_path / split / f"{i}.png")
        dataset = dataset_from_folders(tmp_path / "train", tmp_path / "val", 2)
        assert [p.id for p in dataset.train] == ["train-0", "train-1"]
        assert dataset.val[0].hr.shape == (3, 8, 10)
        assert dataset.val[0].lr.shape == (3, 4, 5)
        assert dataset.mean_rgb.shape == (3,)

    def test_empty_folder(self, tmp_path):
        with pytest.raises(ConfigError):
            load_png_folder(tmp_path, 2)
