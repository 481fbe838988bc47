"""Synthetic dataset generation: determinism, warp consistency, IO."""

import numpy as np
import pytest

from stn_align import imageio
from stn_align import synthdata as sd
from stn_align import transforms as tf


def small_dataset(seed=0, kind="similarity", **kw):
    defaults = dict(n_identities=6, obs_per_identity=5, image_size=24, n_pairs=40)
    defaults.update(kw)
    return sd.generate_dataset(seed, perturbation_kind=kind, **defaults)


class TestGeneration:
    def test_same_seed_bitwise_identical(self):
        a = small_dataset(7)
        b = small_dataset(7)
        assert len(a.train) == len(b.train)
        for oa, ob in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(oa.image, ob.image)
            assert oa.truth_transform == ob.truth_transform
            assert oa.label == ob.label
        assert a.pairs == b.pairs

    def test_different_seeds_differ(self):
        a = small_dataset(1)
        b = small_dataset(2)
        assert any(not np.array_equal(oa.image, ob.image)
                   for oa, ob in zip(a.train, b.train))

    def test_zero_ranges_reproduce_canonical(self):
        split = small_dataset(3, ranges=sd.PerturbationRanges.zero(), noise_sigma=0.0)
        glyphs = {i.ident: i.canonical for i in split.identities}
        for obs in split.train + split.test:
            assert np.abs(obs.image - glyphs[obs.label]).max() < 1e-12

    def test_truth_transform_explains_clean_image(self):
        split = small_dataset(4)
        glyphs = {i.ident: i.canonical for i in split.identities}
        for obs in (split.train + split.test)[:10]:
            redone = sd.warp_canonical(glyphs[obs.label], obs.truth_transform)
            assert np.abs(redone - obs.clean).max() < 1e-12

    def test_pixel_range(self):
        split = small_dataset(5)
        for obs in split.train[:5]:
            assert obs.image.min() >= 0.0 and obs.image.max() <= 1.0

    def test_canonical_deterministic_per_identity(self):
        a = sd.make_canonical_glyph(11, 3, 24)
        b = sd.make_canonical_glyph(11, 3, 24)
        c = sd.make_canonical_glyph(11, 4, 24)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_projective_draws_avoid_degeneracy(self):
        rng = np.random.default_rng(0)
        ranges = sd.PerturbationRanges(perspective=0.2)
        for _ in range(50):
            params = sd.sample_perturbation("projective", ranges, rng)
            tf.generate_grid(params, 8, 8)  # must not raise

    def test_range_validation(self):
        with pytest.raises(ValueError):
            sd.PerturbationRanges(scale_lo=0.0)
        with pytest.raises(ValueError):
            sd.PerturbationRanges(alpha=-0.1)


class TestSplitStructure:
    def test_no_identity_leakage(self):
        split = small_dataset(6)
        train_ids = {o.label for o in split.train}
        test_ids = {o.label for o in split.test}
        assert not (train_ids & test_ids)

    def test_pairs_balanced_and_in_test_range(self):
        split = small_dataset(7)
        same = sum(1 for _, _, s in split.pairs if s)
        assert same == len(split.pairs) // 2
        for a, b, s in split.pairs:
            assert 0 <= a < len(split.test) and 0 <= b < len(split.test)
            assert (split.test[a].label == split.test[b].label) == s

    def test_same_pairs_use_distinct_observations(self):
        split = small_dataset(8)
        assert all(a != b for a, b, s in split.pairs if s)


class TestFlip:
    def test_double_flip_restores(self):
        split = small_dataset(9)
        once = sd.augment_flip(split)
        flipped = once.train[len(split.train):]
        for orig, flip in zip(split.train, flipped):
            np.testing.assert_array_equal(flip.image[:, ::-1], orig.image)
            assert flip.label == orig.label

    def test_size_doubles_exactly(self):
        split = small_dataset(10)
        augmented = sd.augment_flip(split)
        assert len(augmented.train) == 2 * len(split.train)
        assert len(augmented.test) == len(split.test)

    def test_symmetric_image_flip_equal(self):
        img = np.zeros((4, 4))
        img[:, 1:3] = 1.0
        np.testing.assert_array_equal(img[:, ::-1], img)

    def test_flipped_truth_transform_explains_flipped_clean(self):
        split = small_dataset(11)
        augmented = sd.augment_flip(split)
        glyphs = {i.ident: i.canonical for i in split.identities}
        flipped = augmented.train[len(split.train):]
        for obs in flipped[:6]:
            redone = sd.warp_canonical(glyphs[obs.label], obs.truth_transform)
            assert np.abs(redone - obs.clean).max() < 1e-9


class TestDiskRoundtrip:
    def test_raw_format_roundtrips_exactly(self, tmp_path):
        split = small_dataset(12)
        sd.save_dataset(split, tmp_path, image_format="raw")
        loaded = sd.load_dataset(tmp_path)
        assert len(loaded.train) == len(split.train)
        for a, b in zip(split.train, loaded.train):
            np.testing.assert_array_equal(a.image, b.image)
            assert a.label == b.label
            assert a.truth_transform == b.truth_transform
        assert loaded.pairs == split.pairs

    def test_pgm_format_quantizes_to_8bit(self, tmp_path):
        split = small_dataset(13)
        sd.save_dataset(split, tmp_path, image_format="pgm")
        loaded = sd.load_dataset(tmp_path)
        for a, b in zip(split.train, loaded.train):
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12

    def test_manifest_lines_have_four_fields(self, tmp_path):
        split = small_dataset(14)
        sd.save_dataset(split, tmp_path)
        with open(tmp_path / "manifest.txt") as fh:
            rows = [l for l in fh if l.strip() and not l.startswith("#")]
        assert len(rows) == len(split.train) + len(split.test)
        for row in rows:
            obs_id, label, record, path = row.split(" ", 3)
            int(label)
            assert record.startswith("kind=")
            assert path.strip().startswith("images/")


class TestImageIO:
    def test_pgm_roundtrip(self, tmp_path):
        img = np.linspace(0, 1, 35).reshape(5, 7)
        path = tmp_path / "img.pgm"
        imageio.write_pgm(path, img)
        back = imageio.read_pgm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_pgm_bytes_are_quantized_exact(self, tmp_path):
        img = np.round(np.linspace(0, 1, 16) * 255) / 255.0
        path = tmp_path / "q.pgm"
        imageio.write_pgm(path, img.reshape(4, 4))
        np.testing.assert_array_equal(imageio.read_pgm(path), img.reshape(4, 4))

    def test_pgm_header(self, tmp_path):
        path = tmp_path / "h.pgm"
        imageio.write_pgm(path, np.zeros((3, 4)))
        header = path.read_bytes()[:20]
        assert header.startswith(b"P5\n4 3\n255\n")

    def test_pgm_with_comment_parses(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        img = imageio.read_pgm(path)
        assert img.shape == (2, 3)

    def test_tensor_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for dtype in (np.float64, np.float32):
            arr = rng.random((3, 4, 5)).astype(dtype)
            path = tmp_path / f"{np.dtype(dtype).name}.ten"
            imageio.write_tensor(path, arr)
            back = imageio.read_tensor(path)
            assert back.dtype == arr.dtype
            np.testing.assert_array_equal(back, arr)

    def test_non_pgm_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(ValueError):
            imageio.read_pgm(path)
