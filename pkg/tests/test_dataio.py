import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from dragsaw.dataio import (
    DatasetManifest,
    SyntheticConfig,
    generate_synthetic,
    load_samples,
    quantize_unit,
    read_manifest,
    read_pgm,
    render_sample,
    select_fraction,
    write_manifest,
    write_pgm,
)
from dragsaw.errors import ConfigError


class TestPgm:
    def test_hand_quantization(self, tmp_path):
        img = np.array([[0.0, 1.0], [0.5, 0.25]])
        write_pgm(tmp_path / "a.pgm", quantize_unit(img))
        blob = (tmp_path / "a.pgm").read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert blob[-4:] == bytes([0, 255, 128, 64])

    def test_roundtrip_lossless(self, tmp_path, rng):
        data = rng.integers(0, 256, size=(17, 9)).astype(np.uint8)
        write_pgm(tmp_path / "b.pgm", data)
        assert_array_equal(read_pgm(tmp_path / "b.pgm"), data)

    def test_truncated_payload(self, tmp_path, rng):
        data = rng.integers(0, 256, size=(4, 4)).astype(np.uint8)
        path = tmp_path / "c.pgm"
        write_pgm(path, data)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError, match="byte"):
            read_pgm(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0000")
        with pytest.raises(ValueError, match="magic"):
            read_pgm(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "e.pgm"
        path.write_bytes(b"P5\n1 1\n255\nXY")
        with pytest.raises(ValueError, match="trailing"):
            read_pgm(path)

    def test_wrong_maxval(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n1 1\n65535\nZZ")
        with pytest.raises(ValueError, match="maxval"):
            read_pgm(path)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        data = rng.integers(0, 256, size=(int(rng.integers(1, 12)), int(rng.integers(1, 12)))).astype(np.uint8)
        path = tmp_path_factory.mktemp("pgm") / "x.pgm"
        write_pgm(path, data)
        assert_array_equal(read_pgm(path), data)


class TestSyntheticConfig:
    def test_size_must_divide_32(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(count=1, size=63)

    def test_empty_range_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(count=1, blob_count=(3, 1))


class TestGeneration:
    def test_deterministic_per_index(self):
        cfg = SyntheticConfig(count=2, size=32, seed=9)
        a_img, a_msk = render_sample(cfg, 1)
        b_img, b_msk = render_sample(cfg, 1)
        assert_array_equal(a_img, b_img)
        assert_array_equal(a_msk, b_msk)

    def test_count_zero_empty_manifest(self, tmp_path):
        manifest = generate_synthetic(SyntheticConfig(count=0, size=32), tmp_path / "d")
        assert len(manifest) == 0
        assert (tmp_path / "d" / "manifest.tsv").read_text() == ""

    def test_byte_identical_files(self, tmp_path):
        cfg = SyntheticConfig(count=3, size=32, seed=4)
        m1 = generate_synthetic(cfg, tmp_path / "a")
        m2 = generate_synthetic(cfg, tmp_path / "b")
        for e1, e2 in zip(m1.entries, m2.entries):
            assert e1.image_sha == e2.image_sha
            assert e1.mask_sha == e2.mask_sha

    def test_every_mask_has_foreground(self):
        cfg = SyntheticConfig(count=25, size=32, seed=3)
        for i in range(cfg.count):
            _, mask = render_sample(cfg, i)
            assert mask.any()
            assert mask.max() < cfg.num_classes

    def test_zero_blur_zero_noise_piecewise_constant(self):
        cfg = SyntheticConfig(
            count=1, size=32, seed=5, blur_sigma=(0.0, 0.0), noise_sigma=0.0, texture=False, blob_count=(1, 1)
        )
        img, mask = render_sample(cfg, 0)
        assert np.allclose(img[mask == 0], 0.3)
        inside = img[mask == 1]
        assert inside.min() == inside.max() and inside.min() > 0.3
        # intensity discontinuities exactly at mask boundaries
        dx_img = np.abs(np.diff(img, axis=1)) > 1e-12
        dx_msk = np.diff(mask.astype(int), axis=1) != 0
        assert_array_equal(dx_img, dx_msk)

    def test_multiclass_masks(self):
        cfg = SyntheticConfig(count=8, size=32, num_classes=4, seed=12, blob_count=(3, 3))
        seen = set()
        for i in range(cfg.count):
            _, mask = render_sample(cfg, i)
            seen |= set(np.unique(mask).tolist())
        assert seen >= {0, 1, 2, 3}


class TestManifest:
    def test_roundtrip(self, tmp_path):
        cfg = SyntheticConfig(count=3, size=32, seed=8)
        manifest = generate_synthetic(cfg, tmp_path / "ds")
        again = read_manifest(tmp_path / "ds" / "manifest.tsv", split="train")
        assert again.entries == manifest.entries

    def test_checksum_mismatch_detected(self, tmp_path):
        manifest = generate_synthetic(SyntheticConfig(count=1, size=32, seed=8), tmp_path / "ds")
        path = tmp_path / "ds" / manifest.entries[0].image_path
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(RuntimeError, match="checksum"):
            load_samples(manifest)

    def test_load_shapes_and_ranges(self, tmp_path):
        manifest = generate_synthetic(SyntheticConfig(count=2, size=32, seed=8), tmp_path / "ds")
        images, masks = load_samples(manifest)
        assert images.shape == (2, 1, 32, 32)
        assert masks.shape == (2, 32, 32)
        assert 0.0 <= images.min() and images.max() <= 1.0

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = DatasetManifest(split="t", root=tmp_path, entries=())
        with pytest.raises(ConfigError):
            load_samples(manifest)


class TestSelectFraction:
    def _manifest(self, n):
        from dragsaw.dataio import ManifestEntry

        entries = tuple(ManifestEntry(f"i{i}.pgm", f"m{i}.pgm", "x", "y") for i in range(n))
        return DatasetManifest(split="train", root=None, entries=entries)

    def test_full_fraction_is_shuffle(self):
        m = self._manifest(10)
        sel = select_fraction(m, 1.0, seed=1)
        assert len(sel) == 10
        assert set(sel.entries) == set(m.entries)
        assert sel.entries != m.entries  # shuffled order

    def test_prefix_nesting(self):
        m = self._manifest(400)
        quarter = select_fraction(m, 0.25, seed=7)
        half = select_fraction(m, 0.5, seed=7)
        assert len(quarter) == 100
        assert half.entries[:100] == quarter.entries

    def test_seeds_differ(self):
        m = self._manifest(40)
        assert select_fraction(m, 1.0, seed=1).entries != select_fraction(m, 1.0, seed=2).entries

    def test_bad_fraction(self):
        m = self._manifest(4)
        for frac in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                select_fraction(m, frac, seed=0)
