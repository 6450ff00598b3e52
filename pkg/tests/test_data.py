import numpy as np
import pytest

from clinmtl import data as D


class TestPointRule:
    def test_points_to_label_mapping(self):
        # 0 -> level 1; 1-2 -> 2; 3 -> 3; 4-5 -> 4; >= 6 -> 5 (0-based here)
        assert D.points_to_label(0) == 0
        assert D.points_to_label(1) == 1
        assert D.points_to_label(2) == 1
        assert D.points_to_label(3) == 2
        assert D.points_to_label(4) == 3
        assert D.points_to_label(5) == 3
        assert D.points_to_label(6) == 4
        assert D.points_to_label(7) == 4

    def test_all_risk_flags_give_top_label(self):
        pts = D._risk_points(taller=True, echo_offset=-0.3, margin_amp=0.2,
                             margin_blur=0.3, texture_sigma=0.15)
        assert pts == 7
        assert D.points_to_label(pts) == 4

    def test_no_risk_flags_give_bottom_label(self):
        pts = D._risk_points(taller=False, echo_offset=0.1, margin_amp=0.02,
                             margin_blur=1.5, texture_sigma=0.02)
        assert pts == 0
        assert D.points_to_label(pts) == 0


@pytest.fixture(scope="module")
def samples():
    return D.gen_synthetic(200, 32, seed=7)


class TestSyntheticGenerator:

    def test_determinism(self, samples):
        again = D.gen_synthetic(200, 32, seed=7)
        for a, b in zip(samples, again):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)
            assert a.label == b.label

    def test_prefix_stability(self, samples):
        # sample i depends only on (seed, i), so shorter runs are prefixes
        first = D.gen_synthetic(20, 32, seed=7)
        for a, b in zip(first, samples[:20]):
            assert np.array_equal(a.image, b.image)
            assert a.label == b.label

    def test_value_ranges(self, samples):
        for s in samples[:20]:
            assert s.image.shape == (32, 32)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.mask.dtype == bool
            assert 0 <= s.label <= 4

    def test_images_on_8bit_grid(self, samples):
        for s in samples[:10]:
            assert np.array_equal(s.image, np.round(s.image * 255) / 255)

    def test_every_class_present(self, samples):
        counts = D.class_counts(samples)
        assert counts.sum() == 200
        assert np.all(counts > 0)

    def test_masks_are_nonempty_blobs(self, samples):
        for s in samples[:50]:
            assert s.mask.sum() >= 8

    def test_input_validation(self):
        with pytest.raises(D.DataError):
            D.gen_synthetic(100, 30, seed=0)  # size not divisible by 16
        with pytest.raises(D.DataError):
            D.gen_synthetic(5, 32, seed=0)  # too few samples

    def test_seed_changes_data(self):
        a = D.gen_synthetic(10, 32, seed=1)
        b = D.gen_synthetic(10, 32, seed=2)
        assert not np.array_equal(a[0].image, b[0].image)


class TestClassWeights:
    def test_published_counts(self):
        # inverse-frequency weights for counts (70, 942, 3050, 2949, 2530)
        w = D.class_weights((70, 942, 3050, 2949, 2530))
        expect = (27.26, 2.026, 0.6257, 0.6471, 0.7543)
        assert np.allclose(w, expect, atol=1e-3)

    def test_uniform_counts_give_unit_weights(self):
        assert np.allclose(D.class_weights((10, 10, 10, 10, 10)), 1.0)

    def test_weighted_mean_is_one(self):
        rng = np.random.default_rng(0)
        counts = rng.integers(1, 100, size=5)
        w = D.class_weights(counts)
        assert (w * counts).sum() / counts.sum() == pytest.approx(1.0)

    def test_zero_count_rejected(self):
        with pytest.raises(D.DataError):
            D.class_weights((0, 1, 2, 3, 4))


class TestKfold:
    def test_partition_sizes_balanced(self):
        ids = [f"c{i}" for i in range(103)]
        folds = D.kfold_split(ids, 5, seed=0)
        sizes = np.bincount(list(folds.values()), minlength=5)
        assert sizes.sum() == 103
        assert sizes.max() - sizes.min() <= 1

    def test_deterministic_and_seed_sensitive(self):
        ids = [f"c{i}" for i in range(40)]
        assert D.kfold_split(ids, 4, seed=3) == D.kfold_split(ids, 4, seed=3)
        assert D.kfold_split(ids, 4, seed=3) != D.kfold_split(ids, 4, seed=4)

    def test_case_level_grouping(self):
        # repeated case ids land in a single fold
        ids = ["a", "a", "b", "b", "c", "d", "e"]
        folds = D.kfold_split(ids, 2, seed=0)
        assert set(folds) == {"a", "b", "c", "d", "e"}

    def test_validation(self):
        with pytest.raises(D.DataError):
            D.kfold_split(["a", "b"], 3, seed=0)
        with pytest.raises(D.DataError):
            D.kfold_split(["a", "b", "c"], 1, seed=0)


class TestPgmRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        arr = rng.integers(0, 256, size=(24, 17), dtype=np.uint8)
        path = str(tmp_path / "x.pgm")
        D.write_pgm(path, arr)
        assert np.array_equal(D.read_pgm(path), arr)

    def test_comment_lines_skipped(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        arr = D.read_pgm(str(path))
        assert arr.shape == (2, 3)
        assert arr.flatten().tolist() == list(payload)

    def test_rejects_ascii_pgm(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
        with pytest.raises(D.DataError):
            D.read_pgm(str(path))

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\nab")
        with pytest.raises(D.DataError):
            D.read_pgm(str(path))

    def test_rejects_wrong_maxval(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(D.DataError):
            D.read_pgm(str(path))


class TestDatasetRoundTrip:
    def test_save_load_preserves_everything(self, tmp_path):
        samples = D.gen_synthetic(12, 32, seed=3)
        D.save_dataset(samples, str(tmp_path))
        loaded = D.load_dataset(str(tmp_path))
        assert len(loaded) == 12
        for a, b in zip(samples, loaded):
            assert a.case_id == b.case_id
            assert a.label == b.label
            assert np.array_equal(a.mask, b.mask)
            # images are already on the 8-bit grid, so round-trip is exact
            assert np.array_equal(a.image, b.image)

    def test_missing_labels_file(self, tmp_path):
        with pytest.raises(D.DataError) as exc:
            D.load_dataset(str(tmp_path))
        assert "labels" in str(exc.value)

    def test_bad_header(self, tmp_path):
        (tmp_path / "labels.csv").write_text("file,grade\n")
        with pytest.raises(D.DataError) as exc:
            D.load_dataset(str(tmp_path))
        assert "header" in str(exc.value)

    def test_label_out_of_range_names_line(self, tmp_path):
        samples = D.gen_synthetic(10, 32, seed=1)
        D.save_dataset(samples, str(tmp_path))
        labels = (tmp_path / "labels.csv").read_text().splitlines()
        labels[3] = labels[3].rsplit(",", 1)[0] + ",9"
        (tmp_path / "labels.csv").write_text("\n".join(labels) + "\n")
        with pytest.raises(D.DataError) as exc:
            D.load_dataset(str(tmp_path))
        assert "line 4" in str(exc.value)

    def test_missing_mask_named(self, tmp_path):
        samples = D.gen_synthetic(10, 32, seed=1)
        D.save_dataset(samples, str(tmp_path))
        victim = samples[2].filename
        (tmp_path / "masks" / victim).unlink()
        with pytest.raises(D.DataError) as exc:
            D.load_dataset(str(tmp_path))
        assert victim in str(exc.value)

    def test_shape_mismatch_named(self, tmp_path):
        samples = D.gen_synthetic(10, 32, seed=1)
        D.save_dataset(samples, str(tmp_path))
        victim = samples[0].filename
        D.write_pgm(str(tmp_path / "masks" / victim), np.zeros((16, 16), np.uint8))
        with pytest.raises(D.DataError) as exc:
            D.load_dataset(str(tmp_path))
        assert "shape" in str(exc.value)
