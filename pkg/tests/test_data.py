import math
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segforge.data import (AugmentPolicy, VolumeBundle, augment, bundle_bytes, compute_fingerprint, crop_foreground,
                           draw_centers, extract_patch, load_bundle, normalize_intensity, preprocess, resample,
                           resampled_shape, restore_labels, rotate90, sample_patches, save_bundle, select_slices,
                           split_dataset, zoom)
from segforge.errors import DataError, DegenerateInputError, FormatError, UsageError, VersionError

from conftest import make_bundle


def sphere_bundle(shape=(21, 21, 21), center=(10, 10, 10), radius=4.0):
    grid = np.indices(shape)
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
    inside = dist <= radius
    image = np.where(inside, 1.0, 0.0)[None].astype(np.float32)
    return VolumeBundle(image, inside.astype(np.uint16), (1.0, 1.0, 1.0), {0: "background", 1: "ball"})


class TestBundleIO:
    def test_round_trip(self, tmp_path, bundle):
        bundle.spacing = (1.5, 0.8, 0.8)
        save_bundle(bundle, tmp_path / "a.bundle")
        back = load_bundle(tmp_path / "a.bundle")
        np.testing.assert_array_equal(back.image, bundle.image)
        np.testing.assert_array_equal(back.labels, bundle.labels)
        assert back.spacing == (1.5, 0.8, 0.8)
        assert back.label_names == bundle.label_names

    def test_bytes_are_deterministic(self, bundle):
        assert bundle_bytes(bundle) == bundle_bytes(bundle.copy())

    def test_truncated(self, tmp_path, bundle):
        raw = bundle_bytes(bundle)
        (tmp_path / "t.bundle").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError, match="t.bundle"):
            load_bundle(tmp_path / "t.bundle")

    def test_tampered_payload(self, tmp_path, bundle):
        path = tmp_path / "x.bundle"
        save_bundle(bundle, path)
        with zipfile.ZipFile(path) as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
        img = bytearray(members["image.raw"])
        img[0] ^= 0xFF
        members["image.raw"] = bytes(img)
        with zipfile.ZipFile(path, "w") as zf:
            for n, b in members.items():
                zf.writestr(n, b)
        with pytest.raises(FormatError, match="checksum"):
            load_bundle(path)

    def test_unknown_version(self, tmp_path, bundle):
        import json

        path = tmp_path / "v.bundle"
        save_bundle(bundle, path)
        with zipfile.ZipFile(path) as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
        man = json.loads(members["manifest.json"])
        man["format_version"] = 99
        members["manifest.json"] = json.dumps(man).encode()
        with zipfile.ZipFile(path, "w") as zf:
            for n, b in members.items():
                zf.writestr(n, b)
        with pytest.raises(VersionError):
            load_bundle(path)

    def test_validate_shape_mismatch(self):
        b = VolumeBundle(np.zeros((1, 4, 4), np.float32), np.zeros((4, 5), np.uint16), (1.0, 1.0), {0: "bg"})
        with pytest.raises(DataError, match="spatial dims"):
            b.validate()


class TestCrop:
    def test_single_voxel(self):
        img = np.zeros((1, 5, 5, 5), np.float32)
        img[0, 2, 2, 2] = 1.0
        cropped, bbox = crop_foreground(VolumeBundle(img, np.zeros((5, 5, 5), np.uint16), (1, 1, 1), {0: "bg"}))
        assert cropped.shape == (1, 1, 1)
        assert bbox == [(2, 3)] * 3

    def test_all_positive_is_identity(self, bundle):
        cropped, bbox = crop_foreground(bundle)
        assert cropped.shape == bundle.shape
        np.testing.assert_array_equal(cropped.image, bundle.image)

    @pytest.mark.parametrize("margin", [0, 2, 20])
    def test_sphere_bounds(self, margin):
        b = sphere_bundle(center=(9, 10, 12), radius=4.0)
        _, bbox = crop_foreground(b, margin)
        expected = [(max(c - 4 - margin, 0), min(c + 4 + 1 + margin, 21)) for c in (9, 10, 12)]
        assert bbox == expected

    def test_idempotent(self):
        b = sphere_bundle()
        once, _ = crop_foreground(b)
        twice, bbox = crop_foreground(once)
        assert twice.shape == once.shape and bbox == [(0, s) for s in once.shape]

    def test_empty(self):
        b = VolumeBundle(np.zeros((1, 3, 3), np.float32), np.zeros((3, 3), np.uint16), (1, 1), {0: "bg"})
        with pytest.raises(DegenerateInputError):
            crop_foreground(b)


class TestResample:
    def test_shape_formula(self):
        assert resampled_shape((10, 100, 100), (5, 1, 1), (2.5, 1, 1)) == (20, 100, 100)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 200), min_size=3, max_size=3),
           st.lists(st.floats(0.2, 6.0), min_size=3, max_size=3),
           st.lists(st.floats(0.2, 6.0), min_size=3, max_size=3))
    def test_shape_matches_round_half_up(self, shape, spacing, target):
        expected = tuple(max(1, int(math.floor(n * s / t + 0.5))) for n, s, t in zip(shape, spacing, target))
        assert resampled_shape(shape, spacing, target) == expected

    def test_identity(self, bundle):
        out = resample(bundle, bundle.spacing)
        np.testing.assert_array_equal(out.image, bundle.image)
        np.testing.assert_array_equal(out.labels, bundle.labels)

    def test_labels_stay_in_id_set(self, bundle):
        out = resample(bundle, (0.7, 1.3, 2.0))
        assert set(np.unique(out.labels)) <= set(np.unique(bundle.labels))
        assert out.shape == resampled_shape(bundle.shape, bundle.spacing, (0.7, 1.3, 2.0))
        assert out.spacing == (0.7, 1.3, 2.0)

    def test_linear_ramp_is_preserved(self):
        ramp = np.tile(np.arange(8, dtype=np.float32), (8, 1))
        b = VolumeBundle(ramp[None], np.zeros((8, 8), np.uint16), (1.0, 1.0), {0: "bg"})
        out = resample(b, (1.0, 0.5))
        # voxel-centre aligned linear interpolation of a ramp is again a ramp (away from the border)
        row = out.image[0, 0, 1:-1]
        np.testing.assert_allclose(np.diff(row), 0.5, atol=1e-6)

    def test_bad_target(self, bundle):
        with pytest.raises(UsageError):
            resample(bundle, (1.0, 0.0, 1.0))


class TestNormalize:
    def test_hand_case(self):
        img = np.array([0.0, 2.0, 4.0], np.float32).reshape(1, 3, 1)
        b = VolumeBundle(img, np.zeros((3, 1), np.uint16), (1, 1), {0: "bg"})
        np.testing.assert_allclose(normalize_intensity(b).image.reshape(-1), [0.0, -1.0, 1.0])

    def test_constant_channel_warns(self):
        b = VolumeBundle(np.full((1, 4, 4), 3.0, np.float32), np.zeros((4, 4), np.uint16), (1, 1), {0: "bg"})
        with pytest.warns(UserWarning, match="zero variance"):
            out = normalize_intensity(b)
        np.testing.assert_array_equal(out.image, b.image)

    def test_nonzero_statistics(self, rng):
        img = rng.normal(3.0, 2.0, size=(2, 9, 9, 9)).astype(np.float32)
        img[:, :2] = 0.0
        out = normalize_intensity(VolumeBundle(img, np.zeros((9, 9, 9), np.uint16), (1, 1, 1), {0: "bg"}))
        for ch in out.image:
            nz = ch[ch != 0].astype(np.float64)
            assert abs(nz.mean()) < 1e-5 and abs(nz.std() - 1) < 1e-5
            assert (ch[:2] == 0).all()


class TestFingerprint:
    def test_single(self, bundle):
        fp = compute_fingerprint([bundle])
        assert fp.median_spacing == bundle.spacing and fp.median_shape == bundle.shape

    def test_median_spacing(self):
        bs = [make_bundle((4, 4, 4), sp) for sp in [(1, 1, 1), (1, 1, 3), (1, 1, 5)]]
        assert compute_fingerprint(bs).median_spacing == (1.0, 1.0, 3.0)

    def test_even_count_lower_middle(self):
        bs = [make_bundle((4, 4, 2)), make_bundle((4, 4, 4))]
        assert compute_fingerprint(bs).median_shape == (4, 4, 2)

    def test_against_sort_oracle(self, rng):
        bs = [make_bundle(tuple(rng.integers(3, 9, 3)), tuple(rng.uniform(0.5, 3, 3).round(3)), seed=i)
              for i in range(7)]
        fp = compute_fingerprint(bs)
        for ax in range(3):
            assert fp.median_shape[ax] == sorted(b.shape[ax] for b in bs)[3]
            assert fp.median_spacing[ax] == sorted(b.spacing[ax] for b in bs)[3]

    def test_empty(self):
        with pytest.raises(UsageError):
            compute_fingerprint([])


class TestSplit:
    @pytest.mark.parametrize("n,n_train", [(10, 8), (20, 16), (2, 1), (5, 4)])
    def test_sizes(self, n, n_train):
        tr, va = split_dataset(list(range(n)), 0.8, seed=3)
        assert len(tr) == n_train and len(va) == n - n_train
        assert sorted(tr + va) == list(range(n))

    def test_deterministic(self):
        assert split_dataset(list(range(10)), seed=5) == split_dataset(list(range(10)), seed=5)


class TestSampling:
    def test_positive_fraction(self):
        labels = np.zeros((16, 16, 16), np.uint16)
        labels[4:6, 4:6, 4:6] = 1
        _, flags = draw_centers(labels, 10_000, np.random.default_rng(0))
        assert 0.73 <= flags.mean() <= 0.77

    def test_single_voxel_foreground_is_centered(self):
        labels = np.zeros((9, 9, 9), np.uint16)
        labels[3, 4, 5] = 1
        centers, flags = draw_centers(labels, 200, np.random.default_rng(1))
        assert (centers[flags] == [3, 4, 5]).all()
        img = np.arange(9 ** 3, dtype=np.float32).reshape(1, 9, 9, 9)
        patch = extract_patch(labels, centers[flags][0], (5, 5, 5))
        assert patch[2, 2, 2] == 1
        assert extract_patch(img, (0, 0, 0), (4, 4, 4)).shape == (1, 4, 4, 4)

    def test_deterministic(self, bundle):
        a = sample_patches(bundle, (4, 4, 4), 5, np.random.default_rng(7))
        b = sample_patches(bundle, (4, 4, 4), 5, np.random.default_rng(7))
        for (ia, la), (ib, lb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(la, lb)

    def test_extract_zero_pads(self):
        arr = np.ones((3, 3), np.float32)
        out = extract_patch(arr, (0, 0), (3, 3))
        np.testing.assert_array_equal(out, [[0, 0, 0], [0, 1, 1], [0, 1, 1]])


class TestSlices:
    def _bundle(self, positive, depth=10):
        labels = np.zeros((depth, 4, 4), np.uint16)
        for i in positive:
            labels[i, 1, 1] = 1
        return VolumeBundle(np.ones((1, depth, 4, 4), np.float32), labels, (1, 1, 1), {0: "bg", 1: "x"})

    def test_dilation(self):
        assert select_slices(self._bundle([5]), 1) == [4, 5, 6]

    def test_every_slice(self):
        assert select_slices(self._bundle(range(10)), 1) == list(range(10))

    def test_surround_zero(self):
        assert select_slices(self._bundle([2, 7]), 0) == [2, 7]

    @settings(max_examples=30, deadline=None)
    @given(st.sets(st.integers(0, 14), max_size=6), st.integers(0, 3))
    def test_against_brute_force(self, positive, surround):
        expected = sorted({j for i in positive for j in range(15) if abs(i - j) <= surround})
        if not positive:
            with pytest.warns(UserWarning):
                assert select_slices(self._bundle(positive, 15), surround) == []
        else:
            assert select_slices(self._bundle(positive, 15), surround) == expected


class TestAugment:
    def test_off_is_identity(self, bundle, rng):
        img, lab = augment(bundle.image, bundle.labels, AugmentPolicy.off(), rng)
        np.testing.assert_array_equal(img, bundle.image)
        np.testing.assert_array_equal(lab, bundle.labels)

    def test_four_rotations(self, bundle):
        img, lab = bundle.image, bundle.labels
        for _ in range(4):
            img, lab = rotate90(img, lab, 1)
        np.testing.assert_array_equal(img, bundle.image)
        np.testing.assert_array_equal(lab, bundle.labels)

    def test_zoom_one_no_noise(self, bundle, rng):
        pol = AugmentPolicy(zoom=(1.0, 1.0), gaussian_noise_std=0.0, prob=1.0)
        img, lab = augment(bundle.image, bundle.labels, pol, rng)
        np.testing.assert_array_equal(img, bundle.image)
        np.testing.assert_array_equal(lab, bundle.labels)

    def test_zoom_keeps_shape_and_ids(self, bundle):
        img, lab = zoom(bundle.image, bundle.labels, 1.2)
        assert img.shape == bundle.image.shape and lab.shape == bundle.labels.shape
        assert set(np.unique(lab)) <= set(np.unique(bundle.labels))

    def test_non_square_rotation_keeps_shape(self, rng):
        img = rng.normal(size=(1, 4, 6)).astype(np.float32)
        lab = np.zeros((4, 6), np.uint16)
        pol = AugmentPolicy(rotate90=True, prob=1.0)
        for _ in range(10):
            out, _ = augment(img, lab, pol, rng)
            assert out.shape == img.shape

    def test_finetune_preset(self):
        pol = AugmentPolicy.finetune()
        assert not pol.rotate90 and not pol.flip
        assert pol.zoom is not None and pol.gaussian_noise_std > 0

    def test_bad_zoom(self):
        with pytest.raises(UsageError):
            AugmentPolicy(zoom=(1.1, 1.2))


class TestPreprocess:
    def test_restore_geometry(self):
        b = sphere_bundle()
        b.spacing = (2.0, 1.0, 1.0)
        pre, rec = preprocess(b, (1.0, 1.0, 1.0))
        back = restore_labels(pre.labels, rec)
        assert back.shape == b.shape
        # the label map survives the resample round trip almost exactly
        assert (back != b.labels).mean() < 0.02
