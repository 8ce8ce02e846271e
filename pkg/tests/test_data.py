import numpy as np
import pytest

from cleftnet.data import (CREMI_SPACING, PatchSample, Volume, augment, import_cremi,
                           read_vol1, sample_patch, split_slices, synthesize,
                           write_vol1)
from cleftnet.errors import DataError, FormatError
from cleftnet.labels import tanh_distance_map


class TestVol1:
    @pytest.mark.parametrize("kind,dtype", [("raw", np.uint8), ("mask", np.uint8),
                                            ("field", np.float32)])
    def test_round_trip_bit_exact(self, tmp_path, kind, dtype):
        rng = np.random.default_rng(0)
        if kind == "field":
            data = rng.random((3, 4, 5)).astype(np.float32)
        else:
            data = rng.integers(0, 2 if kind == "mask" else 256, size=(3, 4, 5)).astype(np.uint8)
        path = tmp_path / f"{kind}.vol1"
        write_vol1(path, data, (40.0, 4.0, 4.0), kind)
        back, spacing, back_kind = read_vol1(path)
        assert back_kind == kind
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, data)
        assert spacing == (40.0, 4.0, 4.0)
        # same bytes when rewritten
        path2 = tmp_path / "again.vol1"
        write_vol1(path2, back, spacing, kind)
        assert path.read_bytes() == path2.read_bytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vol1"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_vol1(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.vol1"
        write_vol1(path, np.zeros((2, 2, 2), dtype=np.uint8), (1, 1, 1), "raw")
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError):
            read_vol1(path)


class TestCremiImport:
    def _fixture(self, tmp_path, with_resolution=True):
        import h5py
        path = tmp_path / "cremi.h5"
        rng = np.random.default_rng(1)
        sentinel = 0xFFFFFFFFFFFFFFFF
        ids = np.full((4, 8, 8), sentinel, dtype=np.uint64)
        ids[1, 2:4, 2:6] = 5
        ids[2, 5:7, 1:3] = 9
        with h5py.File(path, "w") as fh:
            ds = fh.create_dataset("volumes/raw", data=rng.integers(0, 256, (4, 8, 8), dtype=np.uint8))
            if with_resolution:
                ds.attrs["resolution"] = (40.0, 4.0, 4.0)
            fh.create_dataset("volumes/labels/clefts", data=ids)
        return path, ids, sentinel

    def test_ids_binarized_by_sentinel(self, tmp_path):
        path, ids, sentinel = self._fixture(tmp_path)
        vol = import_cremi(path)
        np.testing.assert_array_equal(vol.labels, (ids != sentinel).astype(np.uint8))
        assert vol.labels.sum() == 12  # both ids map to 1

    def test_all_sentinel_gives_empty_mask(self, tmp_path):
        import h5py
        path = tmp_path / "empty.h5"
        with h5py.File(path, "w") as fh:
            fh.create_dataset("volumes/raw", data=np.zeros((2, 4, 4), dtype=np.uint8))
            fh.create_dataset("volumes/labels/clefts",
                              data=np.full((2, 4, 4), 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
        assert import_cremi(path).labels.sum() == 0

    def test_missing_dataset_lists_available(self, tmp_path):
        path, _, _ = self._fixture(tmp_path)
        with pytest.raises(DataError, match="volumes/raw"):
            import_cremi(path, raw_dataset_path="nonexistent/path")

    def test_spacing_defaults_without_attribute(self, tmp_path):
        path, _, _ = self._fixture(tmp_path, with_resolution=False)
        assert import_cremi(path).spacing == CREMI_SPACING

    def test_spacing_read_from_attribute(self, tmp_path):
        path, _, _ = self._fixture(tmp_path, with_resolution=True)
        assert import_cremi(path).spacing == (40.0, 4.0, 4.0)


def _flat_volume(shape=(8, 24, 24), cleft_box=None):
    raw = np.full(shape, 128, dtype=np.uint8)
    labels = np.zeros(shape, dtype=np.uint8)
    if cleft_box:
        labels[cleft_box] = 1
    return Volume(raw, labels, (1.0, 1.0, 1.0), "flat")


class TestSampling:
    def test_rejection_is_geometric(self):
        # no patch can reach the cleft minimum, so each draw is kept with
        # probability 1 - 0.95; mean draws-to-acceptance is 20
        vol = _flat_volume()
        rng = np.random.default_rng(7)
        draws = [sample_patch(vol, (4, 16, 16), rng, 200, 0.95).draws for _ in range(10_000)]
        mean = np.mean(draws)
        assert 16.0 < mean < 24.0

    def test_dense_slab_accepted_first_draw(self):
        vol = _flat_volume(cleft_box=np.s_[:, :, :])  # everything cleft... needs background
        vol.labels[0, 0, 0] = 0
        rng = np.random.default_rng(8)
        for _ in range(50):
            assert sample_patch(vol, (4, 8, 8), rng, 200, 0.95).draws == 1

    def test_same_seed_same_origins(self):
        vol = _flat_volume()
        a = [sample_patch(vol, (4, 8, 8), np.random.default_rng(5), 0, 0.0).origin]
        b = [sample_patch(vol, (4, 8, 8), np.random.default_rng(5), 0, 0.0).origin]
        assert a == b

    def test_oversized_patch_rejected(self):
        with pytest.raises(DataError):
            sample_patch(_flat_volume(), (16, 16, 16), np.random.default_rng(0))

    def test_boundary_channel_from_full_volume(self):
        # distances must not be truncated at the patch border
        vol = _flat_volume(shape=(8, 24, 24), cleft_box=np.s_[3:5, 8:16, 8:16])
        rng = np.random.default_rng(9)
        patch = sample_patch(vol, (4, 12, 12), rng, 0, 0.0)
        sl = tuple(slice(o, o + p) for o, p in zip(patch.origin, (4, 12, 12)))
        np.testing.assert_array_equal(patch.y_b, vol.boundary_map()[sl])


class TestAugment:
    def _patch(self, seed=0, shape=(4, 8, 8)):
        rng = np.random.default_rng(seed)
        y_s = (rng.random(shape) < 0.2).astype(np.uint8)
        y_s[0, 0, 0] = 0
        y_b = tanh_distance_map(y_s).astype(np.float32)
        return PatchSample(raw=rng.random(shape).astype(np.float32), y_s=y_s, y_b=y_b,
                           origin=(0, 0, 0))

    def test_zero_probabilities_identity(self):
        p = self._patch()
        out = augment(p, np.random.default_rng(1), 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(out.raw, p.raw)
        np.testing.assert_array_equal(out.y_s, p.y_s)
        assert out.augmented == {"rotate_k": 0, "flip_axis": None, "grayscale": None}

    def test_rotation_group_property(self):
        p = self._patch()
        out = augment(p, np.random.default_rng(2), 1.0, 0.0, 0.0)
        k = out.augmented["rotate_k"]
        assert k in (1, 2, 3)
        undone = np.rot90(out.raw, -k, axes=(1, 2))
        np.testing.assert_array_equal(undone, p.raw)
        np.testing.assert_array_equal(np.rot90(out.y_b, 4 - k, axes=(1, 2)), p.y_b)

    def test_flip_applies_jointly_and_labels_stay_consistent(self):
        # TDM is exactly flip-equivariant, so a flipped patch's boundary
        # channel must equal the TDM of its flipped mask
        p = self._patch()
        out = augment(p, np.random.default_rng(3), 0.0, 1.0, 0.0)
        axis = out.augmented["flip_axis"]
        assert axis in (0, 1, 2)
        np.testing.assert_array_equal(out.y_s, np.flip(p.y_s, axis))
        np.testing.assert_allclose(out.y_b, tanh_distance_map(out.y_s), atol=1e-6)

    def test_grayscale_touches_raw_only(self):
        p = self._patch()
        out = augment(p, np.random.default_rng(4), 0.0, 0.0, 1.0)
        a, b = out.augmented["grayscale"]
        assert 0.9 <= a <= 1.1 and -0.1 <= b <= 0.1
        np.testing.assert_allclose(out.raw, np.clip(a * p.raw + b, 0, 1), atol=1e-6)
        np.testing.assert_array_equal(out.y_s, p.y_s)
        np.testing.assert_array_equal(out.y_b, p.y_b)

    def test_same_seed_same_decisions(self):
        p = self._patch()
        a = augment(p, np.random.default_rng(6)).augmented
        b = augment(p, np.random.default_rng(6)).augmented
        assert a == b


class TestSynthesize:
    def test_no_clefts_gives_empty_labels(self):
        vol = synthesize(seed=0, extents=(16, 32, 32), n_clefts=0)
        assert vol.labels.sum() == 0

    def test_labels_are_sparse(self):
        vol = synthesize(seed=1)
        frac = vol.labels.mean()
        assert 0.0 < frac < 0.05

    def test_deterministic_in_seed(self):
        a = synthesize(seed=2)
        b = synthesize(seed=2)
        assert a.raw.tobytes() == b.raw.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seeds_differ(self):
        assert synthesize(seed=3).raw.tobytes() != synthesize(seed=4).raw.tobytes()

    def test_clefts_darker_than_background(self):
        vol = synthesize(seed=5)
        assert vol.raw[vol.labels == 1].mean() < vol.raw[vol.labels == 0].mean()


class TestSplit:
    def test_default_ratio(self):
        vol = synthesize(seed=6, extents=(20, 32, 32))
        train, val = split_slices(vol)
        assert train.shape[0] == 16 and val.shape[0] == 4
        np.testing.assert_array_equal(train.raw, vol.raw[:16])
        np.testing.assert_array_equal(val.raw, vol.raw[16:])

    def test_explicit_protocol(self):
        vol = _flat_volume(shape=(125, 16, 16))
        train, val = split_slices(vol, train_slices=100, val_slices=25)
        assert train.shape[0] == 100 and val.shape[0] == 25

    def test_bad_split_rejected(self):
        with pytest.raises(DataError):
            split_slices(_flat_volume(shape=(8, 16, 16)), train_slices=8, val_slices=1)


def test_full_volume_tdm_matches_patch_recomputation_away_from_borders():
    # a cleft at least the tanh saturation radius inside the patch sees the
    # same nearest background in both computations, so the values are equal
    vol = _flat_volume(shape=(12, 20, 20), cleft_box=np.s_[5:7, 8:12, 8:12])
    patch_sl = np.s_[1:11, 2:18, 2:18]
    full = tanh_distance_map(vol.labels)[patch_sl]
    local = tanh_distance_map(vol.labels[patch_sl])
    np.testing.assert_allclose(full, local, atol=1e-12)
