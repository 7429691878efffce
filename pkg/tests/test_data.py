import json

import numpy as np
import pytest

from deformreg.data import (
    MalformedHeaderError,
    ManifestError,
    PhantomSpec,
    ShapeOverflowError,
    UnsupportedDtypeError,
    UnsupportedRankError,
    build_dataset,
    generate_phantom_pair,
    invert_displacement,
    make_phantom_dataset,
    read_field,
    read_labels,
    read_volume,
    save_phantom_dataset,
    write_field,
    write_labels,
    write_volume,
)
from deformreg.evaluation import dice_mean
from deformreg.grid import DisplacementField, LabelMap, Volume, jacobian_determinant, warp


def small_spec(**overrides):
    base = dict(
        shape=(24, 24, 24),
        n_structures=3,
        radius_range=(3.0, 5.0),
        deform_sigma=4.0,
        max_displacement=3.0,
        affine_translation=1.5,
        affine_rotation_deg=4.0,
        seed=0,
    )
    base.update(overrides)
    return PhantomSpec(**base)


class TestPhantom:
    def test_deterministic_in_seed(self):
        a = generate_phantom_pair(small_spec(seed=5))
        b = generate_phantom_pair(small_spec(seed=5))
        np.testing.assert_array_equal(a.fixed.data, b.fixed.data)
        np.testing.assert_array_equal(a.true_field.vectors, b.true_field.vectors)
        c = generate_phantom_pair(small_spec(seed=6))
        assert not np.array_equal(a.fixed.data, c.fixed.data)

    def test_zero_deformation_gives_identical_pair(self):
        spec = small_spec(max_displacement=0.0, affine_rotation_deg=0.0,
                          affine_translation=0.0, affine_scale_jitter=0.0)
        pair = generate_phantom_pair(spec)
        np.testing.assert_allclose(pair.true_field.vectors, 0.0, atol=1e-6)
        np.testing.assert_allclose(pair.moving.data, pair.fixed.data, atol=1e-6)
        np.testing.assert_array_equal(pair.labels_moving.labels, pair.labels_fixed.labels)

    def test_target_field_beats_zero_field(self):
        pair = generate_phantom_pair(small_spec(seed=3))
        before = dice_mean(pair.labels_fixed, pair.labels_moving)
        after = dice_mean(pair.labels_fixed, warp(pair.labels_moving, pair.target_field))
        assert after > before

    def test_true_field_jacobian_positive(self):
        for seed in range(5):
            pair = generate_phantom_pair(small_spec(seed=seed))
            det = jacobian_determinant(pair.true_field)
            assert det.min() > 0

    def test_label_inventory_preserved(self):
        pair = generate_phantom_pair(small_spec(seed=1))
        before = set(np.unique(pair.labels_fixed.labels))
        after = set(np.unique(pair.labels_moving.labels))
        assert after <= before
        assert len(after) >= len(before) - 1  # at most one structure lost off-frame

    def test_invert_displacement_round_trip(self):
        pair = generate_phantom_pair(small_spec(seed=2))
        u = pair.true_field
        v = invert_displacement(u)
        from deformreg.grid import compose

        round_trip = compose(u, v)  # warp by u then by v should be identity
        interior = round_trip.vectors[:, 4:-4, 4:-4, 4:-4]
        assert float(np.abs(interior).mean()) < 0.15


class TestRawIO:
    def test_volume_round_trip_bit_exact(self, tmp_path, rng):
        vol = Volume(rng.random((6, 7, 8), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
        path = tmp_path / "vol.raw"
        write_volume(vol, path)
        back = read_volume(path)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.spacing == (2.0, 2.0, 2.0)

    def test_sidecar_schema(self, tmp_path, rng):
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32))
        write_volume(vol, tmp_path / "v.raw")
        sidecar = json.loads((tmp_path / "v.raw.json").read_text())
        assert sidecar == {
            "shape": [4, 4, 4],
            "spacing": [1.0, 1.0, 1.0],
            "dtype": "float32",
            "order": "C",
        }

    def test_field_round_trip_with_kind_tag(self, tmp_path, rng):
        field = DisplacementField(rng.normal(size=(3, 5, 5, 5)).astype(np.float32))
        path = tmp_path / "u.raw"
        write_field(field, path)
        sidecar = json.loads((tmp_path / "u.raw.json").read_text())
        assert sidecar["kind"] == "displacement"
        back = read_field(path)
        np.testing.assert_array_equal(back.vectors, field.vectors)

    def test_labels_round_trip(self, tmp_path):
        labels = LabelMap(np.arange(27).reshape(3, 3, 3) % 5)
        write_labels(labels, tmp_path / "l.raw")
        back = read_labels(tmp_path / "l.raw")
        np.testing.assert_array_equal(back.labels, labels.labels)

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "x.raw").write_bytes(b"\x00" * 16)
        with pytest.raises(MalformedHeaderError, match="sidecar"):
            read_volume(tmp_path / "x.raw")

    def test_size_mismatch(self, tmp_path):
        (tmp_path / "x.raw").write_bytes(b"\x00" * 16)
        (tmp_path / "x.raw.json").write_text(
            json.dumps({"shape": [4, 4, 4], "spacing": [1, 1, 1], "dtype": "float32", "order": "C"})
        )
        with pytest.raises(MalformedHeaderError, match="bytes"):
            read_volume(tmp_path / "x.raw")

    def test_bad_dtype(self, tmp_path):
        (tmp_path / "x.raw").write_bytes(b"\x00" * 16)
        (tmp_path / "x.raw.json").write_text(
            json.dumps({"shape": [2, 2, 1], "spacing": [1, 1, 1], "dtype": "float16", "order": "C"})
        )
        with pytest.raises(UnsupportedDtypeError):
            read_volume(tmp_path / "x.raw")


class TestNifti:
    def test_round_trip(self, tmp_path, rng):
        vol = Volume(rng.random((5, 6, 7), dtype=np.float32), spacing=(2.0, 1.5, 1.0))
        path = tmp_path / "vol.nii"
        write_volume(vol, path)
        back = read_volume(path)
        np.testing.assert_allclose(back.data, vol.data, atol=1e-7)
        assert back.spacing == pytest.approx((2.0, 1.5, 1.0))
        assert back.affine is not None  # writer stores a spacing-diagonal affine

    def test_gzip_round_trip(self, tmp_path, rng):
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
        path = tmp_path / "vol.nii.gz"
        write_volume(vol, path)
        back = read_volume(path)
        np.testing.assert_allclose(back.data, vol.data, atol=1e-7)
        assert back.spacing == pytest.approx((2.0, 2.0, 2.0))

    def test_affine_stored_verbatim(self, tmp_path, rng):
        affine = np.array(
            [[0, 0, 2.0, 10], [0, 2.0, 0, -5], [2.0, 0, 0, 3], [0, 0, 0, 1]]
        )
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32), affine=affine)
        path = tmp_path / "vol.nii"
        write_volume(vol, path)
        back = read_volume(path)
        np.testing.assert_allclose(back.affine, affine, atol=1e-5)

    def test_wrong_rank_rejected(self, tmp_path, rng):
        # craft a 4D header by patching dim[0]
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32))
        path = tmp_path / "vol.nii"
        write_volume(vol, path)
        blob = bytearray(path.read_bytes())
        import struct

        struct.pack_into("<h", blob, 40, 4)
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedRankError, match="dim"):
            read_volume(path)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(MalformedHeaderError):
            read_volume(path)

    def test_short_file_rejected(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(MalformedHeaderError, match="shorter"):
            read_volume(path)

    def test_overflow_dims_rejected(self, tmp_path, rng):
        vol = Volume(rng.random((4, 4, 4), dtype=np.float32))
        path = tmp_path / "vol.nii"
        write_volume(vol, path)
        blob = bytearray(path.read_bytes())
        import struct

        struct.pack_into("<8h", blob, 40, 3, -2, 4, 4, 1, 1, 1, 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(ShapeOverflowError):
            read_volume(path)

    def test_integer_labels_via_nifti(self, tmp_path):
        labels = LabelMap((np.arange(64).reshape(4, 4, 4) % 6))
        write_labels(labels, tmp_path / "l.nii", spacing=(1, 1, 1))
        back = read_labels(tmp_path / "l.nii")
        np.testing.assert_array_equal(back.labels, labels.labels)


def _write_manifest(tmp_path, n_ids, mode="inter", split=None, pairs=None, ordered=False):
    volumes = []
    for i in range(n_ids):
        vid = f"s{i:02d}"
        vol = Volume(np.random.default_rng(i).random((4, 4, 4), dtype=np.float32))
        write_volume(vol, tmp_path / f"{vid}.raw")
        volumes.append({"id": vid, "path": f"{vid}.raw"})
    manifest = {"volumes": volumes, "pairs_mode": mode}
    if split is not None:
        manifest["split"] = split
    if pairs is not None:
        manifest["pairs"] = pairs
    if ordered:
        manifest["ordered_pairs"] = True
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestDatasetPairing:
    def test_twenty_ids_make_190_pairs(self, tmp_path):
        ids = [f"s{i:02d}" for i in range(20)]
        path = _write_manifest(tmp_path, 20, split={"train": ids})
        ds = build_dataset(path, split="train")
        assert len(ds.pairs) == 190

    def test_ten_ids_make_45_pairs(self, tmp_path):
        path = _write_manifest(tmp_path, 10)
        ds = build_dataset(path, split="train")  # no split section -> all ids
        assert len(ds.pairs) == 45

    def test_two_ids_make_one_pair(self, tmp_path):
        path = _write_manifest(tmp_path, 2)
        ds = build_dataset(path)
        assert len(ds.pairs) == 1

    def test_ordered_flag_doubles(self, tmp_path):
        path = _write_manifest(tmp_path, 5, ordered=True)
        ds = build_dataset(path)
        assert len(ds.pairs) == 20

    def test_intra_mode_uses_listed_pairs(self, tmp_path):
        path = _write_manifest(
            tmp_path, 4, mode="intra", pairs=[["s00", "s01"], {"fixed": "s02", "moving": "s03"}]
        )
        ds = build_dataset(path)
        assert len(ds.pairs) == 2
        assert ds.pairs[0].fixed_id == "s00"
        assert ds.pairs[1].moving_id == "s03"

    def test_duplicate_ids_rejected(self, tmp_path):
        vol = Volume(np.zeros((4, 4, 4), dtype=np.float32) + 0.5)
        write_volume(vol, tmp_path / "a.raw")
        manifest = {
            "volumes": [{"id": "a", "path": "a.raw"}, {"id": "a", "path": "a.raw"}],
            "pairs_mode": "inter",
        }
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestError, match="duplicate"):
            build_dataset(tmp_path / "m.json")

    def test_missing_file_rejected(self, tmp_path):
        manifest = {"volumes": [{"id": "a", "path": "missing.raw"}], "pairs_mode": "inter"}
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        with pytest.raises(ManifestError, match="missing"):
            build_dataset(tmp_path / "m.json")

    def test_unknown_mode_rejected(self, tmp_path):
        path = _write_manifest(tmp_path, 2, mode="bogus")
        with pytest.raises(ManifestError, match="pairs_mode"):
            build_dataset(path)


class TestPhantomDatasetRoundTrip:
    def test_save_and_rebuild(self, tmp_path):
        ds = make_phantom_dataset(2, small_spec(), seed=1, split="train")
        manifest = save_phantom_dataset(ds, tmp_path / "out")
        rebuilt = build_dataset(manifest, split="train")
        assert len(rebuilt.pairs) == 2
        pair = rebuilt.pairs[0]
        vol = rebuilt.volume(pair.fixed_id)
        np.testing.assert_allclose(vol.data, ds.volume(ds.pairs[0].fixed_id).data, atol=1e-7)
        labels = rebuilt.labels_for(pair.fixed_id)
        assert labels is not None
        gt = rebuilt.gt_field(pair)
        assert gt is not None
        np.testing.assert_allclose(
            gt.vectors, ds.gt_field(ds.pairs[0]).vectors, atol=1e-7
        )
