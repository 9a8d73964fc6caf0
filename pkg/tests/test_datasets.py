import csv
import filecmp
import time

import numpy as np
import pytest
import torch
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from bilateral_vit.datasets import (
    MANIFEST_FIELDS,
    DatasetError,
    FoveaDataset,
    load_dataset,
    make_split,
    prepare_sample,
    synth_dataset,
    synth_fundus,
    write_manifest,
)
from bilateral_vit.inference import extract_fovea
from bilateral_vit.preprocessing import make_fovea_mask
from bilateral_vit.types import DiseaseStatus, FundusSample, validate_sample


def _write_rows(root, rows):
    Image.fromarray(np.zeros((50, 60, 3), np.uint8)).save(root / "img.png")
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)


class TestLoad:
    def test_three_rows(self, tmp_path):
        _write_rows(tmp_path, [[f"a{i}", "img.png", 10, 20, 5, "normal", "train"] for i in range(3)])
        samples, report = load_dataset(tmp_path)
        assert len(samples) == 3 and report.n_skipped == 0
        assert samples[0].shape == (50, 60)
        assert samples[0].dataset_tag == tmp_path.name

    def test_negative_fovea_skipped(self, tmp_path):
        _write_rows(tmp_path, [["ok", "img.png", 10, 20, 5, "normal", "train"],
                               ["bad", "img.png", -1, 20, 5, "normal", "train"]])
        samples, report = load_dataset(tmp_path)
        assert [s.id for s in samples] == ["ok"]
        assert report.skipped[0][1] == "bad" and "fovea_x" in report.skipped[0][2]

    def test_malformed_and_missing_file(self, tmp_path):
        _write_rows(tmp_path, [["ok", "img.png", 10, 20, 5, "diseased", "test"],
                               ["nan", "img.png", "x", 20, 5, "normal", "train"],
                               ["gone", "nope.png", 1, 1, 5, "normal", "train"],
                               ["sick", "img.png", 1, 1, 5, "unknown", "train"]])
        samples, report = load_dataset(tmp_path)
        assert len(samples) == 1 and report.n_skipped == 3
        assert samples[0].disease_status is DiseaseStatus.DISEASED

    def test_split_filter(self, tmp_path):
        _write_rows(tmp_path, [["a", "img.png", 1, 1, 5, "normal", "train"],
                               ["b", "img.png", 1, 1, 5, "normal", "test"]])
        samples, _ = load_dataset(tmp_path, split="train")
        assert [s.id for s in samples] == ["a"]

    def test_empty_result(self, tmp_path):
        _write_rows(tmp_path, [["a", "img.png", -5, 1, 5, "normal", "train"]])
        with pytest.raises(DatasetError, match="no usable samples"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path)

    def test_missing_column(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("id,image_path\n")
        with pytest.raises(DatasetError, match="lacks columns"):
            load_dataset(tmp_path)


def _pool(n_normal, n_diseased):
    return [FundusSample(id=f"s{i}", image=np.zeros((2, 2)), fovea_xy=(0, 0), disc_radius_R=1,
                         disease_status=DiseaseStatus.DISEASED if i < n_diseased else DiseaseStatus.NORMAL)
            for i in range(n_normal + n_diseased)]


class TestSplit:
    def test_ratio_eight_two(self):
        train, test = make_split(_pool(6, 4), "ratio", seed=0, frac=0.8)
        assert (len(train), len(test)) == (8, 2)

    def test_same_seed_same_split(self):
        a = make_split(_pool(7, 5), "ratio", seed=3)
        b = make_split(_pool(7, 5), "ratio", seed=3)
        assert [s.id for s in a[0]] == [s.id for s in b[0]]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000), st.floats(0.2, 0.8))
    def test_stratified_within_one(self, n_norm, n_dis, seed, frac):
        pool = _pool(n_norm, n_dis)
        try:
            train, _ = make_split(pool, "ratio", seed=seed, frac=frac)
        except DatasetError:
            return
        n_dis_train = sum(s.disease_status is DiseaseStatus.DISEASED for s in train)
        expected = len(train) * n_dis / len(pool)
        assert abs(n_dis_train - expected) <= 1

    def test_manifest_scheme(self):
        train, test = make_split(synth_dataset(8, 64, seed=0, test_fraction=0.25).samples)
        assert len(train) == 6 and len(test) == 2

    def test_empty_partition(self):
        with pytest.raises(DatasetError):
            make_split(_pool(3, 0), "manifest")

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            make_split(_pool(3, 3), "kfold")


class TestSynth:
    def test_files_and_manifest(self, synth_dir):
        assert len(list((synth_dir / "images").glob("*.png"))) == 8
        assert len(list((synth_dir / "vessel_cache" / "synthA").glob("*.png"))) == 8
        samples, report = load_dataset(synth_dir)
        assert len(samples) == 8 and report.n_skipped == 0

    def test_byte_identical(self, tmp_path):
        a = synth_dataset(4, 64, seed=9, out_dir=tmp_path / "a")
        b = synth_dataset(4, 64, seed=9, out_dir=tmp_path / "b")
        for sa in a.samples:
            name = sa.id + ".png"
            assert filecmp.cmp(tmp_path / "a" / "images" / name, tmp_path / "b" / "images" / name, shallow=False)
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()

    def test_fast(self):
        start = time.perf_counter()
        synth_dataset(8, 64, seed=0)
        assert time.perf_counter() - start < 5.0

    def test_lesions_cover_fovea_often(self):
        hits = [synth_fundus(64, seed, True)[2]["lesion_over_fovea"] for seed in range(200)]
        assert np.mean(hits) >= 0.5

    def test_normal_has_no_lesions(self):
        assert synth_fundus(64, 1, False)[2]["n_lesions"] == 0

    def test_all_samples_valid(self, synth8):
        assert all(validate_sample(s) == [] for s in synth8.samples)

    def test_manifest_round_trip(self, synth_dir, tmp_path):
        samples, _ = load_dataset(synth_dir)
        write_manifest(samples, tmp_path / "m.csv", root=synth_dir)
        again, _ = load_dataset(synth_dir, tmp_path / "m.csv", dataset_tag=samples[0].dataset_tag)
        assert again == samples

    def test_ground_truth_recoverable(self, synth8):
        for s in synth8.samples:
            mask = make_fovea_mask(s.fovea_xy, s.disc_radius_R / 4, 64).astype(float)
            est = extract_fovea(mask)
            assert np.hypot(est.x - s.fovea_xy[0], est.y - s.fovea_xy[1]) <= 1.0

    def test_bad_size(self):
        with pytest.raises(ValueError):
            synth_dataset(2, 60, seed=0)
        with pytest.raises(ValueError):
            synth_dataset(0, 64, seed=0)


class TestFoveaDataset:
    def test_prepared_mask_radius(self, synth8):
        s = synth8.samples[0]
        p = prepare_sample(s, 64)
        r = s.disc_radius_R * p.transform.scale / 4
        assert abs(p.mask.sum() - np.pi * r * r) <= 2 * np.pi * r
        assert p.vessel is None

    def test_items(self, synth8):
        ds = FoveaDataset([prepare_sample(s, 64) for s in synth8.samples[:2]])
        item = ds[0]
        assert item["image"].shape == (3, 64, 64) and item["target"].shape == (1, 64, 64)
        assert "vessel" not in item

    def test_epoch_changes_augmentation(self, synth8):
        ds = FoveaDataset([prepare_sample(s, 64) for s in synth8.samples[:1]], augment=True, seed=0)
        a = ds[0]["image"]
        assert torch.equal(a, ds[0]["image"])
        ds.set_epoch(1)
        assert not torch.equal(a, ds[0]["image"])
