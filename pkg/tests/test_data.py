import json

import numpy as np
import pytest

from fiadd import data as dt
from fiadd.analysis import LabeledPointSet, acld


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


HEADER = json.dumps({"d_in": 2, "class_names": ["nh", "exp", "imp"], "implicit_labels": [2]})


class TestLoad:
    def test_basic_record(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [
            HEADER,
            '{"id":"a","label":2,"vector":[0.0,1.0],"implied_vector":[1.0,0.0]}',
        ])
        ds = dt.load_dataset(path)
        assert len(ds) == 1 and ds.d_in == 2
        np.testing.assert_array_equal(ds.samples[0].implied_vector, [1.0, 0.0])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(dt.DatasetError, match="empty dataset"):
            dt.load_dataset(path)

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [HEADER])
        with pytest.raises(dt.DatasetError, match="empty dataset"):
            dt.load_dataset(path)

    def test_dimension_mismatch_names_line(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        hdr = json.dumps({"d_in": 768, "class_names": ["a", "b"], "implicit_labels": []})
        vec = [0.0] * 767
        write_lines(path, [hdr, json.dumps({"id": "x", "label": 0, "vector": vec})])
        with pytest.raises(dt.DatasetError, match="line 2"):
            dt.load_dataset(path, expected_dim=768)

    def test_expected_dim_vs_header(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [HEADER, '{"id":"a","label":0,"vector":[0.0,1.0]}'])
        with pytest.raises(dt.DatasetError, match="dimension mismatch"):
            dt.load_dataset(path, expected_dim=3)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [
            HEADER,
            '{"id":"a","label":0,"vector":[0.0,1.0]}',
            '{"id":"a","label":1,"vector":[1.0,1.0]}',
        ])
        with pytest.raises(dt.DatasetError, match="duplicate id 'a'"):
            dt.load_dataset(path)

    def test_implied_on_non_implicit(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [
            HEADER,
            '{"id":"a","label":1,"vector":[0.0,1.0],"implied_vector":[1.0,0.0]}',
        ])
        with pytest.raises(dt.DatasetError, match="non-implicit"):
            dt.load_dataset(path)

    def test_malformed_line_reported(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        write_lines(path, [HEADER, "{not json"])
        with pytest.raises(dt.DatasetError, match="line 2"):
            dt.load_dataset(path)

    def test_round_trip_bit_exact(self, tmp_path):
        ds = dt.generate_synthetic(dt.SyntheticSpec.default(), seed=3)
        path = tmp_path / "ds.jsonl"
        dt.dump_dataset(ds, path)
        back = dt.load_dataset(path)
        assert back.ids() == ds.ids()
        for a, b in zip(ds.samples, back.samples):
            np.testing.assert_array_equal(a.vector, b.vector)
            if a.implied_vector is not None:
                np.testing.assert_array_equal(a.implied_vector, b.implied_vector)
        # dump of the reload is byte-identical
        path2 = tmp_path / "ds2.jsonl"
        dt.dump_dataset(back, path2)
        assert path.read_bytes() == path2.read_bytes()


class TestValidate:
    def make_ds(self):
        return dt.Dataset(
            samples=[
                dt.EmbeddedSample("a", 0, np.zeros(2)),
                dt.EmbeddedSample("b", 2, np.ones(2), np.ones(2)),
            ],
            d_in=2, class_names=["nh", "exp", "imp"], implicit_labels={2},
        )

    def test_clean(self):
        assert dt.validate(self.make_ds()) == []

    def test_implied_on_explicit(self):
        ds = self.make_ds()
        ds.samples[0] = dt.EmbeddedSample("a", 1, np.zeros(2), np.ones(2))
        report = dt.validate(ds)
        assert len(report) == 1 and "'a'" in report[0]

    def test_duplicate_ids(self):
        ds = self.make_ds()
        ds.samples.append(dt.EmbeddedSample("a", 0, np.zeros(2)))
        report = dt.validate(ds)
        assert len(report) == 1 and "duplicate" in report[0]


class TestSplit:
    def make_ds(self, per_class=10, n_classes=3):
        samples = []
        for c in range(n_classes):
            for i in range(per_class):
                samples.append(dt.EmbeddedSample(f"c{c}-{i}", c, np.array([float(c), float(i)])))
        return dt.Dataset(samples, 2, [str(c) for c in range(n_classes)], set())

    def test_stratified_counts(self):
        ds = self.make_ds(per_class=10)
        pair = dt.split(ds, 0.8, seed=1)
        train_labels = pair.train.labels()
        test_labels = pair.test.labels()
        for c in range(3):
            assert int(np.sum(train_labels == c)) == 8
            assert int(np.sum(test_labels == c)) == 2

    def test_partition(self):
        ds = self.make_ds()
        pair = dt.split(ds, 0.8, seed=4)
        train_ids = set(pair.train.ids())
        test_ids = set(pair.test.ids())
        assert train_ids | test_ids == set(ds.ids())
        assert train_ids & test_ids == set()

    def test_deterministic(self):
        ds = self.make_ds()
        a = dt.split(ds, 0.8, seed=7)
        b = dt.split(ds, 0.8, seed=7)
        assert a.train.ids() == b.train.ids()
        assert a.test.ids() == b.test.ids()

    def test_seeds_differ(self):
        ds = self.make_ds(per_class=34)  # about 100 samples
        a = dt.split(ds, 0.8, seed=1)
        b = dt.split(ds, 0.8, seed=4)
        assert set(a.test.ids()) != set(b.test.ids())

    def test_total_is_round(self):
        ds = self.make_ds(per_class=5)  # 15 samples, ratio 0.75 -> round(11.25) = 11
        pair = dt.split(ds, 0.75, seed=1)
        assert len(pair.train) == round(0.75 * 15)
        for c in range(3):
            n_train = int(np.sum(pair.train.labels() == c))
            assert abs(n_train - 0.75 * 5) < 1 + 1e-9

    def test_tiny_class_goes_to_train(self):
        ds = self.make_ds(per_class=10, n_classes=2)
        ds.class_names.append("rare")
        ds.samples.append(dt.EmbeddedSample("solo", 2, np.zeros(2)))
        with pytest.warns(UserWarning, match="class 2"):
            pair = dt.split(ds, 0.8, seed=1)
        assert "solo" in pair.train.ids()

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            dt.split(self.make_ds(), 1.0, seed=1)


class TestSynthetic:
    def test_counts_and_implied(self):
        ds = dt.generate_synthetic(dt.SyntheticSpec.default(), seed=1)
        assert len(ds) == 150
        implied = [s for s in ds.samples if s.implied_vector is not None]
        assert len(implied) == 50
        assert all(s.label == 2 for s in implied)
        assert dt.validate(ds) == []

    def test_reproducible(self, tmp_path):
        a = dt.generate_synthetic(dt.SyntheticSpec.default(), seed=5)
        b = dt.generate_synthetic(dt.SyntheticSpec.default(), seed=5)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        dt.dump_dataset(a, pa)
        dt.dump_dataset(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_acld_ordering(self):
        # construction guarantee: implicit sits far closer to non-hate than explicit
        ds = dt.generate_synthetic(dt.SyntheticSpec.default(), seed=2)
        pset = LabeledPointSet(ds.ids(), ds.vectors(), ds.labels(), metric="l1")
        assert acld(pset, 0, 2) < acld(pset, 0, 1)

    def test_bad_count(self):
        spec = dt.SyntheticSpec.default()
        spec.classes[0].count = 0
        with pytest.raises(dt.DatasetError, match="positive"):
            dt.generate_synthetic(spec, seed=1)

    def test_non_psd_cov(self):
        spec = dt.SyntheticSpec.default()
        spec.classes[0].cov = np.array([[1.0, 2.0], [2.0, 1.0]])  # negative eigenvalue
        with pytest.raises(dt.DatasetError, match="positive semi-definite"):
            dt.generate_synthetic(spec, seed=1)
