import numpy as np
import pytest

from fiadd import data as dt
from fiadd import model as md

import oracles


def small_split(count=20, seed=1, ratio=0.8):
    spec = dt.SyntheticSpec.default()
    for cs in spec.classes:
        cs.count = count
    ds = dt.generate_synthetic(spec, seed=seed)
    return dt.split(ds, ratio, seed)


def small_config(**overrides):
    base = dict(epochs=4, k=2, m=2, d=4, d_proj=4, eval_every=2, seed=1,
                learning_rate=0.05, warmup_epochs=1, variant="add_inf_foc",
                minority_class=2)
    base.update(overrides)
    return md.TrainConfig(**base)


class TestHeads:
    def test_identity_projection(self):
        head = md.ProjectionHead(np.eye(3), np.zeros(3), "identity")
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(md.project(head, x), x)

    def test_zero_weight_gives_bias(self):
        head = md.ProjectionHead(np.zeros((3, 2)), np.array([0.4, -0.1]), "tanh")
        np.testing.assert_allclose(md.project(head, np.ones(3)), np.tanh([0.4, -0.1]))

    def test_projection_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        x = rng.normal(size=4)
        head = md.ProjectionHead(w, b, "identity")
        expected = [sum(x[i] * w[i, j] for i in range(4)) + b[j] for j in range(3)]
        np.testing.assert_allclose(md.project(head, x), expected, atol=1e-12)

    def test_classify_uniform_for_zero_head(self):
        head = md.ClassificationHead(np.zeros((3, 4)), np.zeros(4))
        np.testing.assert_array_equal(md.classify(head, np.ones(3)), np.zeros(4))

    def test_classify_equal_columns(self):
        col = np.array([1.0, -1.0, 2.0])
        head = md.ClassificationHead(np.stack([col, col], axis=1), np.zeros(2))
        logits = md.classify(head, np.array([0.3, 0.7, -0.2]))
        assert logits[0] == pytest.approx(logits[1])

    def test_classify_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        r = rng.normal(size=3)
        head = md.ClassificationHead(w, b)
        expected = [sum(r[i] * w[i, j] for i in range(3)) + b[j] for j in range(2)]
        np.testing.assert_allclose(md.classify(head, r), expected, atol=1e-12)

    def test_dimension_mismatch(self):
        head = md.ProjectionHead(np.eye(3), np.zeros(3))
        with pytest.raises(ValueError, match="dim"):
            md.project(head, np.ones(4))


class TestMetrics:
    def test_hand_computed_f1(self):
        metrics = md.per_class_f1(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), [0, 1])
        assert metrics.per_class_f1[0] == pytest.approx(2.0 / 3.0)
        assert metrics.per_class_f1[1] == pytest.approx(0.8)
        assert metrics.macro_f1 == pytest.approx(0.73333, abs=1e-5)

    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 1])
        metrics = md.per_class_f1(labels, labels, [0, 1, 2])
        assert metrics.macro_f1 == 1.0

    def test_absent_class_flagged(self):
        metrics = md.per_class_f1(np.array([0, 0]), np.array([0, 0]), [0, 1])
        assert metrics.absent == [1]
        assert metrics.per_class_f1[1] == 0.0

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 3, size=n)
            preds = rng.integers(0, 3, size=n)
            metrics = md.per_class_f1(labels, preds, [0, 1, 2])
            ref_macro, ref_f1s = oracles.macro_f1_oracle(labels.tolist(), preds.tolist(), 3)
            assert metrics.macro_f1 == pytest.approx(ref_macro, abs=1e-9)
            np.testing.assert_allclose(metrics.per_class_f1, ref_f1s, atol=1e-9)


class TestPredict:
    def make_model(self):
        pair = small_split()
        return md.train(pair, small_config(epochs=0)), pair

    def test_argmax_and_tie(self):
        model, _ = self.make_model()
        model.classifier.weight[:] = 0.0
        model.classifier.bias[:] = np.array([0.1, 0.9, 0.3])
        assert md.predict(model, np.zeros(2)) == 1
        model.classifier.bias[:] = np.array([0.5, 0.5, 0.1])
        assert md.predict(model, np.zeros(2)) == 0  # tie goes to the lowest id

    def test_batch_equals_map(self):
        model, pair = self.make_model()
        X = pair.test.vectors()
        batch = md.predict_batch(model, X)
        singles = np.array([md.predict(model, x) for x in X])
        np.testing.assert_array_equal(batch, singles)

    def test_nearest_cluster_vs_brute_force(self):
        model, pair = self.make_model()
        index = model.final_index
        keys = index.keys()
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.uniform(-2, 10, size=2)
            r = md.project(model.projection, x)
            d2 = [float(np.sum((index.centroids[key] - r) ** 2)) for key in keys]
            expected = keys[int(np.argmin(d2))][0]
            assert md.predict_nearest_cluster(model, index, x) == expected

    def test_exact_centroid_hit(self):
        model, _ = self.make_model()
        index = model.final_index
        key = index.keys()[4]
        centroid = index.centroids[key]
        # invert the projection: solve W^T x = c - b for the 2-d input
        w = model.projection.weight
        x = np.linalg.lstsq(w.T, centroid - model.projection.bias, rcond=None)[0]
        assert md.predict_nearest_cluster(model, index, x) == key[0]


class TestTraining:
    def test_epochs_zero_single_record(self):
        model = md.train(small_split(), small_config(epochs=0))
        assert len(model.history) == 1
        assert model.history[0]["epoch"] == 0
        assert model.best_checkpoint["epoch"] == 0

    def test_deterministic_rerun(self):
        a = md.train(small_split(), small_config())
        b = md.train(small_split(), small_config())
        assert a.history == b.history
        np.testing.assert_array_equal(a.projection.weight, b.projection.weight)
        np.testing.assert_array_equal(a.classifier.weight, b.classifier.weight)
        assert a.final_index.assignments == b.final_index.assignments

    def test_zero_learning_rate_freezes_params(self):
        init = md.train(small_split(), small_config(epochs=0))
        frozen = md.train(small_split(), small_config(epochs=3, learning_rate=0.0))
        np.testing.assert_array_equal(init.projection.weight, frozen.projection.weight)
        np.testing.assert_array_equal(init.projection.bias, frozen.projection.bias)
        np.testing.assert_array_equal(init.classifier.weight, frozen.classifier.weight)
        np.testing.assert_array_equal(init.classifier.bias, frozen.classifier.bias)

    def test_ace_only_never_samples_neighborhoods(self):
        model = md.train(small_split(), small_config(variant="ace_only"))
        assert model.counters["neighborhood_batches"] == 0

    def test_neighborhood_path_counts(self):
        model = md.train(small_split(), small_config())
        assert model.counters["neighborhood_batches"] > 0

    def test_best_checkpoint_is_history_max(self):
        model = md.train(small_split(), small_config(epochs=6))
        macros = [rec["macro_f1"] for rec in model.history]
        assert model.best_checkpoint["macro_f1"] == pytest.approx(max(macros))
        minority = [rec["per_class_f1"][model.minority_class] for rec in model.history]
        assert model.highest_minority_f1 == pytest.approx(max(minority))

    def test_missing_class_rejected(self):
        pair = small_split()
        pair.train.samples = [s for s in pair.train.samples if s.label != 1]
        with pytest.raises(ValueError, match="missing classes"):
            md.train(pair, small_config())

    def test_loss_components_recorded(self):
        model = md.train(small_split(), small_config(epochs=2, eval_every=1))
        trained_records = [r for r in model.history if r["epoch"] > 0]
        assert all(r["ce_loss"] is not None and r["add_loss"] is not None for r in trained_records)
        ace = md.train(small_split(), small_config(epochs=2, eval_every=1, variant="ace_only"))
        assert all(r["add_loss"] is None for r in ace.history)


class TestEvaluate:
    def test_merge_map_two_way(self):
        model = md.train(small_split(), small_config(epochs=0))
        pair = small_split()
        three_way = md.evaluate(model, pair.test)
        assert three_way.class_ids == [0, 1, 2]
        two_way = md.evaluate(model, pair.test, merge_map={1: 1, 2: 1})
        assert two_way.class_ids == [0, 1]

    def test_merge_is_relabeling(self):
        model = md.train(small_split(), small_config(epochs=0))
        ds = small_split().test
        labels = ds.labels()
        preds = md.predict_batch(model, ds.vectors())
        merge = {1: 1, 2: 1}
        expected = md.per_class_f1(
            np.array([merge.get(int(l), int(l)) for l in labels]),
            np.array([merge.get(int(p), int(p)) for p in preds]),
            [0, 1],
        )
        got = md.evaluate(model, ds, merge_map=merge)
        assert got.per_class_f1 == expected.per_class_f1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = md.train(small_split(), small_config())
        path = tmp_path / "ckpt.json"
        md.save_checkpoint(model, path)
        back = md.load_checkpoint(path)
        np.testing.assert_array_equal(back.projection.weight, model.projection.weight)
        np.testing.assert_array_equal(back.classifier.bias, model.classifier.bias)
        assert back.history == model.history
        assert back.final_index.assignments == model.final_index.assignments
        for key in model.final_index.keys():
            np.testing.assert_array_equal(back.final_index.centroids[key],
                                          model.final_index.centroids[key])
        assert back.best_checkpoint["macro_f1"] == model.best_checkpoint["macro_f1"]
        assert back.highest_minority_f1 == model.highest_minority_f1

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "not_ckpt.json"
        path.write_text('{"something": 1}\n', encoding="utf-8")
        with pytest.raises(ValueError, match="not a checkpoint"):
            md.load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        a = md.train(small_split(), small_config())
        b = md.train(small_split(), small_config())
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        md.save_checkpoint(a, pa)
        md.save_checkpoint(b, pb)
        assert pa.read_bytes() == pb.read_bytes()
