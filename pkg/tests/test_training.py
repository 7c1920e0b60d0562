import math

import numpy as np
import pytest

from hategraph import autodiff as ad
from hategraph import training as tr
from hategraph.featureio import SegmentFeatures
from hategraph.model import ModelConfig, init_params


def tiny_config(**over):
    base = dict(
        n_segments=4, n_instances=2, d=5, epsilon=0.4, gnn_kind="attention",
        gnn_layers=1, weight_head_hidden=4, classifier_hidden=6,
        d_visual_in=7, d_audio_in=4, d_text_in=6,
    )
    base.update(over)
    return ModelConfig(**base)


def make_records(rng, config, n_per_class=4, shift=2.5):
    """Small separable toy set: class-1 videos carry a mean shift."""
    records = []
    for i in range(2 * n_per_class):
        label = i % 2
        offset = shift * label
        feats = SegmentFeatures(
            visual=(rng.normal(size=(config.n_segments, config.d_visual_in)) + offset).astype(np.float32),
            audio=(rng.normal(size=(config.n_segments, config.d_audio_in)) + offset).astype(np.float32),
            text=(rng.normal(size=(config.n_segments, config.d_text_in)) + offset).astype(np.float32),
        )
        records.append(tr.VideoRecord(f"v{i}", label, feats))
    return records


class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        loss = tr.cross_entropy(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_coin_flip_is_ln2(self):
        for h in ([1.0, 0.0], [0.0, 1.0]):
            loss = tr.cross_entropy(np.array([0.5, 0.5]), np.array(h))
            assert loss.item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_confident_wrong_prediction(self):
        loss = tr.cross_entropy(np.array([0.9, 0.1]), np.array([0.0, 1.0]))
        assert loss.item() == pytest.approx(-math.log(0.1), rel=1e-7)

    def test_non_one_hot_rejected(self):
        with pytest.raises(ValueError, match="one-hot"):
            tr.cross_entropy(np.array([0.5, 0.5]), np.array([0.4, 0.6]))

    def test_clamp_keeps_loss_finite(self):
        loss = tr.cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(-math.log(1e-12), rel=1e-6)

    def test_gradient_flows_through_tensor_input(self):
        z = ad.Tensor(np.array([[0.3, -0.2]]), requires_grad=True, dtype=np.float64)
        p = ad.softmax(z, axis=1)
        loss = tr.cross_entropy(p, np.array([0.0, 1.0]))
        (g,) = ad.gradients(loss, [z])
        np.testing.assert_allclose(g, p.data - np.array([[0.0, 1.0]]), atol=1e-9)


class TestOptimizers:
    def test_zero_learning_rate_is_identity(self):
        config = tiny_config()
        params = init_params(config, seed=0)
        before = {n: t.data.copy() for n, t in params.items()}
        opt = tr.Adam(params, lr=0.0)
        opt.step({n: np.ones(t.shape) for n, t in params.items()})
        for name, tensor in params.items():
            assert tensor.data.tobytes() == before[name].tobytes()

    def test_adam_matches_three_step_hand_computation(self):
        from hategraph.model import ModelParams
        x = ad.Tensor(np.array([[1.0]]), requires_grad=True)
        params = ModelParams({"x": x})
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        opt = tr.Adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
        grads = [0.3, -0.5, 0.2]
        # independent scalar recurrence
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta -= lr * m_hat / (math.sqrt(v_hat) + eps)
            opt.step({"x": np.array([[g]])})
            assert params["x"].data[0, 0] == pytest.approx(theta, rel=1e-6)

    def test_sgd_step(self):
        from hategraph.model import ModelParams
        x = ad.Tensor(np.array([[2.0]]), requires_grad=True)
        opt = tr.Sgd(ModelParams({"x": x}), lr=0.5)
        opt.step({"x": np.array([[1.0]])})
        assert x.data[0, 0] == pytest.approx(1.5)


class TestMetrics:
    def test_all_correct(self):
        m = tr.Metrics.from_predictions([0, 1, 1, 0], [0, 1, 1, 0])
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_hand_confusion_matrix(self):
        # tp=3 fp=1 tn=4 fn=2
        y_true = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1]
        y_pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        m = tr.Metrics.from_predictions(y_true, y_pred)
        assert (m.tp, m.fp, m.tn, m.fn) == (3, 1, 4, 2)
        assert m.accuracy == pytest.approx(0.7)
        assert m.precision == pytest.approx(0.75)
        assert m.recall == pytest.approx(0.6)
        assert m.f1 == pytest.approx(2 / (1 / 0.75 + 1 / 0.6))

    def test_zero_denominators_flagged(self):
        m = tr.Metrics.from_predictions([0, 0], [0, 0])
        assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
        assert "precision_zero_denominator" in m.flags
        assert "recall_zero_denominator" in m.flags

    def test_hate_is_positive_class(self):
        # a predictor that only flags hate correctly must get recall 1
        m = tr.Metrics.from_predictions([1, 0, 0], [1, 1, 1])
        assert m.recall == 1.0
        assert m.precision == pytest.approx(1 / 3)

    def test_random_vectors_match_bruteforce(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 40))
            y_true = rng.integers(0, 2, size=n)
            y_pred = rng.integers(0, 2, size=n)
            m = tr.Metrics.from_predictions(y_true, y_pred)
            tp = sum(1 for a, b in zip(y_true, y_pred) if a == 1 and b == 1)
            fp = sum(1 for a, b in zip(y_true, y_pred) if a == 0 and b == 1)
            tn = sum(1 for a, b in zip(y_true, y_pred) if a == 0 and b == 0)
            fn = sum(1 for a, b in zip(y_true, y_pred) if a == 1 and b == 0)
            assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
            assert m.accuracy == pytest.approx((tp + tn) / n)
            if tp + fp:
                assert m.precision == pytest.approx(tp / (tp + fp))
            if tp + fn:
                assert m.recall == pytest.approx(tp / (tp + fn))

    def test_table_row_format(self):
        m = tr.Metrics(tp=1, fp=1, tn=1, fn=1, accuracy=0.821, precision=0.798,
                       recall=0.754, f1=0.771)
        assert m.row("Ours") == "Ours 0.821 0.771 0.798 0.754"


class TestSplits:
    def test_balanced_ten_samples(self):
        labels = [1, 0] * 5
        folds = tr.stratified_kfold(labels, k=5, seed=0)
        for fold in folds:
            fold_labels = [labels[i] for i in fold]
            assert sorted(fold_labels) == [0, 1]

    def test_folds_partition_indices(self):
        labels = [0] * 33 + [1] * 22
        folds = tr.stratified_kfold(labels, k=5, seed=1)
        all_idx = sorted(i for fold in folds for i in fold)
        assert all_idx == list(range(55))

    def test_hatemm_shaped_counts(self):
        labels = np.array([0] * 652 + [1] * 431)
        folds = tr.stratified_kfold(labels, k=5, seed=3)
        for fold in folds:
            fold_labels = labels[fold]
            neg = int(np.sum(fold_labels == 0))
            pos = int(np.sum(fold_labels == 1))
            assert neg in (130, 131)
            assert pos in (86, 87)

    def test_class_smaller_than_k_rejected(self):
        with pytest.raises(ValueError, match="fewer than k"):
            tr.stratified_kfold([0, 0, 0, 1, 1], k=3, seed=0)

    def test_kfold_seeded_determinism(self):
        labels = [0] * 20 + [1] * 15
        a = tr.stratified_kfold(labels, 5, seed=7)
        b = tr.stratified_kfold(labels, 5, seed=7)
        c = tr.stratified_kfold(labels, 5, seed=8)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_stratified_split_proportions(self):
        labels = np.array([0] * 652 + [1] * 431)
        train, val, test = tr.stratified_split(labels, (0.7, 0.1, 0.2), seed=0)
        assert len(train) + len(val) + len(test) == 1083
        assert set(train) | set(val) | set(test) == set(range(1083))
        test_pos = int(np.sum(labels[test] == 1))
        assert test_pos == pytest.approx(round(0.2 * 431), abs=1)


class TestTrainLoop:
    @pytest.fixture(scope="class")
    def toy(self):
        rng = np.random.default_rng(42)
        config = tiny_config()
        records = make_records(rng, config, n_per_class=4)
        return config, records

    def test_overfit_tiny_set(self, toy):
        config, records = toy
        tc = tr.TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=150,
                            patience=150, seed=0)
        idx = np.arange(len(records))
        result = tr.train(records, config, tc, train_idx=idx, val_idx=idx)
        assert result.history[-1].train_loss < 0.05
        assert result.best_val_f1 == 1.0

    def test_same_seed_bit_identical_history(self, toy):
        config, records = toy
        tc = tr.TrainConfig(learning_rate=0.02, batch_size=4, max_epochs=6,
                            patience=6, seed=5)
        idx = np.arange(len(records))
        r1 = tr.train(records, config, tc, train_idx=idx, val_idx=idx)
        r2 = tr.train(records, config, tc, train_idx=idx, val_idx=idx)
        assert r1.history == r2.history

    def test_patience_zero_stops_after_first_non_improvement(self, toy):
        config, records = toy
        # learning rate 0 never improves after the first epoch's baseline F1
        tc = tr.TrainConfig(learning_rate=0.0, batch_size=8, max_epochs=50,
                            patience=0, seed=1)
        idx = np.arange(len(records))
        result = tr.train(records, config, tc, train_idx=idx, val_idx=idx)
        assert len(result.history) == 2  # epoch 0 sets the bar, epoch 1 stops

    def test_early_stopping_returns_best_params(self, toy):
        config, records = toy
        tc = tr.TrainConfig(learning_rate=0.02, batch_size=4, max_epochs=12,
                            patience=3, seed=2)
        idx = np.arange(len(records))
        result = tr.train(records, config, tc, train_idx=idx, val_idx=idx)
        rechecked = tr.evaluate(result.params, records, config)
        assert rechecked.f1 == pytest.approx(result.best_val_f1)
        assert result.best_val_f1 == max(h.val_f1 for h in result.history)

    def test_single_class_split_rejected(self, toy):
        config, records = toy
        ones = [r for r in records if r.label == 1]
        tc = tr.TrainConfig(seed=0)
        with pytest.raises(tr.TrainingError, match="single class"):
            tr.train(ones + ones, config, tc,
                     train_idx=np.arange(len(ones)), val_idx=np.arange(len(ones)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self, toy):
        config, records = toy
        tc = tr.TrainConfig(learning_rate=1e20, optimizer="sgd", batch_size=8,
                            max_epochs=5, patience=5, seed=3)
        idx = np.arange(len(records))
        with pytest.raises(tr.TrainingError, match="diverged"):
            tr.train(records, config, tc, train_idx=idx, val_idx=idx)


class TestProtocols:
    @pytest.fixture(scope="class")
    def quick(self):
        rng = np.random.default_rng(1)
        config = tiny_config()
        records = make_records(rng, config, n_per_class=10)
        tc = tr.TrainConfig(learning_rate=0.02, batch_size=8, max_epochs=3,
                            patience=3, seed=0)
        return config, records, tc

    def test_cv_rejects_k1(self, quick):
        config, records, tc = quick
        with pytest.raises(ValueError, match="k"):
            tr.run_cv(records, config, tc, k=1)

    def test_cv_report_shape_and_mean(self, quick):
        config, records, tc = quick
        report = tr.run_cv(records, config, tc, k=2)
        assert len(report.per_fold) == 2
        expected_mean = np.mean([m.accuracy for m in report.per_fold])
        assert report.mean["accuracy"] == pytest.approx(expected_mean, abs=1e-9)
        assert "mean" in report.table()

    def test_repeated_runs(self, quick):
        config, records, tc = quick
        report = tr.run_repeated(records, config, tc, repeats=2)
        assert len(report.per_fold) == 2

    def test_ablation_report_rows(self, quick):
        config, records, tc = quick
        report = tr.run_ablation(records, config, tc)
        labels = [label for label, _ in report.rows]
        assert labels == ["No Graph", "Only Instance Graph",
                          "Only Weight Graph", "Full Model"]
        table = report.table()
        for label in labels:
            assert label in table

    def test_report_files(self, quick, tmp_path):
        config, records, tc = quick
        report = tr.run_cv(records, config, tc, k=2)
        tr.write_report(tmp_path / "cv", report.table(), report.as_dict())
        assert (tmp_path / "cv.txt").exists()
        import json
        payload = json.loads((tmp_path / "cv.json").read_text())
        assert "per_fold" in payload and "mean" in payload
