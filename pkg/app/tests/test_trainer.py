"""Цикл обучения: Adam, градиенты целевой функции, детерминизм, продолжение с чекпоинта, коллапс."""

import math
import zipfile

import numpy as np
import pytest

from app.adapter_core import CheckpointException, adapt, adapt_matrix, revert_matrix
from app.aic import reconstruction_loss
from app.constants import ABLATION_COLUMNS, ABLATION_CONFIGS, NPZ_DATE_TIME
from app.empl import info_nce_from_matrix, pseudo_label
from app.feature_validator import FeatureValidationException
from app.models import AdamState, Arch, LabelSource, TrainConfig, ViewTag
from app.retrieval import evaluate, rank
from app.trainer import (
    GradientBlowUpException,
    TrainingCollapseException,
    TrainState,
    adam_step,
    initial_state,
    load_checkpoint,
    objective,
    run_ablation,
    run_training,
    sample_indices,
    sample_queries,
    save_checkpoint,
    train_adapter,
)
from conftest import make_set, unit_rows


def _entries_without_time(log):
    return [e.model_dump(exclude={"ms"}) for e in log.entries]


class TestSampling:

    def test_same_seed_same_indices(self):
        a = sample_indices(100, 30, np.random.default_rng(9))
        b = sample_indices(100, 30, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 30

    def test_oversized_sample_uses_full_set(self):
        idx = sample_indices(10, 25, np.random.default_rng(0))
        assert sorted(idx.tolist()) == list(range(10))

    def test_full_batch_by_default(self):
        assert sorted(sample_indices(7, None, np.random.default_rng(0)).tolist()) == list(range(7))

    def test_single_record(self, small_data):
        X_Q = small_data[0].subset(np.array([7]))
        assert sample_queries(X_Q, 1, np.random.default_rng(0)).ids == X_Q.ids

    def test_empty_source(self):
        with pytest.raises(FeatureValidationException):
            sample_indices(0, 1, np.random.default_rng(0))


class TestAdam:

    def test_quadratic_against_textbook(self):
        """100 шагов на f(x) = (x - 3)² против независимой реализации по формулам."""
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        params, state = {"x": np.array([0.0])}, AdamState()

        x, m, v = 0.0, 0.0, 0.0
        for t in range(1, 101):
            params, state = adam_step(params, {"x": 2.0 * (params["x"] - 3.0)}, state, lr, (b1, b2), eps)

            g = 2.0 * (x - 3.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(params["x"][0] - x) < 1e-10

        assert state.t == 100
        assert abs(params["x"][0] - 3.0) < abs(0.0 - 3.0)

    def test_zero_gradient_first_step(self):
        params, state = adam_step({"W": np.full((2, 3), 0.7)}, {"W": np.zeros((2, 3))}, AdamState(), 0.1)
        np.testing.assert_array_equal(params["W"], np.full((2, 3), 0.7))
        assert state.t == 1

    def test_first_step_is_signed_lr(self):
        g = np.array([0.3, -2.0, 5e-3])
        params, _ = adam_step({"x": np.zeros(3)}, {"x": g}, AdamState(), 0.01)
        np.testing.assert_allclose(params["x"], -0.01 * np.sign(g), rtol=1e-5)

    def test_inputs_not_mutated(self):
        p = np.ones((2, 2))
        adam_step({"W": p}, {"W": np.ones((2, 2))}, AdamState(), 0.1)
        np.testing.assert_array_equal(p, np.ones((2, 2)))

    def test_blow_up(self):
        with pytest.raises(GradientBlowUpException, match="'W'"):
            adam_step({"W": np.ones(3)}, {"W": np.array([1.0, np.nan, 0.0])}, AdamState(), 0.1)


class TestObjectiveGradient:

    def test_gradcheck(self):
        """M=8, N=10, d0=6, d=4, τ=0.1: ∂(w_em·L_EM + w_re·L_re) по W и V против центральных разностей."""
        rng = np.random.default_rng(2024)
        XQ, XR = unit_rows(rng, 8, 6), unit_rows(rng, 10, 6)
        W = np.eye(4, 6) + 0.3 * rng.standard_normal((4, 6))
        V = np.eye(6, 4) + 0.3 * rng.standard_normal((6, 4))
        s = np.zeros((8, 10), dtype=bool)
        s[np.arange(8), rng.integers(0, 10, size=8)] = True
        s[6] = False
        config = TrainConfig(tau=0.1, w_em=1.0, w_re=0.5, d=4)

        def total(W_, V_):
            return objective(W_, V_, XQ, XR, s, config)[0]["total"]

        _, grad_W, grad_V = objective(W, V, XQ, XR, s, config)
        h = 1e-5
        for param, grad, which in ((W, grad_W, "W"), (V, grad_V, "V")):
            numeric = np.zeros_like(param)
            for idx in np.ndindex(*param.shape):
                plus, minus = param.copy(), param.copy()
                plus[idx] += h
                minus[idx] -= h
                if which == "W":
                    numeric[idx] = (total(plus, V) - total(minus, V)) / (2 * h)
                else:
                    numeric[idx] = (total(W, plus) - total(W, minus)) / (2 * h)
            np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)

    def test_parts_match_components(self):
        rng = np.random.default_rng(5)
        XQ, XR = unit_rows(rng, 5, 4), unit_rows(rng, 6, 4)
        W, V = np.eye(4) + 0.1 * rng.standard_normal((4, 4)), np.eye(4)
        s = np.zeros((5, 6), dtype=bool)
        s[np.arange(5), [0, 1, 2, 3, 4]] = True
        parts, _, _ = objective(W, V, XQ, XR, s, TrainConfig())

        ZQ, _ = adapt_matrix(W, XQ)
        ZR, _ = adapt_matrix(W, XR)
        assert parts["l_em_qr"] == pytest.approx(info_nce_from_matrix(ZQ, ZR, s, 0.1).value, rel=1e-12)
        assert parts["l_em_rq"] == pytest.approx(info_nce_from_matrix(ZR, ZQ, s.T, 0.1).value, rel=1e-12)
        assert parts["l_re_q"] == pytest.approx(reconstruction_loss(XQ, revert_matrix(V, ZQ)).value / 5, rel=1e-12)
        assert parts["l_re_r"] == pytest.approx(reconstruction_loss(XR, revert_matrix(V, ZR)).value / 6, rel=1e-12)

    def test_reconstruction_weight_is_per_record(self):
        """Удвоение числа записей (те же векторы дважды) не меняет вклад реконструкции."""
        rng = np.random.default_rng(6)
        XQ, XR = unit_rows(rng, 4, 5), unit_rows(rng, 7, 5)
        W, V = np.eye(5) + 0.2 * rng.standard_normal((5, 5)), np.eye(5) + 0.2 * rng.standard_normal((5, 5))
        s = np.zeros((4, 7), dtype=bool)
        config = TrainConfig(w_em=0.0, w_re=1.0)

        single, grad_W, grad_V = objective(W, V, XQ, XR, s, config)
        doubled, grad_W2, grad_V2 = objective(W, V, np.vstack([XQ, XQ]), np.vstack([XR, XR]), np.zeros((8, 14), dtype=bool), config)
        assert doubled["total"] == pytest.approx(single["total"], rel=1e-12)
        np.testing.assert_allclose(grad_W2, grad_W, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(grad_V2, grad_V, rtol=1e-10, atol=1e-14)


class TestRunTraining:

    def test_zero_iterations_returns_initial(self, small_data):
        X_Q, X_R, _ = small_data
        config = TrainConfig(T=0, seed=4)
        adapter, reverter, log = train_adapter(config, X_Q, X_R)
        expected = initial_state(config, X_Q.dim)
        np.testing.assert_array_equal(adapter.W, expected.W)
        np.testing.assert_array_equal(reverter.V, expected.V)
        assert len(log) == 0

    def test_identity_init_keeps_baseline(self, rng):
        X_Q, X_R = make_set(unit_rows(rng, 60, 10), ViewTag.QUERY, "q"), make_set(unit_rows(rng, 25, 10), ViewTag.REFERENCE)
        adapter, _, _ = train_adapter(TrainConfig(T=0, init_noise=0.0), X_Q, X_R)
        Z_Q, Z_R = adapt(adapter, X_Q), adapt(adapter, X_R)
        np.testing.assert_array_equal(rank(Z_Q, Z_R), rank(X_Q, X_R))
        np.testing.assert_array_equal(
            pseudo_label(Z_Q, Z_R, 0.1).positive, pseudo_label(X_Q, X_R, 0.1).positive
        )

    def test_log_has_one_entry_per_iteration(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        _, _, log = train_adapter(small_train, X_Q, X_R)
        assert [e.iter for e in log.entries] == list(range(12))
        assert all(e.valid_rows > 0 for e in log.entries)

    def test_deterministic(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        config = small_train.model_copy(update={"sample_size": 50})
        a = run_training(config, X_Q, X_R)
        b = run_training(config, X_Q, X_R)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.V, b.V)
        assert _entries_without_time(a.log) == _entries_without_time(b.log)

    def test_reconstruction_only_decreases(self, small_data):
        X_Q, X_R, _ = small_data
        config = TrainConfig(T=40, w_em=0.0, w_re=1.0, lr=0.005, init_noise=0.05, seed=1)
        _, _, log = train_adapter(config, X_Q, X_R)
        first, last = log.entries[0], log.entries[-1]
        assert last.l_re_q + last.l_re_r <= first.l_re_q + first.l_re_r

    def test_training_lowers_contrastive_loss(self, small_data, small_train):
        X_Q, X_R, gt = small_data
        config = small_train.model_copy(update={"iterations": 40})
        adapter, _, log = train_adapter(config, X_Q, X_R)
        assert log.entries[-1].l_em_qr < log.entries[0].l_em_qr
        assert np.all(np.isfinite(adapter.W))
        report = evaluate(adapt(adapter, X_Q), adapt(adapter, X_R), gt)
        assert 0.0 <= report.recall["1"] <= 1.0

    def test_resume_matches_uninterrupted(self, tmp_path, small_data):
        """Чекпоинт на t=30 из 60, продолжение -> те же параметры, что и без остановки."""
        X_Q, X_R, _ = small_data
        config = TrainConfig(T=60, M=60, lr=0.01, seed=8)

        def checkpoint_at_30(state):
            if state.iteration == 30:
                save_checkpoint(state, tmp_path / "ckpt")

        full = run_training(config, X_Q, X_R, on_iteration=checkpoint_at_30)
        restored = load_checkpoint(tmp_path / "ckpt", config, X_Q.dim)
        assert restored.iteration == 30 and len(restored.log) == 30
        resumed = run_training(config, X_Q, X_R, state=restored)

        np.testing.assert_array_equal(resumed.W, full.W)
        np.testing.assert_array_equal(resumed.V, full.V)
        assert resumed.adam_theta.t == full.adam_theta.t == 60
        assert _entries_without_time(resumed.log) == _entries_without_time(full.log)

    def test_residual_arch(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        adapter, _, _ = train_adapter(small_train.model_copy(update={"arch": Arch.RESIDUAL}), X_Q, X_R)
        assert adapter.arch == Arch.RESIDUAL and adapter.W.shape == (16, 16)

    def test_reduced_dimension(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        adapter, reverter, _ = train_adapter(small_train.model_copy(update={"d": 8}), X_Q, X_R)
        assert adapter.W.shape == (8, 16) and reverter.V.shape == (16, 8)

    def test_ground_truth_labels(self, small_data, small_train):
        X_Q, X_R, gt = small_data
        config = small_train.model_copy(update={"label_source": LabelSource.GROUND_TRUTH})
        _, _, log = train_adapter(config, X_Q, X_R, gt)
        assert all(e.valid_rows == len(X_Q) for e in log.entries)

    def test_ground_truth_required(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        config = small_train.model_copy(update={"label_source": LabelSource.GROUND_TRUTH})
        with pytest.raises(FeatureValidationException, match="ground truth"):
            train_adapter(config, X_Q, X_R)

    def test_collapse(self, small_data):
        X_Q, X_R, _ = small_data
        config = TrainConfig(T=20, threshold=1.5, collapse_patience=5)
        with pytest.raises(TrainingCollapseException, match="collapsed"):
            train_adapter(config, X_Q, X_R)

    def test_collapse_keeps_partial_state(self, small_data):
        X_Q, X_R, _ = small_data
        config = TrainConfig(T=20, threshold=1.5, collapse_patience=3)
        with pytest.raises(TrainingCollapseException) as caught:
            run_training(config, X_Q, X_R)
        partial = caught.value.state
        assert partial.iteration == 4
        assert [e.iter for e in partial.log.entries] == [0, 1, 2, 3]
        assert all(e.valid_rows == 0 for e in partial.log.entries)

    def test_degenerate_adapter_aborts_training(self, small_data, small_train):
        X_Q, X_R, _ = small_data
        broken = TrainState(W=np.zeros((16, 16)), V=np.eye(16), arch=Arch.PLAIN)
        with pytest.raises(GradientBlowUpException, match="degenerate adapted vector") as caught:
            run_training(small_train, X_Q, X_R, state=broken)
        assert caught.value.state.iteration == 0


class TestCheckpoint:

    def test_round_trip(self, tmp_path, small_data, small_train):
        X_Q, X_R, _ = small_data
        state = run_training(small_train, X_Q, X_R)
        save_checkpoint(state, tmp_path)
        assert {p.name for p in tmp_path.iterdir()} == {"adapter.cvad", "train_state.npz", "train_log.csv"}

        loaded = load_checkpoint(tmp_path, small_train, X_Q.dim)
        np.testing.assert_array_equal(loaded.W, state.W)
        np.testing.assert_array_equal(loaded.adam_theta.m["W"], state.adam_theta.m["W"])
        np.testing.assert_array_equal(loaded.adam_phi.v["V"], state.adam_phi.v["V"])
        assert loaded.iteration == state.iteration

    def test_corrupt_state(self, tmp_path, small_data, small_train):
        X_Q, X_R, _ = small_data
        save_checkpoint(run_training(small_train.model_copy(update={"iterations": 2}), X_Q, X_R), tmp_path)
        (tmp_path / "train_state.npz").write_bytes(b"garbage")
        with pytest.raises(CheckpointException, match="corrupt checkpoint"):
            load_checkpoint(tmp_path, small_train, X_Q.dim)

    def test_altered_dimension(self, tmp_path, small_data, small_train):
        X_Q, X_R, _ = small_data
        save_checkpoint(run_training(small_train.model_copy(update={"iterations": 2}), X_Q, X_R), tmp_path)
        with pytest.raises(CheckpointException, match="do not match"):
            load_checkpoint(tmp_path, small_train.model_copy(update={"d": 8}), X_Q.dim)

    def test_missing_state(self, tmp_path, small_train):
        with pytest.raises(CheckpointException):
            load_checkpoint(tmp_path, small_train, 16)

    def test_state_file_is_byte_stable(self, tmp_path, small_data, small_train):
        X_Q, X_R, _ = small_data
        state = run_training(small_train.model_copy(update={"iterations": 3}), X_Q, X_R)
        save_checkpoint(state, tmp_path / "a")
        save_checkpoint(state, tmp_path / "b")

        assert (tmp_path / "a" / "train_state.npz").read_bytes() == (tmp_path / "b" / "train_state.npz").read_bytes()
        with zipfile.ZipFile(tmp_path / "a" / "train_state.npz") as archive:
            assert {info.date_time for info in archive.infolist()} == {NPZ_DATE_TIME}


def test_ablation_table(small_synth):
    frame = run_ablation(small_synth, TrainConfig(T=3, lr=0.01), seeds=[1, 2])
    assert list(frame.columns) == ABLATION_COLUMNS
    assert frame["config"].tolist() == list(ABLATION_CONFIGS) * 2
    assert frame["seed"].tolist() == [1] * 5 + [2] * 5
    assert frame[["r1", "r5", "r10"]].apply(lambda col: col.between(0, 1)).all().all()
