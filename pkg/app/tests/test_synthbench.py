"""Синтетический бенчмарк: детерминизм, разбиение, существование линейного решения."""

import json

import numpy as np
import pytest

from app.featstore import l2_normalize_rows, load_feature_set
from app.models import FeatureSet, SynthConfig, ViewTag
from app.retrieval import evaluate, load_ground_truth
from app.synthbench import generate, geo_tags, preset, view_transform, write_benchmark


def _undo_view(X_Q: FeatureSet, A: np.ndarray) -> FeatureSet:
    """Строки q = A l + b: умножение справа на A дает Aᵀq для ортогональной A."""
    return X_Q.model_copy(update={"vectors": l2_normalize_rows(X_Q.matrix() @ A)})


class TestGenerate:

    def test_shapes_and_ids(self, small_synth):
        X_Q, X_R, gt = generate(small_synth, "train")
        assert len(X_Q) == 40 * 3 and len(X_R) == 40 and X_Q.dim == 16
        assert X_Q.ids[:4] == ["q_00000_00", "q_00000_01", "q_00000_02", "q_00001_00"]
        assert X_R.ids[0] == "scene_00000"
        assert X_Q.view == ViewTag.QUERY and X_R.view == ViewTag.REFERENCE
        assert X_Q.vectors.dtype == np.float32 and X_Q.normalized and X_R.normalized
        assert gt.relevant[:4] == [[0], [0], [0], [1]]

    def test_eval_split(self, small_synth):
        X_Q, X_R, _ = generate(small_synth, "train")
        X_E, X_R2, gt = generate(small_synth, "eval")
        assert len(X_E) == 40 * 2 and X_E.ids[0] == "e_00000_00"
        np.testing.assert_array_equal(X_R.vectors, X_R2.vectors)
        assert gt.relevant[2] == [1]
        assert not set(X_E.ids) & set(X_Q.ids)

    def test_missing_eval_split(self, small_synth):
        with pytest.raises(ValueError):
            generate(small_synth.model_copy(update={"eval_queries_per_scene": 0}), "eval")

    def test_deterministic(self, small_synth):
        a, b = generate(small_synth), generate(small_synth)
        np.testing.assert_array_equal(a[0].vectors, b[0].vectors)
        np.testing.assert_array_equal(a[1].vectors, b[1].vectors)
        assert not np.array_equal(generate(small_synth.model_copy(update={"seed": 12}))[0].vectors, a[0].vectors)

    def test_no_gap_no_noise_is_perfect(self):
        config = SynthConfig(num_scenes=50, queries_per_scene=2, d0=8, seed=3)
        X_Q, X_R, gt = generate(config)
        assert evaluate(X_Q, X_R, gt).recall["1"] == 1.0

    def test_rotation_is_orthogonal(self, small_synth):
        A, b = view_transform(small_synth)
        np.testing.assert_allclose(A.T @ A, np.eye(16), atol=1e-10)
        assert np.linalg.norm(b) == pytest.approx(0.2, rel=1e-12)

    def test_general_linear_condition_number(self):
        config = SynthConfig(num_scenes=5, queries_per_scene=1, d0=12, view_gap="general_linear", kappa_max=4.0, seed=2)
        A, _ = view_transform(config)
        assert np.linalg.cond(A) <= 4.0 + 1e-9

    def test_inverse_rotation_restores_retrieval(self):
        """Rotation, σ = 0: после Aᵀ все запросы находят свою сцену."""
        config = SynthConfig(
            num_scenes=200, queries_per_scene=2, d0=32, view_gap="rotation", rotation_strength=0.8, seed=5
        )
        X_Q, X_R, gt = generate(config)
        A, _ = view_transform(config)
        assert evaluate(_undo_view(X_Q, A), X_R, gt).recall["1"] == 1.0

    def test_baseline_recall_falls_with_noise(self):
        """Общие случайные числа по сетке σ: R@1 без адаптации не растет с шумом."""
        base = SynthConfig(num_scenes=200, queries_per_scene=2, d0=32, view_gap="none", seed=17)
        values = []
        for sigma in (0.0, 0.05, 0.15, 0.3, 0.6):
            X_Q, X_R, gt = generate(base.model_copy(update={"noise_sigma": sigma}), "train")
            values.append(evaluate(X_Q, X_R, gt).recall["1"])
        assert values[0] == 1.0
        assert values == sorted(values, reverse=True)
        assert values[-1] < values[0]

    def test_no_gap_views_share_distribution(self):
        """Без разрыва видов средние векторов запросов и референсов совпадают с точностью до шума; смещение стиля их разводит."""
        config = SynthConfig(num_scenes=300, queries_per_scene=3, d0=16, noise_sigma=0.05, view_gap="none", seed=23)
        X_Q, X_R, gt = generate(config, "train")
        gap = np.linalg.norm(X_Q.matrix().mean(axis=0) - X_R.matrix().mean(axis=0))
        assert gap < 0.05

        pair_sims = np.einsum("ij,ij->i", X_Q.matrix(), X_R.matrix()[[r[0] for r in gt.relevant]])
        assert pair_sims.mean() > 0.9

        X_S, X_R2, _ = generate(config.model_copy(update={"style_offset": 0.3}), "train")
        assert np.linalg.norm(X_S.matrix().mean(axis=0) - X_R2.matrix().mean(axis=0)) > 0.2


class TestPresetG1:

    def test_preset_values(self):
        config = preset("g1")
        assert (config.num_scenes, config.queries_per_scene, config.eval_queries_per_scene) == (500, 4, 2)
        assert config.d0 == 64 and config.noise_sigma == 0.05 and config.style_offset == 0.3
        assert config.view_gap == "rotation"

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown synthetic preset"):
            preset("G9")

    def test_linear_ceiling(self):
        """Обратный поворот на отложенных запросах G1 дает R@1 ≥ 0.95."""
        config = preset("G1")
        X_E, X_R, gt = generate(config, "eval")
        A, _ = view_transform(config)
        assert evaluate(_undo_view(X_E, A), X_R, gt).recall["1"] >= 0.95


class TestWriteBenchmark:

    def test_files_are_byte_identical(self, tmp_path, small_synth):
        first = write_benchmark(small_synth, tmp_path / "a")
        second = write_benchmark(small_synth, tmp_path / "b")
        assert [p.name for p in first] == [
            "queries.cvft", "references.cvft", "gt.csv", "queries_eval.cvft", "gt_eval.csv", "geo.csv", "manifest.json"
        ]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()

    def test_files_round_trip(self, tmp_path, small_synth):
        write_benchmark(small_synth, tmp_path)
        X_Q, X_R, gt = generate(small_synth)
        loaded_q = load_feature_set(tmp_path / "queries.cvft")
        loaded_r = load_feature_set(tmp_path / "references.cvft")
        np.testing.assert_array_equal(loaded_q.vectors, X_Q.vectors)
        assert load_ground_truth(tmp_path / "gt.csv", loaded_q.ids, loaded_r.ids) == gt
        assert SynthConfig(**json.loads((tmp_path / "manifest.json").read_text())) == small_synth

    def test_geo_tags(self, small_synth):
        tags = geo_tags(small_synth)
        assert [t.id for t in tags] == generate(small_synth)[1].ids
        assert tags == geo_tags(small_synth)
