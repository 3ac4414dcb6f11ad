import numpy as np
import pytest

from app.featstore import l2_normalize_rows
from app.models import FeatureSet, SynthConfig, TrainConfig, ViewTag
from app.synthbench import generate


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return l2_normalize_rows(rng.standard_normal((n, d)))


def make_set(vectors: np.ndarray, view: ViewTag = ViewTag.QUERY, prefix: str = "r") -> FeatureSet:
    ids = [f"{prefix}{i:04d}" for i in range(vectors.shape[0])]
    return FeatureSet(view=view, ids=ids, vectors=vectors, normalized=True)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_synth() -> SynthConfig:
    return SynthConfig(
        num_scenes=40,
        queries_per_scene=3,
        eval_queries_per_scene=2,
        d0=16,
        noise_sigma=0.05,
        view_gap="rotation",
        rotation_strength=0.5,
        style_offset=0.2,
        seed=11,
    )


@pytest.fixture
def small_data(small_synth):
    return generate(small_synth, "train")


@pytest.fixture
def small_train() -> TrainConfig:
    return TrainConfig(T=12, tau=0.1, lr=0.01, seed=5)
