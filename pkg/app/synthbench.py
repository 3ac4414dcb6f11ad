"""
Детерминированный генератор синтетических кросс-видовых признаков с известной разметкой.

Поток случайных чисел канонический: матрица вида, смещение стиля, сцены, шум референсов,
шум обучающих запросов, шум отложенных запросов - всегда в этом порядке и всегда целиком,
поэтому обе части разбиения берутся из одного и того же потока.
"""
import json
import logging
from pathlib import Path
from typing import List, Literal, Tuple, Union

import numpy as np

from app.constants import SYNTH_PRESETS
from app.featstore import l2_normalize_rows, save_feature_set, save_geo_tags
from app.models import FeatureSet, GeoTag, GroundTruth, SynthConfig, ViewGap, ViewTag
from app.retrieval import save_ground_truth

logger = logging.getLogger(__name__)

Split = Literal["train", "eval"]


def preset(name: str) -> SynthConfig:
    key = name.upper()
    if key not in SYNTH_PRESETS:
        raise ValueError(f"unknown synthetic preset {name!r}; known: {sorted(SYNTH_PRESETS)}")
    return SynthConfig(**SYNTH_PRESETS[key])


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _draw_view(rng: np.random.Generator, config: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    d0 = config.d0
    if config.view_gap == ViewGap.ROTATION:
        # преобразование Кэли кососимметричной матрицы - ортогональная матрица с углами 2·arctan(ρλ)
        g = rng.standard_normal((d0, d0))
        K = config.rotation_strength * (g - g.T) / np.sqrt(2.0 * d0)
        eye = np.eye(d0)
        A = np.linalg.solve(eye - K, eye + K)
    elif config.view_gap == ViewGap.GENERAL_LINEAR:
        U = _random_orthogonal(rng, d0)
        Vt = _random_orthogonal(rng, d0).T
        half = 0.5 * np.log(config.kappa_max)
        spectrum = np.exp(rng.uniform(-half, half, size=d0))
        A = (U * spectrum) @ Vt
    else:
        A = np.eye(d0)

    b = rng.standard_normal(d0)
    b = config.style_offset * b / np.linalg.norm(b)
    return A, b


def view_transform(config: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Матрица вида запросов A_Q и смещение стиля b, как их видит generate"""
    return _draw_view(np.random.default_rng(config.seed), config)


def _scene_ids(config: SynthConfig) -> List[str]:
    return [f"scene_{s:05d}" for s in range(config.num_scenes)]


def generate(config: SynthConfig, split: Split = "train") -> Tuple[FeatureSet, FeatureSet, GroundTruth]:
    """
    Returns:
        (X_Q, X_R, gt): запросы выбранной части, референсы (по одному на сцену) и разметку запрос -> сцена
    """
    rng = np.random.default_rng(config.seed)
    S, d0, sigma = config.num_scenes, config.d0, config.noise_sigma

    A, b = _draw_view(rng, config)
    latent = l2_normalize_rows(rng.standard_normal((S, d0)))
    ref_noise = rng.standard_normal((S, d0))
    train_noise = rng.standard_normal((S, config.queries_per_scene, d0))
    eval_noise = rng.standard_normal((S, config.eval_queries_per_scene, d0))

    references = l2_normalize_rows(latent + sigma * ref_noise)

    noise, prefix = (train_noise, "q") if split == "train" else (eval_noise, "e")
    per_scene = noise.shape[1]
    if per_scene == 0:
        raise ValueError(f"split {split!r} has no queries in this config")

    clean = latent @ A.T + b
    queries = l2_normalize_rows((clean[:, None, :] + sigma * noise).reshape(S * per_scene, d0))

    query_ids = [f"{prefix}_{s:05d}_{k:02d}" for s in range(S) for k in range(per_scene)]
    gt = GroundTruth(relevant=[[s] for s in range(S) for _ in range(per_scene)], num_refs=S)

    X_Q = FeatureSet(view=ViewTag.QUERY, ids=query_ids, vectors=queries.astype(np.float32), normalized=True)
    X_R = FeatureSet(view=ViewTag.REFERENCE, ids=_scene_ids(config), vectors=references.astype(np.float32), normalized=True)
    return X_Q, X_R, gt


def geo_tags(config: SynthConfig) -> List[GeoTag]:
    """Синтетические GPS-метки сцен из отдельного потока, не затрагивающего признаки"""
    rng = np.random.default_rng([config.seed, 1])
    lat = rng.uniform(-60.0, 60.0, size=config.num_scenes)
    lon = rng.uniform(-180.0, 180.0, size=config.num_scenes)
    return [GeoTag(id=sid, lat=float(la), lon=float(lo)) for sid, la, lo in zip(_scene_ids(config), lat, lon)]


def write_benchmark(config: SynthConfig, out_dir: Union[str, Path]) -> List[Path]:
    """Файлы CVFT запросов/референсов, CSV разметки, геометки и JSON-манифест конфигурации"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    X_Q, X_R, gt = generate(config, "train")
    written = [out_dir / "queries.cvft", out_dir / "references.cvft", out_dir / "gt.csv"]
    save_feature_set(X_Q, written[0])
    save_feature_set(X_R, written[1])
    save_ground_truth(gt, X_Q.ids, X_R.ids, written[2])

    if config.eval_queries_per_scene:
        X_E, _, gt_eval = generate(config, "eval")
        written += [out_dir / "queries_eval.cvft", out_dir / "gt_eval.csv"]
        save_feature_set(X_E, written[-2])
        save_ground_truth(gt_eval, X_E.ids, X_R.ids, written[-1])

    written.append(out_dir / "geo.csv")
    save_geo_tags(geo_tags(config), written[-1])

    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    written.append(manifest)

    logger.info("Synthetic benchmark: %d scenes, %d train queries -> %s", config.num_scenes, len(X_Q), out_dir)
    return written
