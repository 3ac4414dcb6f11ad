FEATURE_MAGIC = b"CVFT"
FEATURE_MAP_MAGIC = b"CVFM"
ADAPTER_MAGIC = b"CVAD"
FORMAT_VERSION = 1
TRAIN_STATE_VERSION = 1
NPZ_DATE_TIME = (1980, 1, 1, 0, 0, 0)

FLAG_NORMALIZED = 0x1

GEM_EPS = 1e-6
GEM_P = 3.0
DEGENERATE_NORM = 1e-12
NORMALIZED_TOL = 1e-5

DEFAULT_TAU = 0.1
DEFAULT_THRESHOLD = 0.1
DEFAULT_LR = 0.001
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS_ADAM = 1e-8
DEFAULT_ITERATIONS = 60
DEFAULT_INIT_NOISE = 0.01
COLLAPSE_PATIENCE = 5

DEFAULT_KS = (1, 5, 10)

TRAIN_LOG_COLUMNS = ["iter", "l_em_qr", "l_em_rq", "l_re_q", "l_re_r", "valid_rows", "ms"]
PSEUDO_LABEL_COLUMNS = ["query_id", "ref_id", "similarity", "valid"]
LOCALIZATION_COLUMNS = ["query_id", "ref_id", "lat", "lon", "similarity"]
HISTOGRAM_COLUMNS = ["bin_lo", "bin_hi", "matched_count", "unmatched_count"]
DELTA_COLUMNS = ["query_id", "delta_sim"]
ABLATION_COLUMNS = ["config", "seed", "r1", "r5", "r10", "mean_ap"]

# Пресеты синтетического бенчмарка
SYNTH_PRESETS = {
    "G1": {
        "num_scenes": 500,
        "queries_per_scene": 4,
        "eval_queries_per_scene": 2,
        "d0": 64,
        "noise_sigma": 0.05,
        "view_gap": "rotation",
        "rotation_strength": 0.8,
        "kappa_max": 1.0,
        "style_offset": 0.3,
        "seed": 42,
    },
    "G2": {
        "num_scenes": 300,
        "queries_per_scene": 4,
        "eval_queries_per_scene": 2,
        "d0": 48,
        "noise_sigma": 0.05,
        "view_gap": "general_linear",
        "rotation_strength": 0.8,
        "kappa_max": 4.0,
        "style_offset": 0.3,
        "seed": 7,
    },
}

ABLATION_CONFIGS = ("baseline", "supervised", "empl", "empl_residual", "empl_aic")
