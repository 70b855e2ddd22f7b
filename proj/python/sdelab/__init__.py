"""Score-based diffusion toolkit.

Config dicts use the same keys as the command-line tool; anything omitted takes
the tool's default.
"""

from ._core import (
    DiffusionModel,
    GaussianMixture,
    LearnedScore,
    OracleScore,
    ScoreField,
    SdelabError,
    cli,
    fitted_w2,
    kl_gaussian,
    run_sweep,
    sample,
    sliced_w2,
    train,
    tv_histogram,
    w2_gaussian,
    weighted_esm,
)

__all__ = [
    "DiffusionModel",
    "GaussianMixture",
    "LearnedScore",
    "OracleScore",
    "ScoreField",
    "SdelabError",
    "cli",
    "fitted_w2",
    "kl_gaussian",
    "run_sweep",
    "sample",
    "sliced_w2",
    "train",
    "tv_histogram",
    "w2_gaussian",
    "weighted_esm",
]
