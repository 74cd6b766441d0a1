"""Desk-scale face swapping pipeline.

Images are float32 arrays shaped [N, 3, R, R] with values in [-1, 1].
"""

from ._core import (
    ArgumentError,
    ConfigError,
    Error,
    Generator,
    IoError,
    ShapeError,
    SwapModel,
    check_config,
    cli,
    default_config,
    fid,
    frechet_distance,
    make_corpus,
    ms_ssim,
    num_styles,
    project,
    psnr,
    sample_z,
    set_num_threads,
    split_sizes,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "Error",
    "Generator",
    "IoError",
    "ShapeError",
    "SwapModel",
    "check_config",
    "cli",
    "default_config",
    "fid",
    "frechet_distance",
    "make_corpus",
    "ms_ssim",
    "num_styles",
    "project",
    "psnr",
    "sample_z",
    "set_num_threads",
    "split_sizes",
]
