"""Fusion of hyperspectral and multispectral images that differ by inter-image variability.

Subpackages and modules
-----------------------
imaging    image containers, sensor operators, simulation helpers
optimizer  reweighted block-coordinate fusion solver
denoiser   zero-shot separable CNN denoiser with hand-written gradients
metrics    PSNR, SAM, ERGAS and UIQI
io         HSC cube files, YAML run configs, composites, reports
cli        the ``varfusion`` command
"""
__version__ = "0.1.0"

from .imaging import (  # noqa: E402
    DimensionError,
    GradientOperator,
    HyperImage,
    SensorModel,
    simulate_pair,
    synthetic_scene,
)
from .metrics import MetricReport, evaluate  # noqa: E402
from .optimizer import FusionConfig, bicubic_baseline, run_fusion  # noqa: E402

__all__ = [
    "DimensionError", "FusionConfig", "GradientOperator", "HyperImage", "MetricReport",
    "SensorModel", "bicubic_baseline", "evaluate", "run_fusion", "simulate_pair",
    "synthetic_scene", "__version__",
]
