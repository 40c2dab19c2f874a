"""Time-frequency conditional Granger causality from time-varying AR models.

Coefficients of time-varying autoregressive models are expanded onto B-spline
multiwavelets and identified by forward orthogonal regression; the fitted
models are turned into conditional causality maps over time and frequency.
"""

from .basis import build_dictionary, build_test_bank
from .cgc import TFCGCMap, conditional_gc, net_causal_flow
from .pipeline import PipelineConfig, SystemFit, estimate_tfcgc, run_bench, significance_threshold
from .selection import SelectionConfig, forward_select, rls_fit
from .simkit import ScenarioConfig, generate, score, theoretical_tfcgc
from .tvarx import Design, ModelSpec, TrialSet, modulate

__version__ = "0.1.0"

__all__ = [
    "Design",
    "ModelSpec",
    "PipelineConfig",
    "ScenarioConfig",
    "SelectionConfig",
    "SystemFit",
    "TFCGCMap",
    "TrialSet",
    "build_dictionary",
    "build_test_bank",
    "conditional_gc",
    "estimate_tfcgc",
    "forward_select",
    "generate",
    "modulate",
    "net_causal_flow",
    "rls_fit",
    "run_bench",
    "score",
    "significance_threshold",
    "theoretical_tfcgc",
]
