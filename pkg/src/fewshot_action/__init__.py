"""Few-shot video action recognition on synthetic data, built on a minimal
float64 autodiff core: multi-scale feature fusion search, long- and
short-term temporal modeling, and tuple-based prototype matching."""

__version__ = "0.1.0"
