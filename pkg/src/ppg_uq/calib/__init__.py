from .classification import ece, ece_global, per_class_reports, uce, width_bin_index
from .regression import BivariateHistogram, bivariate_histogram, coverage_curve, ence, equal_population_bins
from .report import BinStats, CalibrationReport
from .stats import mae, pearson_r, performance_metrics, roc_auc

__all__ = [
    "BinStats",
    "BivariateHistogram",
    "CalibrationReport",
    "bivariate_histogram",
    "coverage_curve",
    "ece",
    "ece_global",
    "ence",
    "equal_population_bins",
    "mae",
    "pearson_r",
    "per_class_reports",
    "performance_metrics",
    "roc_auc",
    "uce",
    "width_bin_index",
]
