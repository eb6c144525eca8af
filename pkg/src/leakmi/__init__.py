"""Mutual-information estimation and information-leakage detection.

Estimate how much a dataset's features reveal about its labels, and decide
whether a system leaks by testing those estimates across cross-validation
folds and the best-performing classifiers.
"""

__version__ = "0.1.0"

from .calibrate import Calibrator, apply_calibrator, fit_calibrator
from .data import ConfusionMatrix, Dataset, SplitPlan, class_marginal, entropy_bits, load_csv
from .detect import DetectionReport, IldConfig, IldDataset, evaluate_ild, nmae, run_ild
from .miest import (
    EntropyBounds,
    MiEstimate,
    cond_entropy_bounds,
    mi_gmm,
    mi_logloss,
    mi_midpoint,
    mi_mine,
    mi_pcsoftmax,
)
from .stats import aggregate_pvalues, corrected_paired_ttest, fisher_exact, holm_bonferroni, ott_pvalue
from .synth import GroundTruthModel, SynthConfig, generate_system, ground_truth_mi, posterior

__all__ = [
    "Dataset", "ConfusionMatrix", "SplitPlan", "class_marginal", "entropy_bits", "load_csv",
    "SynthConfig", "GroundTruthModel", "generate_system", "posterior", "ground_truth_mi",
    "Calibrator", "fit_calibrator", "apply_calibrator",
    "MiEstimate", "EntropyBounds", "cond_entropy_bounds", "mi_midpoint", "mi_logloss",
    "mi_gmm", "mi_mine", "mi_pcsoftmax",
    "ott_pvalue", "corrected_paired_ttest", "fisher_exact", "holm_bonferroni", "aggregate_pvalues",
    "IldConfig", "DetectionReport", "IldDataset", "run_ild", "evaluate_ild", "nmae",
]
