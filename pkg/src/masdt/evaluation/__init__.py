from masdt.evaluation.metrics import RocCurve, accuracy, auc, roc_auc, roc_curve
from masdt.evaluation.report import EvalResult, emit_report
from masdt.evaluation.saliency import (SaliencyMap, grad_cam, localization_ratio, pooled_ratio, region_means,
                                       region_to_grid, write_pgm)

__all__ = [
    "RocCurve", "accuracy", "auc", "roc_auc", "roc_curve",
    "EvalResult", "emit_report",
    "SaliencyMap", "grad_cam", "localization_ratio", "pooled_ratio", "region_means", "region_to_grid",
    "write_pgm",
]
