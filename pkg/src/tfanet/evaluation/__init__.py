from .benchmark import AblationResult, EvalReport, run_ablation, run_benchmark, table_csv
from .metrics import RegionGroundTruth, UndefinedMetricError, auroc, pixel_auroc, spro, spro_area

__all__ = [
    "AblationResult", "EvalReport", "RegionGroundTruth", "UndefinedMetricError", "auroc",
    "pixel_auroc", "run_ablation", "run_benchmark", "spro", "spro_area", "table_csv",
]
