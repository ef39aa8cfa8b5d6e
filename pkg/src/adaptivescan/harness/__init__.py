"""Run orchestration: configuration, training stages, evaluation, CLI."""

from .config import (ENERGY_MODELS, EnergyModel, RunConfig, energy_report,
                     load_config, output_root, save_config)
from .evaluation import (aggregate, compare_baselines, evaluate,
                         energy_from_rows, write_aggregate_csv,
                         write_metrics_csv)
from .gradchecks import TOLERANCE, run_all
from .model import (Pipeline, build_pipeline, buffer_frame, camera_view,
                    head_from_queries, load_pipeline, named_parameters,
                    predict_mask, query_centers, run_detector, save_pipeline,
                    set_requires_grad, sparse_scan)
from .training import (mask_sensing_gradient, pretrain, train_stage1,
                       train_stage2, train_stage3, write_history)

__all__ = [
    "ENERGY_MODELS", "EnergyModel", "RunConfig", "energy_report",
    "load_config", "output_root", "save_config",
    "aggregate", "compare_baselines", "evaluate", "energy_from_rows",
    "write_aggregate_csv", "write_metrics_csv",
    "TOLERANCE", "run_all",
    "Pipeline", "build_pipeline", "buffer_frame", "camera_view",
    "head_from_queries", "load_pipeline", "named_parameters", "predict_mask",
    "query_centers", "run_detector", "save_pipeline", "set_requires_grad",
    "sparse_scan",
    "mask_sensing_gradient", "pretrain", "train_stage1", "train_stage2",
    "train_stage3", "write_history",
]
