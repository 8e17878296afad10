from .config import ConfigError, PipelineConfig, PromptConfig, Toggles
from .evaluate import EvalRow, MetricsTable, evaluate
from .report import QueryRecord, RunReport, aggregate
from .run import PipelineError, run, run_selection
from .synthetic import make_synthetic_dataset

__all__ = [
    "ConfigError", "EvalRow", "MetricsTable", "PipelineConfig", "PipelineError",
    "PromptConfig", "QueryRecord", "RunReport", "Toggles", "aggregate", "evaluate",
    "make_synthetic_dataset", "run", "run_selection",
]
