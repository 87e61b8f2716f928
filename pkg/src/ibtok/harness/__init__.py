from .config import ConfigError, ModelArch, TrainConfig, config_from_dict, dump_config, load_config
from .sweep import SweepEntry, SweepResult, parse_grid, sweep
from .train import (
    METRIC_COLUMNS,
    MetricsRecord,
    TrainingAbort,
    TrainResult,
    converged,
    nuisance_probe_error,
    probe,
    report_cka,
    run_training,
    train,
)
