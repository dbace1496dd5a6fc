from .config import PipelineConfig, default_config, load_config
from .stages import (
    pretrain_segmentor, run_generate, run_metrics, run_prepare, run_refine,
    run_train_dm, sweep_lambda,
)
