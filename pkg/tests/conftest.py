import logging

import numpy as np
import pytest
import torch

from diffadapt.pipeline import stages
from diffadapt.pipeline.config import default_config

logging.getLogger("diffadapt").setLevel(logging.WARNING)


def tiny_config(root: str):
    """Scaled-down pipeline config for fast integration tests."""
    cfg = default_config()
    cfg.output_root = str(root)
    cfg.dataset.num_source = 6
    cfg.dataset.num_target_train = 8
    cfg.dataset.num_target_val = 4
    cfg.dm.width = 16
    cfg.dm.cond_channels = 16
    cfg.dm.emb_dim = 32
    cfg.prompt.embed_dim = 32
    cfg.dm.train_steps = 8
    cfg.dm.initial_checkpoint_step = 2
    cfg.dm.accumulation_period = 2
    cfg.dm.micro_batch = 2
    cfg.sampling.ddim_steps = 8
    cfg.sampling.num_s2t = 4
    cfg.sampling.num_prior_final = 3
    cfg.sampling.num_prior_init = 3
    cfg.sampling.batch = 4
    cfg.segmentor.width = 16
    cfg.segmentor.pretrain_steps = 30
    cfg.refine.steps = 6
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_ws(tmp_path_factory):
    """Tiny workspace with every stage artifact materialized once."""
    root = tmp_path_factory.mktemp("tiny_ws")
    cfg = tiny_config(root)
    stages.pretrain_segmentor(cfg)
    stages.run_prepare(cfg)
    stages.run_train_dm(cfg)
    stages.run_generate(cfg, "final", "source_labels")
    stages.run_generate(cfg, "final", "target_prior")
    stages.run_generate(cfg, "initial", "target_prior")
    return cfg


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
