"""diffadapt: label-conditioned toy latent diffusion for cross-weather data
synthesis, plus selective-supervision refinement of a segmentor."""

from .conditions import (
    IGNORE, FrameTooSmallError, LabelMap, MultiScaleBatch, build_multiscale_batch,
    extract_sketch, fuse_labels, one_hot_encode, validate_resolution,
)
from .prompt import apply_prompt_dropout, compose_prompt, label_guidance
from .rcf import RCFConfig, ResidualConditionFusion, rcf_gradcheck
from .diffusion import (
    ControlledDenoiser, DenoiserConfig, LatentCodec, NoiseSchedule, controlled_eps,
    ddim_sample, ddim_step, make_schedule, make_step_schedule, q_sample, training_loss,
)
from .adapt import (
    SelectionMask, ToySegmentor, baseline_loss, build_selection_mask,
    generate_target_prior, masked_cross_entropy, mean_iou, total_uda_loss,
)
from .metrics import (
    FeatureStats, feature_stats, frechet_distance, ms_ssim, perceptual_distance,
    table3_protocol,
)

__version__ = "0.1.0"
