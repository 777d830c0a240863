"""Bidirectional conditional diffusion for low-light image enhancement."""

from .config import Config
from .correction import ReflectionAwareCorrection, RetinexDecomposition, retinex_decompose
from .dataset import (
    DegradationParams,
    PairedDirDataset,
    PairedSample,
    degrade,
    load_paired_dir,
    make_synthetic_set,
    synthesize_source_images,
)
from .diffusion import (
    DiffusionSample,
    NoiseSchedule,
    estimate_x0,
    forward_diffuse,
    make_schedule,
    sample,
    to_core,
    to_unit,
)
from .losses import (
    FeaturePyramid,
    LossWeights,
    content_loss,
    diffusion_loss,
    make_eps_bar,
    ssim,
    total_loss,
)
from .metrics import EvalReport, evaluate_dirs, psnr
from .network import PATH_H2L, PATH_L2H, BidirectionalUNet, NetworkConfig
from .pipeline import (
    TrainState,
    degrade_demo,
    enhance,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

__version__ = "0.1.0"
