"""Image-specific CNN denoising engine (subspace projection + separable DnCNN)."""
from .engine import (
    SubspaceModel,
    ZeroShotDenoiser,
    channel_sigmas,
    denoise,
    estimate_noise_sigma,
    gradient_check,
    layer_gradient_check,
    make_denoisers,
    subspace_decompose,
)
from .layers import BatchNorm, DepthwiseConv3x3, Pointwise, ReLU, huber_loss, l1_loss
from .network import (
    CheckpointError,
    DenoiserModel,
    TrainConfig,
    checkpoint_bytes,
    dense_param_count,
    load_checkpoint,
    model_from_bytes,
    network_forward,
    save_checkpoint,
    separable_param_count,
    train_zero_shot,
)

__all__ = [
    "BatchNorm", "CheckpointError", "DenoiserModel", "DepthwiseConv3x3", "Pointwise", "ReLU",
    "SubspaceModel", "TrainConfig", "ZeroShotDenoiser", "channel_sigmas", "checkpoint_bytes",
    "dense_param_count", "denoise", "estimate_noise_sigma", "gradient_check", "huber_loss",
    "l1_loss", "layer_gradient_check", "load_checkpoint", "make_denoisers", "model_from_bytes", "network_forward",
    "save_checkpoint", "separable_param_count", "subspace_decompose", "train_zero_shot",
]
