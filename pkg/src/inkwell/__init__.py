"""inkwell: visible neural-network watermarking through weight-shared
transposed model training.

The toolkit embeds human-recognizable secret images into all parameters of
a classifier: a transposed (layer-reversed) graph that shares every weight
with the forward model is trained to map secret keys to secret images, and
constraint training keeps both objectives satisfied. Extraction is a plain
eval pass of the keys through the transposed graph, so verification needs
no gradient access and survives common model-theft transformations.
"""
from . import ops  # installs Tensor arithmetic dunders
from .autograd import Tape, Tensor, backward, no_recording, recording, set_debug_checks
from .graph import (
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool,
    ModelSpec,
    ReLU,
    Residual,
    build_forward,
    capture_frozen_branch,
    default_cnn,
    default_cnn_bn,
    fc_net,
    forward_eval,
    init_params,
    restore_last_layer,
    swap_last_layer,
    tiny_residual_net,
    transpose_model,
)
from .metrics import accuracy, ber, mse, mse_value, ssim, ssim_per_image, ssim_value
from .optim import Adam, SGD, grad_check
from .params import ParameterStore, load_checkpoint, save_checkpoint
from .watermark import (
    Watermark,
    WatermarkKey,
    WatermarkSecret,
    constraint_train,
    extract,
    generate_keys,
    harden,
    load_keys,
    save_keys,
    text_secret,
    verify,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BatchNorm",
    "Conv2d",
    "Dropout",
    "Flatten",
    "Linear",
    "MaxPool",
    "ModelSpec",
    "ParameterStore",
    "ReLU",
    "Residual",
    "SGD",
    "Tape",
    "Tensor",
    "Watermark",
    "WatermarkKey",
    "WatermarkSecret",
    "accuracy",
    "backward",
    "ber",
    "build_forward",
    "capture_frozen_branch",
    "constraint_train",
    "default_cnn",
    "default_cnn_bn",
    "extract",
    "fc_net",
    "forward_eval",
    "generate_keys",
    "grad_check",
    "harden",
    "init_params",
    "load_checkpoint",
    "load_keys",
    "mse",
    "mse_value",
    "no_recording",
    "ops",
    "recording",
    "restore_last_layer",
    "save_checkpoint",
    "save_keys",
    "set_debug_checks",
    "ssim",
    "ssim_per_image",
    "ssim_value",
    "swap_last_layer",
    "text_secret",
    "tiny_residual_net",
    "transpose_model",
    "verify",
]
