"""B-cos networks with PH(n) and quaternion-like layers on a small numpy autodiff core."""

from .autograd import Tensor, no_grad
from .bcos import BcosConv2d, bcos_forward
from .data import encode_six_channel, load_image_folder, pad_quaternion, synth_shapes
from .evaluation import accuracy, build_grids, grad_cam, pointing_game
from .explain import collapse_rows, contribution_map, decode_color
from .hypercomplex import PhWeightSpec, assemble_ph_weight, hamilton_product, kronecker
from .models import BcosNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, preset, train

__version__ = "0.1.0"

__all__ = [
    "BcosConv2d", "BcosNet", "ModelConfig", "PhWeightSpec", "Tensor", "TrainConfig",
    "accuracy", "assemble_ph_weight", "bcos_forward", "build_grids", "build_model",
    "collapse_rows", "contribution_map", "decode_color", "encode_six_channel", "grad_cam",
    "hamilton_product", "kronecker", "load_checkpoint", "load_image_folder", "no_grad",
    "pad_quaternion", "pointing_game", "preset", "save_checkpoint", "synth_shapes", "train",
]
