from .layers import conv2d_forward, pixel_shuffle, pixel_unshuffle, relu
from .network import (ConfigError, Network, NetworkConfig, build_network, count_macs,
                      count_params, rescat_block_params, rescat_forward)
from .tensor import ShapeError, StateError, as_tensor
from .train import PRESETS, AdamState, fit, train_step
from .weights import WeightsFormatError, WeightsValidationError, load_weights, save_weights
