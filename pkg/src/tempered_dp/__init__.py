"""DP-SGD with tempered-sigmoid activations, written against numpy.

Hot convolution and pooling loops are compiled with numba when it is
installed; set ``TEMPERED_DP_BACKEND=numpy`` to force the pure-numpy path.
"""

from ._kernels import BACKEND
from .accountant import epsilon_for_training, rdp_subsampled_gaussian, solve_noise_multiplier
from .dp import DpSgdConfig, TrainReport, clip_gradient, noisy_aggregate, train
from .nn import (
    TANH_PARAMS,
    Activation,
    TemperedSigmoidParams,
    build_cifar_net,
    build_mnist_net,
    per_example_gradients,
    tempered_sigmoid,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Activation",
    "DpSgdConfig",
    "TANH_PARAMS",
    "TemperedSigmoidParams",
    "TrainReport",
    "build_cifar_net",
    "build_mnist_net",
    "clip_gradient",
    "epsilon_for_training",
    "noisy_aggregate",
    "per_example_gradients",
    "rdp_subsampled_gaussian",
    "solve_noise_multiplier",
    "tempered_sigmoid",
    "train",
]
