"""Training recurrent models by extended Kalman filtering, with gradient
baselines and offset-free nonlinear MPC on the trained models."""

from .data import Dataset, Scaling, bfr, accuracy, gen_binary_linear, gen_nonlinear_benchmark
from .ekf import EkfConfig, EkfState, train, zero_fraction
from .errors import EkfRnnError
from .gd import train_gd
from .models import LstmSpec, RnnSpec, init_params, load_model, save_model, simulate
from .objectives import CrossEntropyLoss, CustomLoss, L1Reg, L2Reg, MSELoss, SeparablePsi

__version__ = "0.1.0"

__all__ = [
    "CrossEntropyLoss",
    "CustomLoss",
    "Dataset",
    "EkfConfig",
    "EkfRnnError",
    "EkfState",
    "L1Reg",
    "L2Reg",
    "LstmSpec",
    "MSELoss",
    "RnnSpec",
    "Scaling",
    "SeparablePsi",
    "accuracy",
    "bfr",
    "gen_binary_linear",
    "gen_nonlinear_benchmark",
    "init_params",
    "load_model",
    "save_model",
    "simulate",
    "train",
    "train_gd",
    "zero_fraction",
]
