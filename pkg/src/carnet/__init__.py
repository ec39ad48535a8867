"""CarNet crack-detection engine: numpy/Cython layers, training, complexity and ODS/OIS evaluation."""
from .kernels import BACKEND
from .model import CarNet, CarNetConfig, build_carnet, init_params
from .tensor import Rng, Tensor

__all__ = ["BACKEND", "CarNet", "CarNetConfig", "Rng", "Tensor", "build_carnet", "init_params"]
__version__ = "0.1.0"
