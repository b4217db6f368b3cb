from .autodiff import Tensor, concat
from .mlp import NULL, MlpVelocityNet, ParamStore
from .optim import OptimizerState, adamw_step, ema_update

__all__ = [
    "NULL", "MlpVelocityNet", "OptimizerState", "ParamStore", "Tensor",
    "adamw_step", "concat", "ema_update",
]
