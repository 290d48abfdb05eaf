from . import ops
from .gradcheck import check_grads, max_rel_error, numeric_grad
from .optim import OptimState, adamw_step, cosine_warmup_lr
from .tape import NonScalarLoss, Var, as_var, backward

__all__ = [
    "ops",
    "Var",
    "as_var",
    "backward",
    "NonScalarLoss",
    "OptimState",
    "adamw_step",
    "cosine_warmup_lr",
    "check_grads",
    "numeric_grad",
    "max_rel_error",
]
