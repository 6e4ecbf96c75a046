from . import tensor as F
from .optim import AdamState, adam_step
from .pca import PcaModel, fit_pca, pca_inverse, pca_transform
from .tensor import ShapeError, Tensor

__all__ = [
    "AdamState",
    "F",
    "PcaModel",
    "ShapeError",
    "Tensor",
    "adam_step",
    "fit_pca",
    "pca_inverse",
    "pca_transform",
]
