"""Minimal float64 tensor engine: ops, reverse-mode autodiff, Adam."""
from .checkpoint import CheckpointError, load_store, read_header, save_store
from .engine import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    embedding,
    gather,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sum,
    transpose,
)
from .gradcheck import finite_difference_check
from .optim import ParameterStore, adam_step

__all__ = [
    "CheckpointError", "ParameterStore", "ShapeError", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "concat", "embedding", "finite_difference_check", "gather", "layer_norm", "load_store",
    "log", "masked_softmax", "matmul", "mean", "mul", "no_grad", "read_header", "relu", "reshape",
    "save_store", "scale", "sum", "transpose",
]
