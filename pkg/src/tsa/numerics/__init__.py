from tsa.numerics.tensor import (
    Tape,
    Tensor,
    add,
    add_rowvec,
    backward,
    col_mean,
    exp,
    gather_rows,
    grad_of,
    log,
    log_softmax,
    matmul,
    mul,
    mul_rowvec,
    neg,
    param,
    powc,
    relu,
    reshape,
    row_mean,
    sadd,
    scale_rows,
    scatter_add_rows,
    sigmoid,
    smul,
    softmax,
    sparse_matmul,
    sub,
    take_per_row,
    tanh,
    tensor,
    tmean,
    tsum,
)
from tsa.numerics.optim import AdamState, adam_step

__all__ = [
    "Tape", "Tensor", "tensor", "param", "backward", "grad_of",
    "matmul", "add", "sub", "mul", "neg", "smul", "sadd",
    "add_rowvec", "mul_rowvec", "scale_rows",
    "relu", "tanh", "sigmoid", "exp", "log", "powc",
    "softmax", "log_softmax", "tsum", "tmean", "col_mean", "row_mean",
    "reshape", "gather_rows", "scatter_add_rows", "take_per_row", "sparse_matmul",
    "AdamState", "adam_step",
]
