from .tensor import (Tensor, ShapeError, add, sub, mul, div, neg, exp, log, tanh, sigmoid,
                     relu, leaky_relu, square, tsum, mean, reshape, transpose, swapaxes,
                     getitem, concat, matmul, slogdet, inv, softmax, mse, conv2d,
                     conv_transpose2d, batch_norm, no_grad, precision, default_dtype)
from .nn import Module, Linear, Conv2d, ConvTranspose2d, BatchNorm
from .optim import Adam, adam_step
from .checkpoint import save_arrays, load_arrays, module_arrays, load_module_arrays
