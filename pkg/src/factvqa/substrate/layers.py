"""Layer compositions over the tensor ops: dense layers and the GRU cell.

A :class:`Context` bundles the parameter store with the train/eval mode,
the dropout rate, and the rng stream, because the convention here is that
dropout sits in front of every linear transformation while training.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from .params import ParameterStore
from .tensor import Tensor, add, dropout, matmul, mul, neg, sigmoid, tanh


class Context:
    """Forward-pass environment: parameters, mode, dropout stream."""

    def __init__(self, store: ParameterStore, train: bool = False,
                 dropout_p: float = 0.0, rng: np.random.Generator | None = None):
        self.store = store
        self.train = train
        self.dropout_p = dropout_p
        self.rng = rng
        if train and dropout_p > 0.0 and rng is None:
            raise DimensionError("train-mode dropout needs an rng")

    def param(self, name: str, shape: tuple | None = None) -> Tensor:
        return self.store.tensor(name, shape)

    def drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.dropout_p, self.rng, self.train)


def linear(ctx: Context, name: str, x: Tensor, out_dim: int, in_dim: int) -> Tensor:
    """y = W x + b with dropout applied to x in train mode.

    Raises a dimension error naming the parameter when shapes disagree.
    """
    if x.data.shape != (in_dim,):
        raise DimensionError(
            f"linear {name!r} expects input of shape ({in_dim},), got {x.data.shape}"
        )
    w = ctx.param(f"{name}.w", (out_dim, in_dim))
    b = ctx.param(f"{name}.b", (out_dim,))
    return add(matmul(w, ctx.drop(x)), b)


def gru_step(ctx: Context, prefix: str, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One gated recurrent update.

    r = sigmoid(W_r x + U_r h + b_r)
    z = sigmoid(W_z x + U_z h + b_z)
    cand = tanh(W_h x + U_h (r*h) + b_h)
    h' = (1-z)*h + z*cand
    """
    def gate(tag, h_in):
        w = ctx.param(f"{prefix}.w_{tag}")
        u = ctx.param(f"{prefix}.u_{tag}")
        b = ctx.param(f"{prefix}.b_{tag}")
        if w.data.shape[1] != x_t.data.shape[0] or u.data.shape[1] != h_prev.data.shape[0]:
            raise DimensionError(
                f"gru {prefix!r} gate {tag}: weights {w.data.shape}/{u.data.shape} "
                f"do not accept x {x_t.data.shape}, h {h_prev.data.shape}"
            )
        return add(add(matmul(w, x_t), matmul(u, h_in)), b)

    r = sigmoid(gate("r", h_prev))
    z = sigmoid(gate("z", h_prev))
    cand = tanh(gate("h", mul(r, h_prev)))
    one_minus_z = add(Tensor(np.ones_like(z.data)), neg(z))
    return add(mul(one_minus_z, h_prev), mul(z, cand))
