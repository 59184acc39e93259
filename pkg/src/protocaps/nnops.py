"""Composite neural building blocks: linear layers, small MLPs, losses, init."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_params(shape, rng, scheme="kaiming_uniform", sigma=None,
                dtype=np.float64) -> Tensor:
    """Draw a trainable tensor.

    ``normal`` samples N(0, sigma^2) per entry; ``kaiming_uniform`` samples
    U(-b, b) with b = sqrt(6 / fan_in), fan_in = prod(shape[1:]). Both are
    deterministic given the generator state.
    """
    shape = tuple(shape)
    if scheme == "normal":
        if sigma is None or sigma <= 0:
            raise ValueError(f"normal init needs sigma > 0, got {sigma}")
        data = rng.normal(0.0, sigma, size=shape)
    elif scheme == "kaiming_uniform":
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=True)


@dataclass
class LinearLayer:
    """Affine map: rows of the input hit weight[out, in] plus bias[out]."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d_in, d_out, rng, dtype=np.float64):
        weight = init_params((d_out, d_in), rng, dtype=dtype)
        bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        return cls(weight, bias)

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    def named_params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """x[..., in] -> x @ W^T + b."""
    if x.shape[-1] != layer.d_in:
        raise T.ShapeError(f"linear_forward: input width {x.shape[-1]} != "
                           f"layer in-extent {layer.d_in}")
    return T.matmul(x, T.transpose(layer.weight)) + layer.bias


@dataclass
class Mlp:
    """Stack of linear layers with relu between them (none after the last)."""

    layers: list

    @classmethod
    def create(cls, widths, rng, dtype=np.float64):
        if len(widths) < 2:
            raise ValueError(f"Mlp needs at least [in, out] widths, got "
                             f"{widths}")
        layers = [LinearLayer.create(widths[i], widths[i + 1], rng, dtype)
                  for i in range(len(widths) - 1)]
        return cls(layers)

    @property
    def d_in(self):
        return self.layers[0].d_in

    @property
    def d_out(self):
        return self.layers[-1].d_out

    @property
    def widths(self):
        return [self.d_in] + [l.d_out for l in self.layers]

    def named_params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.{i}"))
        return out


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    h = x
    for i, layer in enumerate(mlp.layers):
        h = linear_forward(layer, h)
        if i + 1 < len(mlp.layers):
            h = T.relu(h)
    return h


def mlp_forward_rows(mlp: Mlp, x: Tensor) -> Tensor:
    """Apply an MLP to the rows of a tensor with any leading axes."""
    if x.ndim == 2:
        return mlp_forward(mlp, x)
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1]))
    out = mlp_forward(mlp, flat)
    return T.reshape(out, lead + (out.shape[-1],))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], computed via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise T.ShapeError(f"cross_entropy expects [batch, classes], got "
                           f"{logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise T.ShapeError(f"labels shape {labels.shape} does not match "
                           f"batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise IndexError(f"label out of range for {logits.shape[1]} classes")
    m = T.reduce_max(logits, axis=1, keepdims=True)
    lse = T.log(T.reduce_sum(T.exp(logits - m), axis=1)) + \
        T.reshape(m, (logits.shape[0],))
    picked = T.select_labels(logits, labels)
    return T.reduce_mean(lse - picked)
