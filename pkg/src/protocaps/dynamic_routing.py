"""Iterative dynamic routing baseline.

The classic agreement loop: every lower capsule casts one vote per upper
capsule through its own transformation matrix, so the pass materializes the
full [m, n, d] vote tensor — the memory cost the prototype router avoids.
Kept as the comparison point for accuracy, FLOPs and routing memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .proto_routing import CapsuleState


def predict(weights: Tensor, lower_poses: Tensor) -> Tensor:
    """Votes u_hat[..., i, j, :] = W[i, j] @ pose_i.

    ``weights`` is [m, n, d, d_in]; poses are [..., m, d_in]. The result is
    the [..., m, n, d] vote tensor — exactly m*n*d elements per sample.
    """
    if weights.ndim != 4:
        raise T.ShapeError(f"predict: weights must be [m, n, d, d_in], got "
                           f"{weights.shape}")
    m, n, d, d_in = weights.shape
    if lower_poses.shape[-1] != d_in or lower_poses.shape[-2] != m:
        raise T.ShapeError(f"predict: poses {lower_poses.shape} do not match "
                           f"weights {weights.shape}")
    cols = T.reshape(lower_poses, lower_poses.shape[:-1] + (1, d_in, 1))
    votes = T.matmul(weights, cols)          # [..., m, n, d, 1]
    return T.reshape(votes, votes.shape[:-4] + (m, n, d))


def squash(s: Tensor) -> Tensor:
    """Norm-compressing nonlinearity, rowwise over the last axis.

    v = (|s|^2 / (1 + |s|^2)) * (s / |s|), computed as s * |s| / (1 + |s|^2)
    so a zero row maps to zero without dividing by zero. Output norms are
    always strictly below 1.
    """
    nsq = T.reduce_sum(s * s, axis=-1, keepdims=True)
    norm = T.sqrt(nsq)
    return s * (norm / (1.0 + nsq))


@dataclass
class RoutingState:
    """Final iteration of the agreement loop."""

    logits: Tensor      # [..., m, n] accumulated agreements
    coupled: Tensor     # [..., m, n] row-softmaxed coupling coefficients
    s: Tensor           # [..., n, d] weighted vote sums
    v: Tensor           # [..., n, d] squashed outputs
    iterations: int


def dynamic_route(votes: Tensor, iterations: int) -> RoutingState:
    """Run the agreement loop for a fixed number of iterations.

    Logits start at zero (equal coupling); each iteration softmaxes them
    rowwise, mixes the votes, squashes, and adds the vote/output dot
    products back onto the logits.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    m, n, d = votes.shape[-3:]
    lead = votes.shape[:-3]
    logits = Tensor(np.zeros(lead + (m, n), dtype=votes.dtype))
    votes_t = T.transpose(votes, tuple(range(votes.ndim - 3)) +
                          (votes.ndim - 2, votes.ndim - 3, votes.ndim - 1))
    coupled = s = v = None
    for _ in range(iterations):
        coupled = T.softmax_rows(logits)
        ct = T.reshape(T.swap_last2(coupled), lead + (n, 1, m))
        s = T.reshape(T.matmul(ct, votes_t), lead + (n, d))
        v = squash(s)
        vcol = T.reshape(v, lead + (n, d, 1))
        agree = T.reshape(T.matmul(votes_t, vcol), lead + (n, m))
        logits = logits + T.swap_last2(agree)
    return RoutingState(logits=logits, coupled=coupled, s=s, v=v,
                        iterations=iterations)


def vector_norms(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis."""
    return T.sqrt(T.reduce_sum(x * x, axis=-1))


@dataclass
class DynamicRoutingLayer:
    """Network-facing wrapper: per-pair weights plus the agreement loop.

    Activations of the routed layer are the output vector lengths, the
    usual length-as-presence semantics of dynamic routing.
    """

    weights: Tensor     # [m, n, d, d_in]
    iterations: int = 3

    @classmethod
    def create(cls, m, n, d_in, d_out, rng, iterations=3,
               dtype=np.float64):
        scale = 1.0 / np.sqrt(d_in)
        data = rng.normal(0.0, scale, size=(m, n, d_out, d_in)).astype(dtype)
        return cls(Tensor(data, requires_grad=True), iterations)

    @property
    def m(self):
        return self.weights.shape[0]

    @property
    def n(self):
        return self.weights.shape[1]

    @property
    def d_in(self):
        return self.weights.shape[3]

    @property
    def d_out(self):
        return self.weights.shape[2]

    def describe(self, m=None):
        return {
            "kind": "dynamic",
            "m": self.m,
            "n": self.n,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "iterations": self.iterations,
        }

    def named_params(self, prefix):
        return {f"{prefix}.weights": self.weights}

    def route(self, lower: CapsuleState) -> CapsuleState:
        votes = predict(self.weights, lower.poses)
        state = dynamic_route(votes, self.iterations)
        return CapsuleState(state.v, vector_norms(state.v))
