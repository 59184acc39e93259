"""Non-iterative prototype routing between capsule layers.

Lower-capsule poses are projected once into a shared subspace, scored
against one trainable prototype per upper capsule, and mixed by the
row-softmaxed score matrix. A single similarity computation and a single
softmax happen per call; there is no refinement loop, and no per-(lower,
upper) vote tensor is ever materialized.

Reductions over the lower-capsule axis run in a canonical order (lower
capsules are sorted by pose bytes before the mixing step), which makes the
layer's output an exact function of the *set* of lower capsules: permuting
them changes nothing, bit for bit, when the residual path is off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .nnops import LinearLayer, Mlp, init_params, linear_forward, \
    mlp_forward_rows


@dataclass
class CapsuleState:
    """Poses [..., m, d] plus activations [..., m] for one capsule layer."""

    poses: Tensor
    activations: Tensor

    def __post_init__(self):
        if self.poses.ndim < 2:
            raise T.ShapeError(f"poses must be at least [m, d], got "
                               f"{self.poses.shape}")
        if self.activations.shape != self.poses.shape[:-1]:
            raise T.ShapeError(
                f"activations {self.activations.shape} do not match poses "
                f"{self.poses.shape}")

    @property
    def count(self):
        return self.poses.shape[-2]

    @property
    def width(self):
        return self.poses.shape[-1]


@dataclass
class PrototypeBank:
    """One trainable prototype vector per upper capsule: q[n, d_proj]."""

    q: Tensor

    @classmethod
    def create(cls, n, d_proj, rng, std=1.0, dtype=np.float64):
        return cls(init_params((n, d_proj), rng, scheme="normal", sigma=std,
                               dtype=dtype))

    @property
    def count(self):
        return self.q.shape[0]

    @property
    def width(self):
        return self.q.shape[1]


@dataclass
class CouplingMatrix:
    """Raw similarities b[..., m, n] and their row softmax c[..., m, n]."""

    b: Tensor
    c: Tensor


@dataclass
class ProtoRoutingLayer:
    """One prototype-routing layer: project, score, mix, re-embed.

    ``residual_projection`` is required whenever the residual path is on
    and the lower/upper layers disagree in count or width; with matching
    shapes and no projection configured, the residual is a plain identity
    shortcut. ``canonical_order`` controls the exact-permutation-invariance
    sort and is on by default.
    """

    mlp_proj: Mlp
    prototypes: PrototypeBank
    mlp_out: Mlp | None                      # None on terminal class layers
    residual_enabled: bool = False
    residual_projection: LinearLayer | None = None
    use_input_activations: bool = False
    activation_aggregate: str = "mean"       # {"mean", "sum"} over lower
    normalize_contributions: bool = False    # divide the mix by m
    canonical_order: bool = True

    @classmethod
    def create(cls, d_in, n, d_out, rng, d_proj=None, proj_hidden=None,
               out_hidden=None, prototype_std=1.0, dtype=np.float64,
               terminal=False, **flags):
        """Build a layer with fresh parameters.

        ``terminal`` layers feed only their activations onward (class
        capsules used as logits): the output MLP and residual path would
        receive no gradient, so they are not created and the layer's poses
        are the raw contributions in the shared subspace.
        """
        d_proj = d_out if d_proj is None else d_proj
        proj_widths = [d_in] + list(proj_hidden if proj_hidden is not None
                                    else [d_proj]) + [d_proj]
        out_widths = [d_proj] + list(out_hidden if out_hidden is not None
                                     else [d_out]) + [d_out]
        return cls(
            mlp_proj=Mlp.create(proj_widths, rng, dtype),
            prototypes=PrototypeBank.create(n, d_proj, rng, prototype_std,
                                            dtype),
            mlp_out=None if terminal else Mlp.create(out_widths, rng, dtype),
            **flags)

    @property
    def d_in(self):
        return self.mlp_proj.d_in

    @property
    def d_proj(self):
        return self.prototypes.width

    @property
    def d_out(self):
        return self.d_proj if self.mlp_out is None else self.mlp_out.d_out

    @property
    def terminal(self):
        return self.mlp_out is None

    @property
    def n(self):
        return self.prototypes.count

    def residual_mode(self, m):
        """Which residual path applies for ``m`` lower capsules."""
        if not self.residual_enabled or self.terminal:
            return "off"
        if self.residual_projection is None:
            if m == self.n and self.d_in == self.d_out:
                return "identity"
            raise T.ShapeError(
                f"residual needs a projection when shapes differ: m={m}, "
                f"n={self.n}, d_in={self.d_in}, d_out={self.d_out}")
        return "projection" if m == self.n else "mixed"

    def describe(self, m=None):
        out = {
            "kind": "protocaps",
            "n": self.n,
            "d_in": self.d_in,
            "d_proj": self.d_proj,
            "d_out": self.d_out,
            "terminal": self.terminal,
            "proj_widths": self.mlp_proj.widths,
            "out_widths": None if self.terminal else self.mlp_out.widths,
            "use_input_activations": self.use_input_activations,
            "activation_aggregate": self.activation_aggregate,
            "normalize_contributions": self.normalize_contributions,
        }
        if m is not None:
            out["m"] = m
            out["residual"] = self.residual_mode(m)
        return out

    def named_params(self, prefix):
        out = self.mlp_proj.named_params(f"{prefix}.proj")
        out[f"{prefix}.prototypes"] = self.prototypes.q
        if self.mlp_out is not None:
            out.update(self.mlp_out.named_params(f"{prefix}.out"))
        if self.residual_projection is not None:
            out.update(self.residual_projection.named_params(
                f"{prefix}.residual"))
        return out


# ---------------------------------------------------------------------------
# The routing pipeline, one operation per stage
# ---------------------------------------------------------------------------

def project_poses(layer: ProtoRoutingLayer, lower: CapsuleState) -> Tensor:
    """Map every lower pose into the shared subspace, once per capsule.

    The projection is independent of the upper layer: it costs m MLP rows,
    not m*n. With ``use_input_activations`` each projected row is scaled
    by its capsule's activation.
    """
    if lower.width != layer.d_in:
        raise T.ShapeError(f"project_poses: pose width {lower.width} != "
                           f"layer d_in {layer.d_in}")
    proj = mlp_forward_rows(layer.mlp_proj, lower.poses)
    if layer.use_input_activations:
        acts = T.reshape(lower.activations,
                         lower.activations.shape + (1,))
        proj = proj * acts
    return proj


def similarities(proj: Tensor, bank: PrototypeBank) -> CouplingMatrix:
    """Dot each projected pose with every prototype; softmax each row."""
    if proj.shape[-1] != bank.width:
        raise T.ShapeError(f"similarities: projected width {proj.shape[-1]} "
                           f"!= prototype width {bank.width}")
    b = T.matmul(proj, T.transpose(bank.q))
    return CouplingMatrix(b=b, c=T.softmax_rows(b))


def contributions(proj: Tensor, coupling: CouplingMatrix,
                  normalize=False) -> Tensor:
    """Coupling-weighted sum of projected poses: C^T @ proj -> [n, d_proj].

    The raw sum over lower capsules, no 1/m; ``normalize`` divides by m for
    the depth-scaling variant.
    """
    if coupling.c.shape[:-1] != proj.shape[:-1]:
        raise T.ShapeError(f"contributions: coupling {coupling.c.shape} "
                           f"does not match projections {proj.shape}")
    mixed = T.matmul(T.swap_last2(coupling.c), proj)
    if normalize:
        mixed = mixed / float(proj.shape[-2])
    return mixed


def output_poses(layer: ProtoRoutingLayer, contrib: Tensor,
                 lower: CapsuleState, coupling: CouplingMatrix = None,
                 mix_lower: CapsuleState = None) -> Tensor:
    """Re-embed the contributions and apply the residual path.

    Residual resolution: identical shapes -> add lower poses directly;
    m == n with a projection -> add projected lower poses; m != n -> add
    the coupling-weighted mix C^T @ projection(lower poses), which needs
    ``coupling``. ``mix_lower`` supplies the poses row-aligned with the
    coupling matrix (defaults to ``lower``).
    """
    if contrib.shape[-1] != layer.d_proj:
        raise T.ShapeError(f"output_poses: contribution width "
                           f"{contrib.shape[-1]} != d_proj {layer.d_proj}")
    if layer.mlp_out is None:
        return contrib
    out = mlp_forward_rows(layer.mlp_out, contrib)
    mode = layer.residual_mode(lower.count)
    if mode == "off":
        return out
    if mode == "identity":
        return out + lower.poses
    if mode == "projection":
        return out + mlp_like_linear(layer.residual_projection, lower.poses)
    # mixed: weight the projected lower poses by the coupling coefficients
    if coupling is None:
        raise ValueError("mixed residual path needs the coupling matrix")
    src = lower if mix_lower is None else mix_lower
    projected = mlp_like_linear(layer.residual_projection, src.poses)
    return out + T.matmul(T.swap_last2(coupling.c), projected)


def mlp_like_linear(layer: LinearLayer, x: Tensor) -> Tensor:
    """linear_forward over arbitrary leading axes."""
    if x.ndim == 2:
        return linear_forward(layer, x)
    flat = T.reshape(x, (-1, x.shape[-1]))
    out = linear_forward(layer, flat)
    return T.reshape(out, x.shape[:-1] + (out.shape[-1],))


def output_activations(coupling: CouplingMatrix,
                       aggregate="mean") -> Tensor:
    """Per-upper-capsule activation: sigmoid of the aggregated similarity.

    Aggregates the raw similarity column over lower capsules (mean by
    default, sum selectable) and squashes through the logistic, so every
    activation lies in (0, 1).
    """
    return T.sigmoid(aggregate_similarities(coupling, aggregate))


def aggregate_similarities(coupling: CouplingMatrix,
                           aggregate="mean") -> Tensor:
    if aggregate == "mean":
        return T.reduce_mean(coupling.b, axis=-2)
    if aggregate == "sum":
        return T.reduce_sum(coupling.b, axis=-2)
    raise ValueError(f"unknown activation aggregate {aggregate!r}")


@dataclass
class RouteDetail:
    """Every intermediate of one routing call, for analysis and audits."""

    projected: Tensor
    coupling: CouplingMatrix
    contrib: Tensor
    poses: Tensor
    presigmoid: Tensor
    state: CapsuleState


def _canonical_order(poses_data):
    """Per-sample permutation sorting capsule rows lexicographically.

    Ties are bitwise-identical rows, so any downstream reduction sees the
    same value sequence no matter how the input rows were ordered.
    """
    if poses_data.ndim == 2:
        return np.lexsort(poses_data.T[::-1])
    lead = poses_data.shape[:-2]
    flat = poses_data.reshape(-1, *poses_data.shape[-2:])
    orders = np.stack([np.lexsort(sample.T[::-1]) for sample in flat])
    return orders.reshape(*lead, poses_data.shape[-2])


def route_detail(layer: ProtoRoutingLayer, lower: CapsuleState) -> RouteDetail:
    """Full routing pass returning all intermediates."""
    aligned = lower
    if layer.canonical_order:
        order = _canonical_order(lower.poses.data)
        poses = T.permute_rows(lower.poses, order)
        acts = T.reshape(
            T.permute_rows(T.reshape(lower.activations,
                                     lower.activations.shape + (1,)), order),
            lower.activations.shape)
        aligned = CapsuleState(poses, acts)
    proj = project_poses(layer, aligned)
    coupling = similarities(proj, layer.prototypes)
    contrib = contributions(proj, coupling,
                            normalize=layer.normalize_contributions)
    poses = output_poses(layer, contrib, lower, coupling, mix_lower=aligned)
    pre = aggregate_similarities(coupling, layer.activation_aggregate)
    acts = T.sigmoid(pre)
    return RouteDetail(projected=proj, coupling=coupling, contrib=contrib,
                       poses=poses, presigmoid=pre,
                       state=CapsuleState(poses, acts))


def route(layer: ProtoRoutingLayer, lower: CapsuleState) -> CapsuleState:
    """Route one capsule layer up: returns the upper CapsuleState.

    Differentiable end to end — the prototypes, both MLPs, and any residual
    projection all receive gradients from a loss on the output.
    """
    return route_detail(layer, lower).state
