"""Closed-form FLOP and routing-memory accounting, per layer and network.

MAC counts mirror the implementation exactly: for every layer kind, the
closed form below equals the number of scalar multiplies an instrumented
forward pass performs (see tensor.audit_ops). FLOPs are derived as
2*MACs plus non-MAC work under a documented unit convention:

* bias/residual/aggregation adds: 1 each
* relu: 1 per element
* sigmoid: 3 per element (exp, add, divide)
* softmax over a row of n: 4n - 1 (shift, exponentiate, sum, divide)
* squash row of width d: d + 2 beyond its multiplies (sum adds, sqrt,
  divide) plus 1 add for the denominator

Routing memory counts the elements of intermediates the routing step
materializes: the dynamic baseline's m*n*d vote tensor versus the
prototype router's m*d_proj projections + m*n coupling matrix + n*d_proj
contributions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .network import NetworkConfig, layer_plan


def mlp_macs(widths):
    return sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def mlp_bias_adds(widths):
    return sum(widths[1:])


def mlp_relu_elems(widths):
    return sum(widths[1:-1])


def mlp_param_count(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    non_mac_flops: int
    routing_elements: int
    params: int
    components: dict = field(default_factory=dict)

    @property
    def flops(self):
        return 2 * self.macs + self.non_mac_flops


@dataclass
class CostReport:
    layers: list
    input_shape: tuple

    @property
    def total_macs(self):
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self):
        return sum(l.flops for l in self.layers)

    @property
    def total_routing_elements(self):
        return sum(l.routing_elements for l in self.layers)

    @property
    def total_params(self):
        return sum(l.params for l in self.layers)

    def csv_rows(self):
        rows = [("layer", "kind", "macs", "flops", "routing_elements",
                 "params")]
        for l in self.layers:
            rows.append((l.name, l.kind, l.macs, l.flops,
                         l.routing_elements, l.params))
        rows.append(("total", "", self.total_macs, self.total_flops,
                     self.total_routing_elements, self.total_params))
        return rows


def routing_memory(kind, m, n, d, d_proj=None):
    """Elements of the intermediates one routing step materializes.

    dynamic: the vote tensor, m*n*d (m already folds any spatial grid).
    protocaps: projections + coupling matrix + contributions,
    m*d_proj + m*n + n*d_proj.
    """
    if min(m, n, d) < 1 or (d_proj is not None and d_proj < 1):
        raise ValueError(f"dims must be positive: m={m}, n={n}, d={d}, "
                         f"d_proj={d_proj}")
    if kind == "dynamic":
        return m * n * d
    if kind == "protocaps":
        d_proj = d if d_proj is None else d_proj
        return m * d_proj + m * n + n * d_proj
    raise ValueError(f"unknown routing kind {kind!r}")


def _count_conv(desc):
    ho, wo = desc["h_out"], desc["w_out"]
    macs = desc["c_out"] * desc["c_in"] * desc["k"] ** 2 * ho * wo
    out_elems = desc["c_out"] * ho * wo
    non_mac = desc.get("extra_adds", 0)
    if desc.get("bias", True):
        non_mac += out_elems
    if desc.get("relu", False):
        non_mac += out_elems
    params = desc["c_out"] * desc["c_in"] * desc["k"] ** 2 + \
        (desc["c_out"] if desc.get("bias", True) else 0)
    return LayerCost(desc["name"], "conv", macs, non_mac, 0, params)


def _count_linear(desc):
    rows = desc.get("rows", 1)
    macs = rows * desc["d_in"] * desc["d_out"]
    non_mac = rows * desc["d_out"]      # bias adds
    params = desc["d_in"] * desc["d_out"] + desc["d_out"]
    return LayerCost(desc["name"], "linear", macs, non_mac, 0, params)


def _count_protocaps(desc):
    m, n = desc["m"], desc["n"]
    d_in, d_proj, d_out = desc["d_in"], desc["d_proj"], desc["d_out"]
    proj_w = desc["proj_widths"]
    out_w = desc["out_widths"]          # None on terminal class layers
    comp = {
        "proj_mlp": m * mlp_macs(proj_w),
        "similarities": m * n * d_proj,
        "mix": n * m * d_proj,
    }
    if out_w is not None:
        comp["out_mlp"] = n * mlp_macs(out_w)
    if desc.get("use_input_activations", False):
        comp["activation_scale"] = m * d_proj
    mode = desc.get("residual", "off")
    if mode == "projection":
        comp["residual"] = m * d_in * d_out
    elif mode == "mixed":
        comp["residual"] = m * d_in * d_out + n * m * d_out
    macs = sum(comp.values())

    non_mac = m * mlp_bias_adds(proj_w) + m * mlp_relu_elems(proj_w)
    non_mac += m * (4 * n - 1)                   # row softmax
    non_mac += n * (m - 1)                       # similarity aggregation
    if desc.get("activation_aggregate", "mean") == "mean":
        non_mac += n                             # the divide
    non_mac += 3 * n                             # sigmoid activations
    if desc.get("normalize_contributions", False):
        non_mac += n * d_proj
    params = mlp_param_count(proj_w) + n * d_proj
    if out_w is not None:
        non_mac += n * mlp_bias_adds(out_w) + n * mlp_relu_elems(out_w)
        params += mlp_param_count(out_w)
    if mode != "off":
        non_mac += n * d_out                     # residual add
        if mode in ("projection", "mixed"):
            non_mac += m * d_out                 # projection bias adds
    if mode in ("projection", "mixed"):
        params += d_in * d_out + d_out
    return LayerCost(desc["name"], "protocaps", macs, non_mac,
                     routing_memory("protocaps", m, n, d_out, d_proj),
                     params, comp)


def _count_dynamic(desc):
    m, n, d, d_in = desc["m"], desc["n"], desc["d"], desc["d_in"]
    iters = desc["iterations"]
    comp = {
        "votes": m * n * d * d_in,
        "iterations": iters * (2 * m * n * d + 2 * n * d),
        "activation_norms": n * d,
    }
    macs = sum(comp.values())
    per_iter = m * (4 * n - 1)                    # softmax
    per_iter += n * (d + 2) + n                   # squash extras
    per_iter += m * n                             # logit update adds
    non_mac = iters * per_iter + n * (d - 1) + n  # + norm adds and sqrt
    params = m * n * d * d_in
    return LayerCost(desc["name"], "dynamic", macs, non_mac,
                     routing_memory("dynamic", m, n, d), params, comp)


_COUNTERS = {"conv": _count_conv, "linear": _count_linear,
             "protocaps": _count_protocaps, "dynamic": _count_dynamic}


def count_layer(desc) -> LayerCost:
    """Closed-form cost of one layer descriptor (per sample)."""
    try:
        counter = _COUNTERS[desc["kind"]]
    except KeyError:
        raise ValueError(f"unknown layer kind {desc.get('kind')!r}") from None
    return counter(desc)


def network_cost(config: NetworkConfig) -> CostReport:
    """Per-layer and total cost of a configured network, per sample."""
    layers = [count_layer(desc) for desc in layer_plan(config)]
    shape = (config.stem.in_channels,) + tuple(config.stem.in_hw)
    return CostReport(layers, shape)


def scaling_curve(config: NetworkConfig, sizes) -> list:
    """Total cost at several square input sizes: [(size, CostReport)].

    Sizes below the stem's minimum input are rejected.
    """
    out = []
    for size in sizes:
        stem = dataclasses.replace(config.stem, in_hw=(size, size))
        cfg = dataclasses.replace(config, stem=stem)
        out.append((size, network_cost(cfg)))
    return out
