"""Full classifier assembly: conv stem, primary capsules, routing stack.

A model is stem -> primary capsules -> zero or more hidden routing layers
-> class capsules, with the class-capsule activations used as logits. The
stem is either a 7-layer plain convnet or a 19-conv residual net (standard
3-stage layout, final fully connected layer replaced by the capsule head).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .nnops import LinearLayer, init_params
from .proto_routing import CapsuleState, ProtoRoutingLayer, route_detail
from .dynamic_routing import DynamicRoutingLayer

CONVNET7_CHANNELS = [64, 64, 128, 128, 256, 256, 256]
CONVNET7_STRIDES = [1, 1, 2, 1, 2, 1, 1]
RESNET20_STAGES = [16, 32, 64]   # 3 blocks each, strides 1/2/2


@dataclass
class StemConfig:
    kind: str = "convnet7"
    in_channels: int = 1
    in_hw: tuple = (28, 28)
    channels: list = None          # convnet7 schedule override
    strides: list = None

    def schedule(self):
        if self.kind == "convnet7":
            ch = self.channels or CONVNET7_CHANNELS
            st = self.strides or CONVNET7_STRIDES
            if len(ch) != len(st):
                raise ValueError(f"stem channels ({len(ch)}) and strides "
                                 f"({len(st)}) differ in length")
            return list(ch), list(st)
        if self.kind == "resnet20":
            return list(RESNET20_STAGES), [1, 2, 2]
        raise ValueError(f"unknown stem kind {self.kind!r}")


@dataclass
class PrimaryConfig:
    caps_per_position: int = 8
    pose_dim: int = 16


@dataclass
class RoutingLayerConfig:
    capsules: int = 32
    pose_dim: int = 16
    proj_dim: int = None           # defaults to pose_dim
    residual: bool = None          # None -> inherit NetworkConfig.residual
    use_input_activations: bool = False
    activation_aggregate: str = "mean"
    normalize_contributions: bool = False
    prototype_std: float = 1.0


@dataclass
class NetworkConfig:
    stem: StemConfig = field(default_factory=StemConfig)
    primary: PrimaryConfig = field(default_factory=PrimaryConfig)
    hidden: list = field(default_factory=list)   # RoutingLayerConfig each
    classes: int = 10
    class_pose_dim: int = 16
    routing: str = "protocaps"                   # or "dynamic"
    class_logits: str = "sigmoid"                # or "presigmoid"
    residual: bool = True
    iterations: int = 3                          # dynamic routing only

    def validate(self):
        if self.classes < 1:
            raise ValueError(f"classes must be positive, got {self.classes}")
        if self.routing not in ("protocaps", "dynamic"):
            raise ValueError(f"unknown routing kind {self.routing!r}")
        if self.class_logits not in ("sigmoid", "presigmoid"):
            raise ValueError(f"unknown class_logits {self.class_logits!r}")
        self.stem.schedule()
        if self.primary.caps_per_position < 1 or self.primary.pose_dim < 1:
            raise ValueError("primary capsule dims must be positive")
        for i, h in enumerate(self.hidden):
            if h.capsules < 1 or h.pose_dim < 1:
                raise ValueError(f"hidden[{i}] dims must be positive")


def conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


@dataclass
class ConvLayer:
    weight: Tensor      # [c_out, c_in, k, k]
    bias: Tensor        # [c_out]
    stride: int = 1
    padding: int = 1

    @classmethod
    def create(cls, c_in, c_out, k, stride, padding, rng, dtype):
        w = init_params((c_out, c_in, k, k), rng, dtype=dtype)
        b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        return cls(w, b, stride, padding)

    def forward(self, x: Tensor, layout="nchw") -> Tensor:
        out = T.conv2d(x, self.weight, self.stride, self.padding, layout)
        if layout == "nhwc":
            return out + self.bias
        bias = T.reshape(self.bias, (self.bias.shape[0], 1, 1))
        return out + bias

    def named_params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class ResBlock:
    """Two 3x3 convs with an identity shortcut (zero-padded on downsample)."""

    conv_a: ConvLayer
    conv_b: ConvLayer
    downsample: bool
    pad_channels: int

    def forward(self, x: Tensor, layout="nchw") -> Tensor:
        h = T.relu(self.conv_a.forward(x, layout))
        h = self.conv_b.forward(h, layout)
        shortcut = x
        hw_axes = (-3, -2) if layout == "nhwc" else (-2, -1)
        c_axis = -1 if layout == "nhwc" else -3
        if self.downsample:
            shortcut = T.subsample_hw(shortcut, 2, hw_axes)
        if self.pad_channels:
            shortcut = T.pad_axis(shortcut, c_axis, 0, self.pad_channels)
        return T.relu(h + shortcut)

    def named_params(self, prefix):
        out = self.conv_a.named_params(f"{prefix}.a")
        out.update(self.conv_b.named_params(f"{prefix}.b"))
        return out


@dataclass
class PrimaryHead:
    """1x1 conv mapping stem features into the first capsule layer."""

    conv: ConvLayer
    caps_per_position: int
    pose_dim: int

    def named_params(self, prefix):
        return self.conv.named_params(prefix)


def primary_capsules(features: Tensor, head: PrimaryHead,
                     layout="nchw") -> CapsuleState:
    """Translate a feature map into capsules.

    [.., c, h, w] -> poses [.., caps_per_position*h*w, pose_dim]; each grid
    position contributes caps_per_position capsules. Activations start at 1
    (the prototype router does not consume them by default). The capsule
    enumeration order differs between layouts; routing treats capsules as a
    set, so the order carries no meaning.
    """
    c_axis = -1 if layout == "nhwc" else -3
    if features.shape[c_axis] != head.conv.weight.shape[1]:
        raise T.ShapeError(f"primary_capsules: {features.shape[c_axis]} "
                           f"input channels, head expects "
                           f"{head.conv.weight.shape[1]}")
    mapped = head.conv.forward(features, layout)
    caps, d = head.caps_per_position, head.pose_dim
    if layout == "nhwc":
        lead = mapped.shape[:-3]
        h, w = mapped.shape[-3:-1]
        poses = T.reshape(mapped, lead + (h * w * caps, d))
    else:
        lead = mapped.shape[:-3]
        h, w = mapped.shape[-2:]
        split = T.reshape(mapped, lead + (caps, d, h, w))
        nd = split.ndim
        moved = T.transpose(split, tuple(range(nd - 4)) +
                            (nd - 4, nd - 2, nd - 1, nd - 3))
        poses = T.reshape(moved, lead + (caps * h * w, d))
    acts = Tensor(np.ones(lead + (caps * h * w,), dtype=poses.dtype))
    return CapsuleState(poses, acts)


class Model:
    """Instantiated network: stem, primary head, routing layers, registry."""

    def __init__(self, config, stem_layers, primary_head, routing_layers,
                 dtype):
        self.config = config
        self.stem_layers = stem_layers      # ConvLayer or ResBlock items
        self.primary_head = primary_head
        self.routing_layers = routing_layers  # list of (name, layer, m)
        self.dtype = dtype
        self.params = {}
        for i, item in enumerate(stem_layers):
            self.params.update(item.named_params(f"stem.{i}"))
        self.params.update(primary_head.named_params("primary"))
        for name, layer, _ in routing_layers:
            self.params.update(layer.named_params(name))

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def stem_forward(self, images: Tensor, layout="nchw") -> Tensor:
        x = images
        for item in self.stem_layers:
            if isinstance(item, ResBlock):
                x = item.forward(x, layout)
            else:
                x = T.relu(item.forward(x, layout))
        return x

    def forward_states(self, images: Tensor):
        """Logits plus every routing layer's CapsuleState, by layer name.

        Accepts [batch, c, h, w]; internally the stem runs channels-last.
        """
        if images.ndim != 4:
            raise T.ShapeError(f"forward expects [batch, c, h, w], got "
                               f"{images.shape}")
        expect = (self.config.stem.in_channels,) + \
            tuple(self.config.stem.in_hw)
        if tuple(images.shape[1:]) != expect:
            raise T.ShapeError(f"input shape {tuple(images.shape[1:])} does "
                               f"not match configured {expect}")
        nhwc = T.transpose(images, (0, 2, 3, 1))
        features = self.stem_forward(nhwc, layout="nhwc")
        state = primary_capsules(features, self.primary_head,
                                 layout="nhwc")
        states = [("primary", state)]
        logits = None
        for name, layer, _ in self.routing_layers:
            if isinstance(layer, ProtoRoutingLayer):
                detail = route_detail(layer, state)
                state = detail.state
                if name == "class" and self.config.class_logits == \
                        "presigmoid":
                    logits = detail.presigmoid
            else:
                state = layer.route(state)
            states.append((name, state))
        if logits is None:
            logits = state.activations
        return logits, states

    def forward(self, images: Tensor) -> Tensor:
        """Class logits [batch, classes] for a batch of images."""
        return self.forward_states(images)[0]


def _build_stem(cfg: StemConfig, rng, dtype):
    """Returns (layers, out_channels, out_hw)."""
    c, (h, w) = cfg.in_channels, cfg.in_hw
    layers = []
    if cfg.kind == "convnet7":
        channels, strides = cfg.schedule()
        for c_out, s in zip(channels, strides):
            if conv_out(h, 3, s, 1) < 1 or conv_out(w, 3, s, 1) < 1:
                raise ValueError(f"input {cfg.in_hw} too small for the "
                                 f"convnet7 stem")
            layers.append(ConvLayer.create(c, c_out, 3, s, 1, rng, dtype))
            c = c_out
            h, w = conv_out(h, 3, s, 1), conv_out(w, 3, s, 1)
        return layers, c, (h, w)
    # resnet20: conv1 + 3 stages x 3 blocks, strides 1/2/2, option-A shortcut
    layers.append(ConvLayer.create(c, RESNET20_STAGES[0], 3, 1, 1, rng,
                                   dtype))
    c = RESNET20_STAGES[0]
    h, w = conv_out(h, 3, 1, 1), conv_out(w, 3, 1, 1)
    for stage, c_out in enumerate(RESNET20_STAGES):
        for block in range(3):
            stride = 2 if stage > 0 and block == 0 else 1
            if conv_out(h, 3, stride, 1) < 1 or conv_out(w, 3, stride, 1) < 1:
                raise ValueError(f"input {cfg.in_hw} too small for the "
                                 f"resnet20 stem")
            conv_a = ConvLayer.create(c, c_out, 3, stride, 1, rng, dtype)
            conv_b = ConvLayer.create(c_out, c_out, 3, 1, 1, rng, dtype)
            layers.append(ResBlock(conv_a, conv_b, downsample=stride == 2,
                                   pad_channels=c_out - c))
            c = c_out
            h, w = conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1)
    return layers, c, (h, w)


def _make_routing_layer(routing, m, d_in, n, d_out, cfg: RoutingLayerConfig,
                        residual_default, iterations, rng, dtype,
                        terminal=False):
    if routing == "dynamic":
        return DynamicRoutingLayer.create(m, n, d_in, d_out, rng,
                                          iterations, dtype)
    residual = (cfg.residual if cfg.residual is not None
                else residual_default) and not terminal
    d_proj = cfg.proj_dim or d_out
    layer = ProtoRoutingLayer.create(
        d_in, n, d_out, rng, d_proj=d_proj,
        prototype_std=cfg.prototype_std, dtype=dtype, terminal=terminal,
        residual_enabled=residual,
        use_input_activations=cfg.use_input_activations,
        activation_aggregate=cfg.activation_aggregate,
        normalize_contributions=cfg.normalize_contributions)
    if residual and (m != n or d_in != d_out):
        layer.residual_projection = LinearLayer.create(d_in, d_out, rng,
                                                       dtype)
    return layer


def build(config: NetworkConfig, rng, dtype=np.float32) -> Model:
    """Instantiate a model from its declarative description.

    Deterministic given the generator state: two builds from the same seed
    produce bit-identical parameters.
    """
    config.validate()
    dtype = np.dtype(dtype).type
    stem_layers, c, (h, w) = _build_stem(config.stem, rng, dtype)
    head_conv = ConvLayer.create(
        c, config.primary.caps_per_position * config.primary.pose_dim,
        1, 1, 0, rng, dtype)
    head = PrimaryHead(head_conv, config.primary.caps_per_position,
                       config.primary.pose_dim)
    m = config.primary.caps_per_position * h * w
    d = config.primary.pose_dim
    routing_layers = []
    for i, key in enumerate(config.hidden):
        layer = _make_routing_layer(config.routing, m, d, key.capsules,
                                    key.pose_dim, key, config.residual,
                                    config.iterations, rng, dtype)
        routing_layers.append((f"caps{i}", layer, m))
        m, d = key.capsules, key.pose_dim
    class_cfg = RoutingLayerConfig(capsules=config.classes,
                                   pose_dim=config.class_pose_dim)
    layer = _make_routing_layer(config.routing, m, d, config.classes,
                                config.class_pose_dim, class_cfg,
                                config.residual, config.iterations, rng,
                                dtype, terminal=True)
    routing_layers.append(("class", layer, m))
    return Model(config, stem_layers, head, routing_layers, dtype)


def layer_plan(config: NetworkConfig) -> list:
    """Shape-inferred layer descriptors, the cost model's input.

    Pure config arithmetic — no parameters are allocated.
    """
    config.validate()
    plan = []
    c, (h, w) = config.stem.in_channels, config.stem.in_hw
    if config.stem.kind == "convnet7":
        channels, strides = config.stem.schedule()
        for i, (c_out, s) in enumerate(zip(channels, strides)):
            ho, wo = conv_out(h, 3, s, 1), conv_out(w, 3, s, 1)
            if ho < 1 or wo < 1:
                raise ValueError(f"input {config.stem.in_hw} too small for "
                                 f"the convnet7 stem")
            plan.append({"name": f"stem.{i}", "kind": "conv", "c_in": c,
                         "c_out": c_out, "k": 3, "h_out": ho, "w_out": wo,
                         "bias": True, "relu": True, "extra_adds": 0})
            c, h, w = c_out, ho, wo
    else:
        ho, wo = conv_out(h, 3, 1, 1), conv_out(w, 3, 1, 1)
        plan.append({"name": "stem.0", "kind": "conv", "c_in": c,
                     "c_out": RESNET20_STAGES[0], "k": 3, "h_out": ho,
                     "w_out": wo, "bias": True, "relu": True,
                     "extra_adds": 0})
        c, h, w = RESNET20_STAGES[0], ho, wo
        idx = 1
        for stage, c_out in enumerate(RESNET20_STAGES):
            for block in range(3):
                stride = 2 if stage > 0 and block == 0 else 1
                ho, wo = conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1)
                if ho < 1 or wo < 1:
                    raise ValueError(f"input {config.stem.in_hw} too small "
                                     f"for the resnet20 stem")
                plan.append({"name": f"stem.{idx}.a", "kind": "conv",
                             "c_in": c, "c_out": c_out, "k": 3, "h_out": ho,
                             "w_out": wo, "bias": True, "relu": True,
                             "extra_adds": 0})
                # second conv carries the shortcut add and final relu
                plan.append({"name": f"stem.{idx}.b", "kind": "conv",
                             "c_in": c_out, "c_out": c_out, "k": 3,
                             "h_out": ho, "w_out": wo, "bias": True,
                             "relu": True,
                             "extra_adds": c_out * ho * wo})
                c, h, w = c_out, ho, wo
                idx += 1
    plan.append({"name": "primary", "kind": "conv", "c_in": c,
                 "c_out": config.primary.caps_per_position *
                 config.primary.pose_dim, "k": 1, "h_out": h, "w_out": w,
                 "bias": True, "relu": False, "extra_adds": 0})
    m = config.primary.caps_per_position * h * w
    d = config.primary.pose_dim
    specs = [(f"caps{i}", k.capsules, k.pose_dim, k, False)
             for i, k in enumerate(config.hidden)]
    specs.append(("class", config.classes, config.class_pose_dim,
                  RoutingLayerConfig(capsules=config.classes,
                                     pose_dim=config.class_pose_dim), True))
    for name, n, d_out, key, terminal in specs:
        if config.routing == "dynamic":
            plan.append({"name": name, "kind": "dynamic", "m": m, "n": n,
                         "d_in": d, "d": d_out,
                         "iterations": config.iterations})
        else:
            residual = (key.residual if key.residual is not None
                        else config.residual) and not terminal
            if not residual:
                mode = "off"
            elif m == n and d == d_out:
                mode = "identity"
            elif m == n:
                mode = "projection"
            else:
                mode = "mixed"
            d_proj = key.proj_dim or d_out
            plan.append({"name": name, "kind": "protocaps", "m": m, "n": n,
                         "d_in": d, "d_proj": d_proj, "d_out": d_out,
                         "proj_widths": [d, d_proj, d_proj],
                         "out_widths": None if terminal
                         else [d_proj, d_out, d_out],
                         "residual": mode,
                         "use_input_activations":
                             key.use_input_activations,
                         "activation_aggregate": key.activation_aggregate,
                         "normalize_contributions":
                             key.normalize_contributions})
        m, d = n, d_out
    return plan
