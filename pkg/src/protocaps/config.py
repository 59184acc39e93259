"""Run configuration: YAML schema, validation, defaulting, dataset loading.

A run config has four sections — dataset, network, training, output. Every
field has a default; ``resolve_config`` fills them all in and type-checks
with dotted-path error messages, and the fully resolved document is written
back into the run directory so a run can be reproduced from its own output.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import numpy as np
import yaml

from .data import AugmentSpec, Dataset, load_cifar10_binary, load_idx, \
    load_raw_dir, sample_subset
from .network import NetworkConfig, PrimaryConfig, RoutingLayerConfig, \
    StemConfig
from .train import TrainConfig

OUTPUT_ROOT_ENV = "PROTOCAPS_OUT"


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending key."""


# Schema nodes: (type spec, default). Type specs: "int", "float", "bool",
# "str", "list", ("choice", options), ("list_of", spec), "any".
_AUGMENT_SCHEMA = {
    "enabled": ("bool", False),
    "scale_min": ("float", 0.8),
    "scale_max": ("float", 1.0),
    "out_size": ("int?", None),
    "brightness_delta": ("float", 0.0),
    "contrast_delta": ("float", 0.0),
}

_DATASET_SCHEMA = {
    "kind": (("choice", ["idx", "cifar10", "raw", "synthetic"]), "idx"),
    "tag": ("str?", None),
    "train_images": ("str?", None),
    "train_labels": ("str?", None),
    "test_images": ("str?", None),
    "test_labels": ("str?", None),
    "train_files": ("list?", None),
    "test_files": ("list?", None),
    "train_dir": ("str?", None),
    "test_dir": ("str?", None),
    "dir": ("str?", None),
    "train_count": ("int", 10000),
    "test_count": ("int", 10000),
    "train_subset": ("int?", None),
    "subset_seed": ("int", 0),
    "augment": (_AUGMENT_SCHEMA, None),
}

_HIDDEN_SCHEMA = {
    "capsules": ("int", 32),
    "pose_dim": ("int", 16),
    "proj_dim": ("int?", None),
    "residual": ("bool?", None),
    "use_input_activations": ("bool", False),
    "activation_aggregate": (("choice", ["mean", "sum"]), "mean"),
    "normalize_contributions": ("bool", False),
    "prototype_std": ("float", 1.0),
}

_NETWORK_SCHEMA = {
    "stem": {
        "kind": (("choice", ["convnet7", "resnet20"]), "convnet7"),
        "in_channels": ("int?", None),     # inferred from the dataset
        "in_hw": ("list?", None),
        "channels": ("list?", None),
        "strides": ("list?", None),
    },
    "primary": {
        "caps_per_position": ("int", 8),
        "pose_dim": ("int", 16),
    },
    "hidden": (("list_of", _HIDDEN_SCHEMA), [{}]),
    "classes": ("int?", None),             # inferred from the dataset
    "class_pose_dim": ("int", 16),
    "routing": (("choice", ["protocaps", "dynamic"]), "protocaps"),
    "class_logits": (("choice", ["sigmoid", "presigmoid"]), "sigmoid"),
    "residual": ("bool", True),
    "iterations": ("int", 3),
}

_TRAINING_SCHEMA = {
    "epochs": ("int", 350),
    "batch_size": ("int", 64),
    "lr": ("float", 1e-3),
    "milestones": ("list", [150, 250]),
    "lr_factor": ("float", 0.1),
    "weight_decay": ("float", 1e-4),
    "seed": ("int", 0),
    "precision": (("choice", ["single", "double"]), "single"),
    "deterministic": ("bool", True),
    "eval_interval": ("int", 1),
    "eval_batch_size": ("int", 256),
}

_OUTPUT_SCHEMA = {
    "dir": ("str?", None),
    "name": ("str", "run"),
}

SCHEMA = {
    "dataset": _DATASET_SCHEMA,
    "network": _NETWORK_SCHEMA,
    "training": _TRAINING_SCHEMA,
    "output": _OUTPUT_SCHEMA,
}


def _check_type(spec, value, path):
    if isinstance(spec, tuple) and spec[0] == "choice":
        if value not in spec[1]:
            raise ConfigError(f"{path}: expected one of {spec[1]}, got "
                              f"{value!r}")
        return value
    if isinstance(spec, tuple) and spec[0] == "list_of":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got "
                              f"{type(value).__name__}")
        return [
            _resolve_section(spec[1], item if item is not None else {},
                             f"{path}[{i}]")
            for i, item in enumerate(value)]
    optional = isinstance(spec, str) and spec.endswith("?")
    base = spec.rstrip("?") if isinstance(spec, str) else spec
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: value required")
    checks = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float))
        and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "list": lambda v: isinstance(v, list),
        "any": lambda v: True,
    }
    if base not in checks:
        raise ConfigError(f"{path}: unknown schema type {base!r}")
    if not checks[base](value):
        raise ConfigError(f"{path}: expected {base}, got "
                          f"{type(value).__name__} {value!r}")
    return float(value) if base == "float" else value


def _is_optional(spec):
    return isinstance(spec, str) and spec.endswith("?")


def _resolve_section(schema, raw, path):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got "
                          f"{type(raw).__name__}")
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    out = {}
    for key, node in schema.items():
        child = f"{path}.{key}" if path else key
        if isinstance(node, dict):
            out[key] = _resolve_section(node, raw.get(key), child)
            continue
        spec, default = node
        if isinstance(spec, dict):       # nested section with defaults
            out[key] = _resolve_section(spec, raw.get(key), child)
            continue
        value = raw.get(key, default)
        if value is default and isinstance(value, (list, dict)):
            value = copy.deepcopy(value)
        if value is None:
            if not _is_optional(spec):
                raise ConfigError(f"{child}: value required")
            out[key] = None
        else:
            out[key] = _check_type(spec, value, child)
    return out


def resolve_config(raw) -> dict:
    """Validate and fill defaults; returns the fully resolved document."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a mapping")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    out = {section: _resolve_section(schema, raw.get(section), section)
           for section, schema in SCHEMA.items()}
    _validate_semantics(out)
    return out


def _validate_semantics(cfg):
    tr = cfg["training"]
    for key in ("epochs",):
        if tr[key] < 0:
            raise ConfigError(f"training.{key}: must be >= 0, got {tr[key]}")
    for key in ("batch_size", "eval_interval", "eval_batch_size"):
        if tr[key] < 1:
            raise ConfigError(f"training.{key}: must be >= 1, got {tr[key]}")
    if tr["lr"] <= 0:
        raise ConfigError(f"training.lr: must be > 0, got {tr['lr']}")
    if tr["weight_decay"] < 0:
        raise ConfigError("training.weight_decay: must be >= 0")
    ms = tr["milestones"]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError(f"training.milestones: must be strictly "
                          f"increasing, got {ms}")
    aug = cfg["dataset"]["augment"]
    if aug and aug["enabled"]:
        if not 0 < aug["scale_min"] <= aug["scale_max"] <= 1:
            raise ConfigError("dataset.augment: need 0 < scale_min <= "
                              "scale_max <= 1")
    ds = cfg["dataset"]
    required = {
        "idx": ["train_images", "train_labels", "test_images",
                "test_labels"],
        "cifar10": ["train_files", "test_files"],
        "raw": ["train_dir", "test_dir"],
        "synthetic": [],
    }[ds["kind"]]
    for key in required:
        if not ds[key]:
            raise ConfigError(f"dataset.{key}: required for kind "
                              f"{ds['kind']!r}")


def load_config_file(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") \
            from None
    return resolve_config(raw)


def dump_config(cfg) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


# ---------------------------------------------------------------------------
# Section -> object builders
# ---------------------------------------------------------------------------

def dataset_from_config(ds_cfg, cache_dir=None):
    """Load (train, test, tag) per the dataset section."""
    kind = ds_cfg["kind"]
    if kind == "idx":
        train = load_idx(ds_cfg["train_images"], ds_cfg["train_labels"],
                         split="train")
        test = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"],
                        split="test")
    elif kind == "cifar10":
        train = load_cifar10_binary(ds_cfg["train_files"], split="train")
        test = load_cifar10_binary(ds_cfg["test_files"], split="test")
    elif kind == "raw":
        train = load_raw_dir(ds_cfg["train_dir"], split="train")
        test = load_raw_dir(ds_cfg["test_dir"], split="test")
    else:  # synthetic
        from .synth import write_digit_idx
        root = Path(ds_cfg["dir"] or (Path(cache_dir or ".") /
                                      "synthetic-digits"))
        marker = root / "train-images-idx3-ubyte"
        if not marker.exists():
            write_digit_idx(root, ds_cfg["train_count"],
                            ds_cfg["test_count"], ds_cfg["subset_seed"])
        train = load_idx(root / "train-images-idx3-ubyte",
                         root / "train-labels-idx1-ubyte", split="train")
        test = load_idx(root / "t10k-images-idx3-ubyte",
                        root / "t10k-labels-idx1-ubyte", split="test")
    if ds_cfg["train_subset"]:
        train = sample_subset(train, ds_cfg["train_subset"],
                              ds_cfg["subset_seed"])
    tag = ds_cfg["tag"] or kind
    return train, test, tag


def infer_network_dims(cfg, train: Dataset):
    """Fill dataset-dependent nulls (input shape, class count) in place."""
    net = cfg["network"]
    _, c, h, w = train.images.shape
    if net["stem"]["in_channels"] is None:
        net["stem"]["in_channels"] = int(c)
    if net["stem"]["in_hw"] is None:
        net["stem"]["in_hw"] = [int(h), int(w)]
    if net["classes"] is None:
        net["classes"] = int(train.num_classes)


def network_config_from_section(net) -> NetworkConfig:
    stem = StemConfig(kind=net["stem"]["kind"],
                      in_channels=net["stem"]["in_channels"],
                      in_hw=tuple(net["stem"]["in_hw"]),
                      channels=net["stem"]["channels"],
                      strides=net["stem"]["strides"])
    primary = PrimaryConfig(**net["primary"])
    hidden = [RoutingLayerConfig(**h) for h in net["hidden"]]
    return NetworkConfig(stem=stem, primary=primary, hidden=hidden,
                         classes=net["classes"],
                         class_pose_dim=net["class_pose_dim"],
                         routing=net["routing"],
                         class_logits=net["class_logits"],
                         residual=net["residual"],
                         iterations=net["iterations"])


def train_config_from_section(tr, augment_cfg=None) -> TrainConfig:
    aug = None
    if augment_cfg and augment_cfg["enabled"]:
        aug = AugmentSpec(scale_min=augment_cfg["scale_min"],
                          scale_max=augment_cfg["scale_max"],
                          out_size=augment_cfg["out_size"],
                          brightness_delta=augment_cfg["brightness_delta"],
                          contrast_delta=augment_cfg["contrast_delta"])
    return TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                       lr=tr["lr"], milestones=list(tr["milestones"]),
                       lr_factor=tr["lr_factor"],
                       weight_decay=tr["weight_decay"], seed=tr["seed"],
                       precision=tr["precision"],
                       deterministic=tr["deterministic"],
                       eval_interval=tr["eval_interval"],
                       eval_batch_size=tr["eval_batch_size"], augment=aug)


def output_dir_for(cfg, override=None) -> Path:
    if override:
        return Path(override)
    if cfg["output"]["dir"]:
        return Path(cfg["output"]["dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / cfg["output"]["name"]
