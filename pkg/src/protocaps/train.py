"""Optimization loop: Adam with decoupled weight decay, milestone schedule,
metrics, checkpointing."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .nnops import cross_entropy
from .data import AugmentSpec, Dataset, augment, batches
from .network import Model, NetworkConfig, PrimaryConfig, \
    RoutingLayerConfig, StemConfig, build

CHECKPOINT_FORMAT_VERSION = 1


def _keep_large_buffers_on_heap():
    """Raise glibc's mmap threshold so big transient arrays get reused.

    Training churns through >100 MB im2col buffers every step; with the
    default allocator policy each one is a fresh mmap that page-faults at a
    fraction of memory bandwidth. No-op off Linux/glibc.
    """
    import ctypes
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)    # M_MMAP_THRESHOLD
        libc.mallopt(-1, -1)         # M_TRIM_THRESHOLD
    except OSError:
        pass


_keep_large_buffers_on_heap()


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; records where."""

    def __init__(self, epoch, batch_index, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, "
                         f"batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


class Adam:
    """Bias-corrected Adam; weight decay is decoupled (applied to the
    parameter directly, before the Adam delta, scaled by the current lr)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            g = p.grad
            if self.weight_decay:
                p.data = p.data - (self.lr * self.weight_decay) * p.data
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(optimizer: Adam, lr=None):
    """One optimizer step over the registered parameters."""
    if lr is not None:
        optimizer.lr = lr
    optimizer.step()


@dataclass
class Schedule:
    """Milestone decay: lr(epoch) = base * factor^(milestones passed)."""

    base_lr: float
    milestones: list = field(default_factory=list)
    factor: float = 0.1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got "
                             f"{self.milestones}")

    def lr_at(self, epoch):
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr * self.factor ** passed


@dataclass
class EpochRow:
    epoch: int
    train_loss: float = None
    train_acc: float = None
    test_acc: float = None
    lr: float = None
    wall_seconds: float = None


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def csv_text(self, zero_wall=False):
        """Render the per-epoch table; byte-stable given equal rows.

        ``zero_wall`` blanks the timing column so deterministic reruns
        produce identical bytes (real timings live in the summary).
        """
        lines = ["epoch,train_loss,train_acc,test_acc,lr,wall_seconds"]
        for r in self.rows:
            wall = 0.0 if zero_wall else r.wall_seconds
            cells = [str(r.epoch)] + [
                "" if v is None else repr(float(v))
                for v in (r.train_loss, r.train_acc, r.test_acc, r.lr, wall)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 64
    lr: float = 1e-3
    milestones: list = field(default_factory=lambda: [150, 250])
    lr_factor: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "single"          # correctness suites use "double"
    deterministic: bool = True
    eval_interval: int = 1
    eval_batch_size: int = 256
    augment: AugmentSpec = None

    @property
    def dtype(self):
        if self.precision == "single":
            return np.float32
        if self.precision == "double":
            return np.float64
        raise ValueError(f"unknown precision {self.precision!r}")


def evaluate(model: Model, dataset: Dataset, batch_size=256) -> float:
    """Argmax accuracy (first index wins ties), computed without a tape."""
    correct = 0
    with T.no_grad():
        for images, labels in batches(dataset, batch_size):
            logits = model.forward(Tensor(images.astype(model.dtype)))
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == labels).sum())
    return correct / len(dataset)


def run_training(model: Model, train_set: Dataset, test_set: Dataset,
                 cfg: TrainConfig, out_dir=None) -> RunMetrics:
    """Train for cfg.epochs; evaluate each eval_interval; keep best+last.

    With epochs=0 only the initial evaluation is recorded. A non-finite
    loss aborts with the offending epoch and batch index.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(model.params, lr=cfg.lr,
                     weight_decay=cfg.weight_decay)
    schedule = Schedule(cfg.lr, list(cfg.milestones), cfg.lr_factor)
    metrics = RunMetrics()
    started = time.time()
    best_acc, best_epoch = -1.0, None

    if cfg.epochs == 0:
        t0 = time.time()
        acc = evaluate(model, test_set, cfg.eval_batch_size)
        metrics.rows.append(EpochRow(epoch=0, test_acc=acc, lr=cfg.lr,
                                     wall_seconds=time.time() - t0))
        best_acc, best_epoch = acc, 0
        if out_dir is not None:
            save_checkpoint(out_dir / "last.npz", model)
            save_checkpoint(out_dir / "best.npz", model)

    for epoch in range(cfg.epochs):
        t0 = time.time()
        lr = schedule.lr_at(epoch)
        optimizer.lr = lr
        aug_rng = np.random.default_rng([cfg.seed, epoch, 7]) \
            if cfg.augment is not None else None
        loss_sum, correct, seen = 0.0, 0, 0
        epoch_batches = batches(train_set, cfg.batch_size, shuffle=True,
                                seed=_epoch_seed(cfg.seed, epoch))
        for bi, (images, labels) in enumerate(epoch_batches):
            if cfg.augment is not None:
                images = augment(images, cfg.augment, aug_rng)
            x = Tensor(images.astype(model.dtype))
            logits = model.forward(x)
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, bi, value)
            T.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            loss_sum += value * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            seen += len(labels)
        test_acc = None
        if (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1:
            test_acc = evaluate(model, test_set, cfg.eval_batch_size)
        metrics.rows.append(EpochRow(
            epoch=epoch, train_loss=loss_sum / seen,
            train_acc=correct / seen, test_acc=test_acc, lr=lr,
            wall_seconds=time.time() - t0))
        if out_dir is not None:
            save_checkpoint(out_dir / "last.npz", model)
        if test_acc is not None and test_acc > best_acc:
            best_acc, best_epoch = test_acc, epoch
            if out_dir is not None:
                save_checkpoint(out_dir / "best.npz", model)

    metrics.summary = {
        "epochs": cfg.epochs,
        "final_test_acc": metrics.rows[-1].test_acc if metrics.rows else None,
        "best_test_acc": best_acc if best_acc >= 0 else None,
        "best_epoch": best_epoch,
        "wall_seconds_total": time.time() - started,
        "optimizer": "adam(decoupled_weight_decay)",
        "lr": cfg.lr,
        "weight_decay": cfg.weight_decay,
        "milestones": list(cfg.milestones),
        "precision": cfg.precision,
    }
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(
            metrics.csv_text(zero_wall=cfg.deterministic))
    return metrics


def _epoch_seed(seed, epoch):
    return [seed, epoch]


# ---------------------------------------------------------------------------
# Checkpoints: named parameter arrays + a JSON meta header
# ---------------------------------------------------------------------------

def _config_to_dict(config: NetworkConfig):
    d = dataclasses.asdict(config)
    d["stem"]["in_hw"] = list(d["stem"]["in_hw"])
    return d


def network_config_from_dict(d) -> NetworkConfig:
    d = dict(d)
    stem = dict(d.pop("stem"))
    stem["in_hw"] = tuple(stem["in_hw"])
    primary = PrimaryConfig(**d.pop("primary"))
    hidden = [RoutingLayerConfig(**h) for h in d.pop("hidden")]
    return NetworkConfig(stem=StemConfig(**stem), primary=primary,
                         hidden=hidden, **d)


def save_checkpoint(path, model: Model, extra_meta=None):
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": np.dtype(model.dtype).name,
        "network": _config_to_dict(model.config),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {name: p.data for name, p in model.params.items()}
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)),
             **arrays)


def load_checkpoint(path) -> Model:
    """Rebuild the model a checkpoint describes and load its parameters."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ValueError(f"{path}: not a checkpoint (missing meta)")
        meta = json.loads(str(z["__meta__"]))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: checkpoint format version {version} "
                             f"unsupported (expected "
                             f"{CHECKPOINT_FORMAT_VERSION})")
        config = network_config_from_dict(meta["network"])
        model = build(config, np.random.default_rng(0),
                      dtype=np.dtype(meta["dtype"]).type)
        for name, p in model.params.items():
            if name not in z:
                raise ValueError(f"{path}: missing parameter {name!r}")
            arr = z[name]
            if arr.shape != p.shape:
                raise ValueError(f"{path}: parameter {name!r} has shape "
                                 f"{arr.shape}, model expects {p.shape}")
            p.data = arr
    return model
