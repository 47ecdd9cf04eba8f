"""Patch classifiers (Simple CNN, Mini-GoogLeNet), training and evaluation.

Networks take float tensors in ``[0, 1]`` with shape ``(N, 3, H, W)``.
Every model carries a ``layer_map`` from tags to module names; the tag
``last_conv`` names the post-ReLU output of the last convolutional layer and
``last_conv_pre`` the same layer before its nonlinearity.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PatchDataset
from .errors import ConfigError, TrainingError
from .transforms import GeoAugConfig, HsvJitterConfig, geometric_augment, hsv_color_augment

log = logging.getLogger(__name__)

__all__ = [
    "ARCHS",
    "ModelSpec",
    "SimpleCNN",
    "MiniGoogLeNet",
    "TrainedModel",
    "build_simple_cnn",
    "build_mini_googlenet",
    "build_model",
    "TrainConfig",
    "train",
    "AccuracyReport",
    "evaluate_accuracy",
    "to_tensor",
    "save_checkpoint",
    "load_checkpoint",
    "write_history",
]

ARCHS = ("simple_cnn", "mini_googlenet")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "simple_cnn"
    input_size: int = 96
    n_classes: int = 2
    dropout_rate: float = 0.5
    init_seed: int = 0
    width_mult: float = 0.25  # Mini-GoogLeNet channel scale relative to GoogLeNet

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.input_size % 4 or self.input_size < 8:
            raise ConfigError("input_size must be a positive multiple of 4")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")


class SimpleCNN(nn.Module):
    """Three 3x3 conv layers (32/64/128, each followed by ReLU and 2x max
    pooling) and two fully connected layers, each preceded by dropout.
    No batch normalization."""

    def __init__(self, input_size: int = 96, n_classes: int = 2, dropout: float = 0.5):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
        self.relu1 = nn.ReLU()
        self.pool1 = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.relu2 = nn.ReLU()
        self.pool2 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(64, 128, 3, padding=1)
        self.relu3 = nn.ReLU()
        self.pool3 = nn.MaxPool2d(2)
        side = input_size // 2 // 2 // 2
        self.drop1 = nn.Dropout(dropout)
        self.fc1 = nn.Linear(128 * side * side, 256)
        self.relu_fc = nn.ReLU()
        self.drop2 = nn.Dropout(dropout)
        self.fc2 = nn.Linear(256, n_classes)

    def forward(self, x):
        x = x - 0.5
        x = self.pool1(self.relu1(self.conv1(x)))
        x = self.pool2(self.relu2(self.conv2(x)))
        x = self.pool3(self.relu3(self.conv3(x)))
        x = torch.flatten(x, 1)
        x = self.relu_fc(self.fc1(self.drop1(x)))
        return self.fc2(self.drop2(x))


class BasicConv(nn.Module):
    def __init__(self, cin, cout, **kwargs):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, **kwargs)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.conv(x))


class Inception(nn.Module):
    """GoogLeNet inception block. The four branch outputs are concatenated
    before the final ReLU so the pre-activation map is hookable at ``pre``
    and the block output at ``act``."""

    def __init__(self, cin, ch1, ch3red, ch3, ch5red, ch5, pool_proj):
        super().__init__()
        self.branch1 = nn.Conv2d(cin, ch1, 1)
        self.branch2 = nn.Sequential(BasicConv(cin, ch3red, kernel_size=1), nn.Conv2d(ch3red, ch3, 3, padding=1))
        self.branch3 = nn.Sequential(BasicConv(cin, ch5red, kernel_size=1), nn.Conv2d(ch5red, ch5, 5, padding=2))
        self.branch4 = nn.Sequential(nn.MaxPool2d(3, stride=1, padding=1), nn.Conv2d(cin, pool_proj, 1))
        self.pre = nn.Identity()
        self.act = nn.ReLU()
        self.out_channels = ch1 + ch3 + ch5 + pool_proj

    def forward(self, x):
        out = torch.cat([self.branch1(x), self.branch2(x), self.branch3(x), self.branch4(x)], 1)
        return self.act(self.pre(out))


class AuxHead(nn.Module):
    """GoogLeNet auxiliary classifier: avg pool, 1x1 conv, FC, dropout, FC."""

    def __init__(self, cin, n_classes, width_mult=1.0, dropout=0.7):
        super().__init__()
        c = max(8, int(round(128 * width_mult)))
        hidden = max(32, int(round(1024 * width_mult)))
        self.pool = nn.AdaptiveAvgPool2d((2, 2))
        self.conv = BasicConv(cin, c, kernel_size=1)
        self.fc1 = nn.Linear(c * 4, hidden)
        self.relu = nn.ReLU()
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = torch.flatten(self.conv(self.pool(x)), 1)
        return self.fc2(self.drop(self.relu(self.fc1(x))))


class MiniGoogLeNet(nn.Module):
    """GoogLeNet truncated after inception 4a, the block feeding the first
    auxiliary classifier, which is the only output head."""

    def __init__(self, n_classes: int = 2, width_mult: float = 0.25, dropout: float = 0.5):
        super().__init__()

        def w(c):
            return max(4, int(round(c * width_mult)))

        self.conv1 = BasicConv(3, w(64), kernel_size=7, stride=2, padding=3)
        self.pool1 = nn.MaxPool2d(3, stride=2, ceil_mode=True)
        self.conv2 = BasicConv(w(64), w(64), kernel_size=1)
        self.conv3 = BasicConv(w(64), w(192), kernel_size=3, padding=1)
        self.pool2 = nn.MaxPool2d(3, stride=2, ceil_mode=True)
        self.inception3a = Inception(w(192), w(64), w(96), w(128), w(16), w(32), w(32))
        self.inception3b = Inception(self.inception3a.out_channels, w(128), w(128), w(192), w(32), w(96), w(64))
        self.pool3 = nn.MaxPool2d(3, stride=2, ceil_mode=True)
        self.inception4a = Inception(self.inception3b.out_channels, w(192), w(96), w(208), w(16), w(48), w(64))
        self.aux1 = AuxHead(self.inception4a.out_channels, n_classes, width_mult, dropout)

    def forward(self, x):
        x = x - 0.5
        x = self.pool1(self.conv1(x))
        x = self.pool2(self.conv3(self.conv2(x)))
        x = self.pool3(self.inception3b(self.inception3a(x)))
        x = self.inception4a(x)
        return self.aux1(x)


@dataclass
class TrainedModel:
    spec: ModelSpec
    net: nn.Module
    layer_map: dict[str, str]
    training_meta: dict = field(default_factory=dict)

    def module(self, layer: str) -> nn.Module:
        name = self.layer_map.get(layer, layer)
        modules = dict(self.net.named_modules())
        if name not in modules or name == "":
            raise KeyError(layer)
        return modules[name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def logits(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Evaluation-mode logits for ``uint8`` images ``(n, H, W, 3)``."""
        self.net.eval()
        out = [self.net(to_tensor(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.spec.n_classes), np.float32)


def to_tensor(images) -> torch.Tensor:
    """``uint8`` NHWC array to float NCHW tensor in [0, 1] (channels_last)."""
    t = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)
    return t.contiguous(memory_format=torch.channels_last)


def _init_net(factory, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = factory()
    return net.to(memory_format=torch.channels_last)


def build_simple_cnn(spec: ModelSpec) -> TrainedModel:
    if spec.arch != "simple_cnn":
        raise ConfigError(f"build_simple_cnn called with arch={spec.arch!r}")
    net = _init_net(lambda: SimpleCNN(spec.input_size, spec.n_classes, spec.dropout_rate), spec.init_seed)
    layer_map = {
        "conv1": "relu1",
        "conv2": "relu2",
        "conv3": "relu3",
        "last_conv": "relu3",
        "last_conv_pre": "conv3",
    }
    return TrainedModel(spec, net, layer_map)


def build_mini_googlenet(spec: ModelSpec) -> TrainedModel:
    if spec.arch != "mini_googlenet":
        raise ConfigError(f"build_mini_googlenet called with arch={spec.arch!r}")
    net = _init_net(lambda: MiniGoogLeNet(spec.n_classes, spec.width_mult, spec.dropout_rate), spec.init_seed)
    layer_map = {
        "inception3a": "inception3a.act",
        "inception3b": "inception3b.act",
        "inception4a": "inception4a.act",
        "last_conv": "inception4a.act",
        "last_conv_pre": "inception4a.pre",
    }
    return TrainedModel(spec, net, layer_map)


def build_model(spec: ModelSpec) -> TrainedModel:
    return {"simple_cnn": build_simple_cnn, "mini_googlenet": build_mini_googlenet}[spec.arch](spec)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0
    augmentation: tuple = (GeoAugConfig(),)
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for step in self.augmentation:
            if not isinstance(step, (GeoAugConfig, HsvJitterConfig)):
                raise ConfigError(f"unsupported augmentation step {step!r}")
        object.__setattr__(self, "augmentation", tuple(self.augmentation))


def _augment(images, pipeline, rng):
    if not pipeline:
        return images
    out = np.empty_like(images)
    for i, im in enumerate(images):
        for step in pipeline:
            if isinstance(step, HsvJitterConfig):
                im = hsv_color_augment(im, step, rng)
            else:
                im = geometric_augment(im, step, rng)
        out[i] = im
    return out


def _eval_loss_acc(net, images, labels, batch_size=128):
    net.eval()
    loss, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits = net(to_tensor(images[i : i + batch_size]))
            y = torch.from_numpy(labels[i : i + batch_size])
            loss += F.cross_entropy(logits, y, reduction="sum").item()
            correct += (logits.argmax(1) == y).sum().item()
    return loss / len(images), correct / len(images)


def train(
    model: TrainedModel,
    train_ds: PatchDataset,
    val_ds: PatchDataset,
    cfg: TrainConfig,
    train_images: np.ndarray | None = None,
    val_images: np.ndarray | None = None,
) -> tuple[TrainedModel, list[dict]]:
    """Minimize cross-entropy on ``train_ds`` and keep the epoch with the
    best validation accuracy.

    Augmentation applies to training patches only. Preloaded image arrays
    may be passed to skip disk reads; they must match the record order.
    Returns a new :class:`TrainedModel` and the per-epoch history.
    """
    if len(train_ds) == 0:
        raise TrainingError("empty training set", code="empty_dataset")
    if len(val_ds) == 0:
        raise TrainingError("empty validation set", code="empty_dataset")
    overlap = train_ds.slide_ids & val_ds.slide_ids
    if overlap:
        raise TrainingError(f"train/val share slides: {sorted(overlap)[:5]}", code="slide_overlap")

    x_train = train_ds.load_images() if train_images is None else train_images
    x_val = val_ds.load_images() if val_images is None else val_images
    y_train, y_val = train_ds.labels, val_ds.labels

    net = copy.deepcopy(model.net)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.optimizer == "sgd":
            opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        else:
            opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

        history = []
        best_acc, best_state, best_epoch, stale = -1.0, None, 0, 0
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(x_train))
            xb_all = _augment(x_train[order], cfg.augmentation, rng)
            yb_all = y_train[order]
            net.train()
            total, correct, seen = 0.0, 0, 0
            for i in range(0, len(order), cfg.batch_size):
                xb = to_tensor(xb_all[i : i + cfg.batch_size])
                yb = torch.from_numpy(yb_all[i : i + cfg.batch_size])
                opt.zero_grad()
                logits = net(xb)
                loss = F.cross_entropy(logits, yb)
                loss.backward()
                opt.step()
                total += loss.item() * len(yb)
                correct += (logits.argmax(1) == yb).sum().item()
                seen += len(yb)
            val_loss, val_acc = _eval_loss_acc(net, x_val, y_val)
            row = dict(epoch=epoch, train_loss=total / seen, train_acc=correct / seen, val_loss=val_loss, val_acc=val_acc)
            history.append(row)
            log.info("epoch %d train_loss=%.4f val_acc=%.4f", epoch, row["train_loss"], val_acc)
            if not np.isfinite(row["train_loss"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}", code="diverged")
            if val_acc > best_acc:
                best_acc, best_epoch, stale = val_acc, epoch, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

        net.load_state_dict(best_state)
    net.eval()
    meta = dict(seed=cfg.seed, epochs=len(history), best_epoch=best_epoch, val_accuracy=best_acc)
    return TrainedModel(model.spec, net, dict(model.layer_map), meta), history


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"], lineterminator="\n")
        w.writeheader()
        w.writerows(history)


@dataclass
class AccuracyReport:
    overall: float
    per_domain: dict[str, float]
    n: int


def evaluate_accuracy(model: TrainedModel, ds: PatchDataset, images: np.ndarray | None = None) -> AccuracyReport:
    """Argmax accuracy, overall and per ``domain_id``. No augmentation."""
    if len(ds) == 0:
        raise TrainingError("cannot evaluate on an empty dataset", code="empty_dataset")
    images = ds.load_images() if images is None else images
    pred = model.logits(images).argmax(1)
    hit = pred == ds.labels
    domains = np.array(ds.domain_ids)
    per_domain = {d: float(hit[domains == d].mean()) for d in sorted(set(ds.domain_ids))}
    return AccuracyReport(float(hit.mean()), per_domain, len(ds))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"DSCK"
_CKPT_VERSION = 1


def save_checkpoint(model: TrainedModel, path) -> None:
    """``DSCK`` + u8 version + u32 header length + JSON header + torch state."""
    header = json.dumps(
        dict(spec=asdict(model.spec), layer_map=model.layer_map, training_meta=model.training_meta,
             fingerprint=model.fingerprint()),
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    torch.save(model.net.state_dict(), buf)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<BI", _CKPT_VERSION, len(header)) + header + buf.getvalue())


def load_checkpoint(path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != _CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[9 : 9 + hlen])
    spec = ModelSpec(**header["spec"])
    model = build_model(spec)
    state = torch.load(io.BytesIO(raw[9 + hlen :]), weights_only=True)
    model.net.load_state_dict(state)
    model.net.eval()
    model.layer_map = header["layer_map"]
    model.training_meta = header["training_meta"]
    return model
