"""
Channel-flexible convolutional classifiers (PyTorch, CPU).

The first convolution takes ``input_channels`` planes, so the same preset
trains on 1, 3, 4 or 8-layer patches. Patches come in channels-last
(N, k, k, c) and are standardised per channel with statistics frozen from
the training set.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ModelError, ShapeMismatch

PRESETS = ("flexcnn-small", "resnet-mini", "resnet34")
LOSSES = ("cross_entropy", "weighted_cross_entropy", "focal")

# training schedules: (batch_size, epochs, lr_step)
PROFILES = {
    "desk": {"batch_size": 64, "epochs": 50, "lr_step": 20},
    "full": {"batch_size": 512, "epochs": 400, "lr_step": 100},
}


@dataclass(frozen=True)
class FlexCnnConfig:
    input_channels: int
    n_classes: int
    preset: str = "flexcnn-small"
    widths: tuple = (16, 32, 64)
    batch_size: int = 64
    epochs: int = 50
    lr: float = 0.1
    lr_step: int = 20
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True
    flip_p: float = 0.5
    crop_pad: int = 4
    loss: str = "cross_entropy"
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def from_profile(cls, profile: str, **kwargs) -> "FlexCnnConfig":
        return cls(**{**PROFILES[profile], **kwargs})

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def _conv_bn(cin, cout, k=3):
    return nn.Sequential(nn.Conv2d(cin, cout, k, padding=k // 2, bias=False), nn.BatchNorm2d(cout))


class PlainBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = _conv_bn(cin, cout)

    def forward(self, x):
        return F.max_pool2d(F.relu(self.body(x)), 2, ceil_mode=True)


class ResidualBlock(nn.Module):
    """conv-bn-relu-conv-bn plus a shortcut (1x1 projection when widths differ)."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class MiniResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.block = ResidualBlock(cin, cout)

    def forward(self, x):
        return F.avg_pool2d(self.block(x), 2, ceil_mode=True)


class FlexNet(nn.Module):
    def __init__(self, config: FlexCnnConfig):
        super().__init__()
        c = config.input_channels
        if config.preset == "flexcnn-small":
            blocks, cin = [], c
            for w in config.widths:
                blocks.append(PlainBlock(cin, w))
                cin = w
            self.stem = nn.Identity()
            self.features = nn.Sequential(*blocks)
            width = cin
        elif config.preset == "resnet-mini":
            w0 = config.widths[0]
            self.stem = nn.Sequential(_conv_bn(c, w0), nn.ReLU())
            blocks, cin = [], w0
            for w in config.widths:
                blocks.append(MiniResBlock(cin, w))
                cin = w
            self.features = nn.Sequential(*blocks)
            width = cin
        else:  # resnet34, 3x3 stem for small patches
            self.stem = nn.Sequential(_conv_bn(c, 64), nn.ReLU())
            blocks, cin = [], 64
            for w, n, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
                for i in range(n):
                    blocks.append(ResidualBlock(cin, w, stride if i == 0 else 1))
                    cin = w
            self.features = nn.Sequential(*blocks)
            width = 512
        self.classifier = nn.Linear(width, config.n_classes)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # small head keeps initial logits near zero, so the first loss ~ ln(classes)
        nn.init.normal_(self.classifier.weight, std=0.01)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, x):
        x = self.features(self.stem(x))
        return self.classifier(x.mean(dim=(2, 3)))


def build_network(config: FlexCnnConfig, dtype=torch.float32) -> FlexNet:
    """Fresh network initialised from ``config.seed`` (global RNG state untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = FlexNet(config)
    return net.to(dtype)


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def _loss_fn(config: FlexCnnConfig, labels: np.ndarray):
    if config.loss == "cross_entropy":
        return nn.CrossEntropyLoss()
    counts = np.bincount(labels, minlength=config.n_classes).astype(np.float64)
    weights = torch.tensor(counts.sum() / np.maximum(counts, 1) / config.n_classes,
                           dtype=torch.float32)
    if config.loss == "weighted_cross_entropy":
        return nn.CrossEntropyLoss(weight=weights)

    def focal(logits, target):
        logp = F.log_softmax(logits, dim=1).gather(1, target[:, None])[:, 0]
        return (-(1 - logp.exp()) ** config.focal_gamma * logp).mean()

    return focal


def augment_batch(x, gen: torch.Generator, flip_p: float, pad: int):
    """Random horizontal flip and reflect-padded random crop, per sample."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < flip_p
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    pad = min(pad, h - 1, w - 1)
    if pad > 0:
        padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
        dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
        x = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    return x


@dataclass
class TrainingHistory:
    epoch_loss: list = field(default_factory=list)
    first_batch_loss: float | None = None
    wall_time: float = 0.0


class FlexCnnModel:
    """A trained network plus the input standardisation it was trained with."""

    def __init__(self, net: FlexNet, config: FlexCnnConfig, mean, std, k: int, history=None):
        self.net = net.eval()
        self.config = config
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.k = int(k)
        self.history = history or TrainingHistory()

    def _tensor(self, patches):
        patches = np.asarray(patches, dtype=np.float32)
        if patches.ndim != 4 or patches.shape[1:] != (self.k, self.k, self.config.input_channels):
            raise ShapeMismatch(
                f"model expects (N, {self.k}, {self.k}, {self.config.input_channels}) patches, "
                f"got {patches.shape}")
        x = (patches - self.mean) / self.std
        return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))

    def scores(self, patches, batch_size: int = 256):
        """Softmax class probabilities, shape (N, classes)."""
        x = self._tensor(patches)
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(F.softmax(self.net(x[i:i + batch_size]), dim=1))
        if not out:
            return np.zeros((0, self.config.n_classes), dtype=np.float32)
        return torch.cat(out).numpy()

    def predict(self, patches):
        """Argmax class per patch; returns (classes, scores)."""
        s = self.scores(patches)
        return np.argmax(s, axis=1), s


def cnn_train(patches, labels, config: FlexCnnConfig, *, drop_last: bool = False,
              callback=None) -> FlexCnnModel:
    """SGD with momentum and weight decay, step learning-rate schedule.

    Mini-batches are reshuffled every epoch; augmentation (if enabled) is
    applied to training batches only. All randomness comes from
    ``config.seed``.
    """
    patches = np.asarray(patches, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if patches.ndim != 4:
        raise ShapeMismatch(f"expected (N, k, k, c) patches, got {patches.shape}")
    n, k, k2, c = patches.shape
    if k != k2:
        raise ShapeMismatch("patches must be square")
    if c != config.input_channels:
        raise ShapeMismatch(f"patches have {c} channels, config expects {config.input_channels}")
    if len(labels) != n or n == 0:
        raise ModelError("need one label per patch and at least one patch")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise ModelError("labels must be class indices in [0, n_classes)")
    if drop_last and n < config.batch_size:
        raise ModelError("fewer samples than one batch with drop_last enabled")

    mean = patches.mean(axis=(0, 1, 2))
    std = patches.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0).astype(np.float32)
    x_all = torch.from_numpy(np.ascontiguousarray(((patches - mean) / std).transpose(0, 3, 1, 2)))
    y_all = torch.from_numpy(labels)

    net = build_network(config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.lr_step, gamma=config.lr_gamma)
    loss_fn = _loss_fn(config, labels)
    history = TrainingHistory()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        stop = n - n % config.batch_size if drop_last else n
        for i in range(0, stop, config.batch_size):
            idx = order[i:i + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            xb = x_all[idx]
            if config.augment:
                xb = augment_batch(xb, gen, config.flip_p, config.crop_pad)
            loss = loss_fn(net(xb), y_all[idx])
            if history.first_batch_loss is None:
                history.first_batch_loss = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        history.epoch_loss.append(total / max(seen, 1))
        if callback is not None:
            callback(epoch, history.epoch_loss[-1])
        if not math.isfinite(history.epoch_loss[-1]):
            raise ModelError(f"training diverged at epoch {epoch}")
    history.wall_time = time.perf_counter() - start
    return FlexCnnModel(net, config, mean, std, k, history)


def cnn_predict(model: FlexCnnModel, patches):
    return model.predict(patches)


# -- (de)serialisation helpers for the model blob ------------------------------

def cnn_to_arrays(model: FlexCnnModel):
    arrays = [("input.mean", model.mean), ("input.std", model.std)]
    for name, t in model.net.state_dict().items():
        arrays.append((f"net.{name}", t.detach().cpu().numpy()))
    return arrays


def cnn_from_arrays(arrays, config: FlexCnnConfig, k: int) -> FlexCnnModel:
    net = build_network(config)
    state = net.state_dict()
    for name, t in state.items():
        value = arrays[f"net.{name}"]
        state[name] = torch.from_numpy(np.asarray(value)).to(t.dtype).reshape(t.shape)
    net.load_state_dict(state)
    return FlexCnnModel(net, config, arrays["input.mean"], arrays["input.std"], k)


def config_from_params(params: dict, *, input_channels, n_classes, architecture) -> FlexCnnConfig:
    """FlexCnnConfig from query ``params`` (``profile`` picks desk/full defaults)."""
    profile = params.get("profile", "desk")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    preset = params.get("preset", "resnet-mini" if architecture == "resnet" else "flexcnn-small")
    kwargs = dict(PROFILES[profile])
    for key in ("epochs", "batch_size", "lr", "lr_step", "momentum", "weight_decay", "loss",
                "augment", "widths", "seed"):
        if key in params:
            kwargs[key] = params[key]
    return FlexCnnConfig(input_channels=input_channels, n_classes=n_classes, preset=preset,
                         **kwargs)

