"""Target and evaluation classifiers: architectures, training, checkpoint IO."""

import hashlib
import json
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch


def _as_values(batch):
    return batch.values if isinstance(batch, ImageBatch) else batch


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class ResNetSmall(nn.Module):
    """CIFAR-style residual network (ResNet-18 layout, configurable width)."""

    def __init__(self, in_ch, K, width=64):
        super().__init__()
        w = width
        self.conv1 = nn.Conv2d(in_ch, w, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.layer1 = self._stage(w, w, 2, 1)
        self.layer2 = self._stage(w, 2 * w, 2, 2)
        self.layer3 = self._stage(2 * w, 4 * w, 2, 2)
        self.layer4 = self._stage(4 * w, 8 * w, 2, 2)
        self.feature_dim = 8 * w
        self.fc = nn.Linear(self.feature_dim, K)

    @staticmethod
    def _stage(in_ch, out_ch, blocks, stride):
        layers = [_BasicBlock(in_ch, out_ch, stride)]
        layers += [_BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def features(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.layer4(self.layer3(self.layer2(self.layer1(h))))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


class VGGSmall(nn.Module):
    """VGG-style plain conv stack, architecturally distinct from ResNetSmall."""

    def __init__(self, in_ch, K, width=32):
        super().__init__()
        w = width
        cfg = [w, "M", 2 * w, "M", 4 * w, 4 * w, "M", 8 * w, 8 * w, "M"]
        layers, c = [], in_ch
        for v in cfg:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(c, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                c = v
        self.conv = nn.Sequential(*layers)
        self.feature_dim = 8 * w
        self.fc = nn.Linear(self.feature_dim, K)

    def features(self, x):
        return F.adaptive_avg_pool2d(self.conv(x), 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


class ConvTiny(nn.Module):
    """Small two-conv network for toy experiments and fast tests."""

    def __init__(self, in_ch, K, width=16):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(inplace=True))
        self.feature_dim = 2 * width
        self.fc = nn.Linear(self.feature_dim, K)

    def features(self, x):
        return F.adaptive_avg_pool2d(self.conv(x), 1).flatten(1)

    def forward(self, x):
        return self.fc(self.features(x))


class IntensityNet(nn.Module):
    """Analytic perfect classifier for the solid-intensity toy dataset.

    Class k (1-based) corresponds to mean intensity (k - 0.5) / K; the logit is
    the negative squared distance to that level, scaled by ``sharpness``.
    """

    def __init__(self, in_ch, K, sharpness=200.0):
        super().__init__()
        self.register_buffer("levels", (torch.arange(K, dtype=torch.float32) + 0.5) / K)
        self.sharpness = sharpness
        self.feature_dim = 1

    def features(self, x):
        return x.mean(dim=(1, 2, 3), keepdim=False)[:, None]

    def forward(self, x):
        m = x.mean(dim=(1, 2, 3))
        return -self.sharpness * (m[:, None] - self.levels[None, :]) ** 2


ARCHITECTURES = {
    "resnet_small": ResNetSmall,
    "vgg_small": VGGSmall,
    "conv_tiny": ConvTiny,
    "intensity": IntensityNet,
}


@dataclass
class Classifier:
    """A trained classifier exposing logits, probabilities and penultimate features."""

    architecture: str
    K: int
    net: nn.Module
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self):
        return self.net.feature_dim

    def logits(self, x):
        """Differentiable logits on an image tensor (N, C, H, W)."""
        self.net.eval()
        return self.net(_as_values(x))

    def predict_logits(self, batch):
        self.net.eval()
        with torch.no_grad():
            o = self.net(_as_values(batch))
        if not torch.isfinite(o).all():
            raise RuntimeError("non-finite logits")
        return o

    def predict_probs(self, batch):
        return torch.softmax(self.predict_logits(batch), dim=1)

    def penultimate_features(self, batch):
        self.net.eval()
        with torch.no_grad():
            return self.net.features(_as_values(batch))

    def parameter_hash(self):
        h = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        torch.save({"state_dict": self.net.state_dict(),
                    "architecture": self.architecture,
                    "K": self.K,
                    "in_ch": self.meta.get("in_ch"),
                    "width": self.meta.get("width"),
                    "meta": self.meta}, path)
        with open(path + ".json", "w") as f:
            json.dump({"architecture": self.architecture, "K": self.K,
                       "feature_dim": self.feature_dim, **{k: v for k, v in self.meta.items()
                                                           if isinstance(v, (int, float, str, bool))}},
                      f, indent=2)

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        kwargs = {}
        if ckpt.get("width") is not None:
            kwargs["width"] = ckpt["width"]
        net = ARCHITECTURES[ckpt["architecture"]](ckpt["in_ch"], ckpt["K"], **kwargs)
        net.load_state_dict(ckpt["state_dict"])
        return cls(ckpt["architecture"], ckpt["K"], net, meta=ckpt.get("meta", {}))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    width: int = None  # architecture default when None
    val_fraction: float = 0.1
    seed: int = 0
    device: str = "cpu"


def train_classifier(batch, arch, config=None):
    """Train a classifier on a labeled ImageBatch. Labels must cover {1..K} with K >= 2."""
    config = config or TrainConfig()
    if batch.labels is None:
        raise ValueError("training requires labels")
    labels = batch.labels
    K = int(labels.max().item())
    if K < 2:
        raise ValueError("degenerate label space: need at least 2 classes")
    if labels.min() < 1:
        raise ValueError("labels must be in {1..K}")

    torch.manual_seed(config.seed)
    in_ch = batch.values.shape[1]
    kwargs = {"width": config.width} if config.width else {}
    net = ARCHITECTURES[arch](in_ch, K, **kwargs).to(config.device)

    n = len(batch)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(config.seed))
    n_val = int(n * config.val_fraction)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = batch.values[train_idx], labels[train_idx] - 1
    x_val, y_val = batch.values[val_idx], labels[val_idx] - 1

    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    device = config.device

    net.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(x_train), generator=torch.Generator().manual_seed(config.seed + epoch))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            out = net(x_train[idx].to(device))
            loss = F.cross_entropy(out, y_train[idx].to(device))
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss={loss.item()}")
            loss.backward()
            opt.step()
        sched.step()

    net.eval()
    def _accuracy(x, y):
        if len(x) == 0:
            return float("nan")
        correct = 0
        with torch.no_grad():
            for start in range(0, len(x), 512):
                pred = net(x[start:start + 512].to(device)).argmax(dim=1).cpu()
                correct += (pred == y[start:start + 512]).sum().item()
        return correct / len(x)

    meta = {"in_ch": in_ch, "width": config.width, "seed": config.seed,
            "train_accuracy": _accuracy(x_train, y_train),
            "val_accuracy": _accuracy(x_val, y_val)}
    return Classifier(arch, K, net.cpu(), meta=meta)


def perfect_intensity_classifier(K, in_ch=1, sharpness=200.0):
    """The analytic target for the solid-intensity toy protocol."""
    net = IntensityNet(in_ch, K, sharpness=sharpness)
    return Classifier("intensity", K, net, meta={"in_ch": in_ch, "analytic": True})
