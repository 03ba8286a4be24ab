"""Classifier architectures with an explicit encoder g / affine head h split."""

import torch
import torch.nn as nn
import torch.nn.functional as F

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2471, 0.2435, 0.2616)


class Normalize(nn.Module):
    """Per-channel standardization fused into the network so attacks stay in pixel units."""

    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class SplitClassifier(nn.Module):
    """f(x) = head(encoder(x)) with `head` a single nn.Linear."""

    encoder: nn.Module
    head: nn.Linear

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    def forward(self, x):
        return self.head(self.encoder(x))


class SmallCNN(SplitClassifier):
    """Four 3x3 convolutions, two max-pools, adaptive pooling, one hidden affine layer.

    About 100k parameters for 10 classes; accepts any H, W >= 4.
    """

    def __init__(self, num_classes=10, in_channels=3, width=32, feature_dim=128, normalize=None, batch_norm=False):
        super().__init__()

        def block(cin, cout):
            layers = [nn.Conv2d(cin, cout, 3, padding=1, bias=not batch_norm)]
            if batch_norm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU())
            return layers

        if normalize is None:
            normalize = (CIFAR10_MEAN, CIFAR10_STD) if in_channels == 3 else ((0.5,) * in_channels, (0.25,) * in_channels)
        mean, std = normalize
        self.encoder = nn.Sequential(
            Normalize(mean, std),
            *block(in_channels, width), *block(width, width), nn.MaxPool2d(2),
            *block(width, 2 * width), *block(2 * width, 2 * width), nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(8 * width, feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(feature_dim, num_classes)


class _WideBasic(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.equal = cin == cout and stride == 1
        self.shortcut = None if self.equal else nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        residual = x if self.equal else self.shortcut(out)
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + residual


class WideResNet(SplitClassifier):
    """Pre-activation WideResNet-depth-widen (34-10 gives a 640-d encoder output)."""

    def __init__(self, depth=34, widen=10, num_classes=10, normalize=(CIFAR10_MEAN, CIFAR10_STD)):
        super().__init__()
        if (depth - 4) % 6:
            raise ValueError("depth must be 6k + 4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        layers = [Normalize(*normalize), nn.Conv2d(3, widths[0], 3, padding=1, bias=False)]
        for stage, stride in zip(range(3), (1, 2, 2)):
            for i in range(n):
                cin = widths[stage] if i == 0 else widths[stage + 1]
                layers.append(_WideBasic(cin, widths[stage + 1], stride if i == 0 else 1))
        layers += [nn.BatchNorm2d(widths[3]), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(widths[3], num_classes)


def split_model(model: nn.Module):
    """Return (encoder g, head h) with h(g(x)) identical to model(x)."""
    if isinstance(model, SplitClassifier):
        return model.encoder, model.head
    if isinstance(model, nn.Sequential) and len(model) > 1 and isinstance(model[-1], nn.Linear):
        return model[:-1], model[-1]
    raise ValueError(f"cannot find a final affine layer in {type(model).__name__}")


def build_model(arch="small_cnn", num_classes=10, in_channels=3, **kwargs) -> SplitClassifier:
    if arch == "small_cnn":
        return SmallCNN(num_classes=num_classes, in_channels=in_channels, **kwargs)
    if arch.startswith("wrn"):
        # "wrn-34-10"
        _, depth, widen = arch.split("-")
        return WideResNet(int(depth), int(widen), num_classes=num_classes, **kwargs)
    raise ValueError(f"unknown architecture {arch!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
