"""Dataset loading, batching and the [0, 1] pixel-domain contract."""

import os
import pickle
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch

CIFAR_SHAPE = (3, 32, 32)
_RECORD = 3 * 32 * 32

# folder name -> (python-pickle dir, binary dir)
_LAYOUTS = {
    "cifar10": ("cifar-10-batches-py", "cifar-10-batches-bin"),
    "cifar100": ("cifar-100-python", "cifar-100-binary"),
}


class DatasetError(RuntimeError):
    pass


@dataclass
class LabeledImages:
    """Images of shape (N, C, H, W) in [0, 1] with 0-based integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "unnamed"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "LabeledImages":
        indices = np.asarray(indices)
        return LabeledImages(self.images[indices], self.labels[indices], self.class_count, self.name)

    def subsample(self, size: int, seed: int) -> "LabeledImages":
        if size >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.subset(np.sort(rng.choice(len(self), size=size, replace=False)))

    def tensors(self, device="cpu") -> Tuple[torch.Tensor, torch.Tensor]:
        return (torch.from_numpy(self.images).to(device), torch.from_numpy(self.labels).to(device))


@dataclass
class BatchPlan:
    # n = 1 is legal: each natural sample's adversarial twin is its positive
    batch_size: int = 8
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def clamp_to_domain(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(0.0, 1.0)
    return np.clip(x, 0.0, 1.0)


def load_dataset(name: str, split: str = "train", root: Optional[str] = None, **synthetic_kwargs) -> LabeledImages:
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    if name == "synthetic":
        seed = synthetic_kwargs.pop("seed", 0)
        # disjoint train/test draws from the same class prototypes
        return make_synthetic(seed=seed, sample_seed=[seed, 1 + (split == "test")], **synthetic_kwargs)
    if name not in _LAYOUTS:
        raise ValueError(f"unknown dataset {name!r}; expected cifar10, cifar100 or synthetic")
    if root is None:
        raise DatasetError(f"{name} needs a root directory")
    root = os.path.expanduser(str(root))
    py_dir, bin_dir = _LAYOUTS[name]
    for candidate in (os.path.join(root, py_dir), root):
        if _has_python_layout(name, candidate):
            images, labels = _read_python(name, split, candidate)
            break
    else:
        for candidate in (os.path.join(root, bin_dir), root):
            if _has_binary_layout(name, candidate):
                images, labels = _read_binary(name, split, candidate)
                break
        else:
            raise DatasetError(f"no {name} files found under {root}")
    class_count = 10 if name == "cifar10" else 100
    return LabeledImages(images.astype(np.float32) / 255.0, labels, class_count, name)


def _python_files(name, split):
    if name == "cifar10":
        return [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    return [split]


def _binary_files(name, split):
    if name == "cifar10":
        return [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    return [f"{split}.bin"]


def _has_python_layout(name, directory):
    return os.path.isfile(os.path.join(directory, _python_files(name, "test")[0]))


def _has_binary_layout(name, directory):
    return os.path.isfile(os.path.join(directory, _binary_files(name, "test")[0]))


def _read_python(name, split, directory):
    images, labels = [], []
    key = b"labels" if name == "cifar10" else b"fine_labels"
    for fname in _python_files(name, split):
        path = os.path.join(directory, fname)
        try:
            with open(path, "rb") as fh:
                entry = pickle.load(fh, encoding="bytes")
            data = np.asarray(entry[b"data"], dtype=np.uint8)
            images.append(data.reshape(-1, *CIFAR_SHAPE))
            labels.append(np.asarray(entry[key], dtype=np.int64))
        except (OSError, KeyError, ValueError, pickle.UnpicklingError, EOFError) as exc:
            raise DatasetError(f"failed to read {path}: {exc}") from exc
    return np.concatenate(images), np.concatenate(labels)


def _read_binary(name, split, directory):
    # cifar10 records: <label><3072 px>; cifar100: <coarse><fine><3072 px>
    header = 1 if name == "cifar10" else 2
    images, labels = [], []
    for fname in _binary_files(name, split):
        path = os.path.join(directory, fname)
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise DatasetError(f"failed to read {path}: {exc}") from exc
        if raw.size == 0 or raw.size % (header + _RECORD):
            raise DatasetError(f"failed to read {path}: size {raw.size} is not a whole number of records")
        rows = raw.reshape(-1, header + _RECORD)
        labels.append(rows[:, header - 1].astype(np.int64))
        images.append(rows[:, header:].reshape(-1, *CIFAR_SHAPE))
    return np.concatenate(images), np.concatenate(labels)


def make_synthetic(
    classes: int = 10,
    per_class: int = 16,
    shape: Tuple[int, int, int] = (3, 16, 16),
    seed: int = 0,
    sample_seed=None,
    signal: float = 0.12,
    noise: float = 0.08,
) -> LabeledImages:
    """Seeded toy images: a smooth per-class template plus pixel noise around mid-grey.

    Templates depend only on `seed`; `sample_seed` controls the noise draw so
    train/test splits share classes but not samples.
    """
    c, h, w = shape
    proto_rng = np.random.default_rng(seed)
    coarse = proto_rng.standard_normal((classes, c, 4, 4))
    # nearest upsampling keeps templates low-frequency
    templates = np.repeat(np.repeat(coarse, -(-h // 4), axis=2), -(-w // 4), axis=3)[:, :, :h, :w]
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(seed if sample_seed is None else sample_seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = 0.5 + signal * templates[labels] + noise * rng.standard_normal((len(labels), c, h, w))
    return LabeledImages(np.clip(images, 0.0, 1.0), labels, classes, "synthetic")


def make_batches(data: LabeledImages, plan: BatchPlan, epoch: int = 0) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    n = len(data)
    if plan.shuffle:
        order = np.random.default_rng([plan.seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    images, labels = data.tensors()
    batches = []
    for start in range(0, n, plan.batch_size):
        idx = torch.from_numpy(order[start:start + plan.batch_size])
        batches.append((images[idx], labels[idx]))
    return batches


def augment(images: torch.Tensor, generator: torch.Generator, padding: int = 4) -> torch.Tensor:
    """Random crop after zero padding plus random horizontal flip."""
    n, _, h, w = images.shape
    padded = torch.nn.functional.pad(images, (padding,) * 4)
    offsets = torch.randint(0, 2 * padding + 1, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(images)
    for i in range(n):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out
