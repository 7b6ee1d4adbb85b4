"""Dataset loading, private/public splitting and image preprocessing.

Images are carried everywhere as float tensors of shape (N, C, H, W) with
values in [0, 1]. Private labels are remapped to {1..K}; public images carry
no labels.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ImageBatch:
    """A batch of images in [0, 1] with optional 1-based integer labels."""

    values: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ValueError(f"expected (N, C, H, W), got shape {tuple(self.values.shape)}")
        if self.values.numel() and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
            if self.labels.shape[0] != self.values.shape[0]:
                raise ValueError("labels length must match batch size")
            if self.labels.numel() and self.labels.min() < 1:
                raise ValueError("labels must be 1-based")

    def __len__(self):
        return self.values.shape[0]

    @property
    def image_shape(self):
        return tuple(self.values.shape[1:])


@dataclass
class DatasetSplit:
    """Private (labeled) and public (unlabeled) parts of a dataset."""

    private: ImageBatch
    public: ImageBatch
    K: int
    image_shape: tuple
    private_ids: list = field(default_factory=list)
    public_ids: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.private_ids and self.public_ids:
            overlap = set(self.private_ids) & set(self.public_ids)
            if overlap:
                raise ValueError(f"private/public record overlap: {sorted(overlap)[:5]} ...")


CANONICAL_SHAPES = {
    "mnist": (1, 32, 32),
    "cifar10": (3, 32, 32),
}


def preprocess(values, target_shape):
    """Center-crop to square, resize bilinearly, scale to [0, 1].

    Accepts uint8 or float tensors/arrays of shape (N, C, H, W). Idempotent on
    batches already at the target shape and range.
    """
    C, H, W = target_shape
    if C <= 0 or H <= 0 or W <= 0:
        raise ValueError(f"non-positive target shape {target_shape}")
    x = torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values)
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {tuple(x.shape)}")
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    else:
        x = x.float()
        if x.numel() and x.max() > 1.5:
            x = x / 255.0
    if not torch.isfinite(x).all():
        raise ValueError("corrupt image: non-finite pixel values")

    n, c_in, h_in, w_in = x.shape
    if c_in != C:
        if c_in == 1:
            x = x.repeat(1, C, 1, 1)
        elif c_in == 3 and C == 1:
            x = x.mean(dim=1, keepdim=True)
        else:
            raise ValueError(f"cannot convert {c_in} channels to {C}")
    side = min(h_in, w_in)
    top = (h_in - side) // 2
    left = (w_in - side) // 2
    x = x[:, :, top:top + side, left:left + side]
    if x.shape[-2:] != (H, W):
        x = F.interpolate(x, size=(H, W), mode="bilinear", align_corners=False)
    return x.clamp(0.0, 1.0)


def _load_torchvision(dataset_name, data_root, train=True):
    import torchvision

    cls = {"mnist": torchvision.datasets.MNIST,
           "cifar10": torchvision.datasets.CIFAR10}[dataset_name]
    try:
        ds = cls(root=data_root, train=train, download=False)
    except RuntimeError as e:
        raise FileNotFoundError(
            f"{dataset_name} not found under {data_root!r}; place the raw files "
            f"there first (this environment cannot download them)") from e
    data = ds.data
    if isinstance(data, torch.Tensor):
        arr = data.numpy()
    else:
        arr = np.asarray(data)
    if arr.ndim == 3:          # (N, H, W) grayscale
        arr = arr[:, None, :, :]
    else:                      # (N, H, W, C)
        arr = arr.transpose(0, 3, 1, 2)
    labels = np.asarray(ds.targets)
    return arr, labels


def _synthetic_images(n, shape, labels, rng):
    """Deterministic toy images: class k is a noisy solid block at intensity level k."""
    C, H, W = shape
    levels = (labels.astype(np.float64) + 0.5) / (labels.max() + 1.0)
    imgs = np.tile(levels[:, None, None, None], (1, C, H, W))
    imgs = imgs + rng.normal(0, 0.02, size=imgs.shape)
    return np.clip(imgs, 0, 1).astype(np.float32)


def load_split(dataset_name, protocol, data_root="data", seed=0):
    """Build the private/public split for a dataset.

    ``protocol`` is a dict with ``private_labels`` and ``public_labels``
    (disjoint original-label sets) and an optional ``image_shape``. The
    synthetic dataset additionally honours ``n_per_class``.
    """
    private_labels = sorted(protocol["private_labels"])
    public_labels = sorted(protocol["public_labels"])
    if set(private_labels) & set(public_labels):
        raise ValueError("private and public label sets overlap")
    if not private_labels or not public_labels:
        raise ValueError("empty private or public label set")
    shape = tuple(protocol.get("image_shape") or CANONICAL_SHAPES.get(dataset_name, (1, 32, 32)))

    if dataset_name in ("mnist", "cifar10"):
        arr, labels = _load_torchvision(dataset_name, data_root)
        tag = dataset_name
    elif dataset_name == "synthetic":
        n_per_class = int(protocol.get("n_per_class", 64))
        rng = np.random.default_rng(seed)
        all_labels = np.repeat(np.array(private_labels + public_labels), n_per_class)
        arr = _synthetic_images(len(all_labels), shape, all_labels, rng)
        labels = all_labels
        tag = "synthetic"
    else:
        raise ValueError(f"unknown dataset {dataset_name!r}")

    labels = np.asarray(labels)
    priv_mask = np.isin(labels, private_labels)
    pub_mask = np.isin(labels, public_labels)
    priv_idx = np.nonzero(priv_mask)[0]
    pub_idx = np.nonzero(pub_mask)[0]
    if len(priv_idx) == 0 or len(pub_idx) == 0:
        raise ValueError("empty split")

    remap = {orig: k + 1 for k, orig in enumerate(private_labels)}
    priv_values = preprocess(arr[priv_idx] if isinstance(arr, np.ndarray) else arr[priv_idx], shape)
    pub_values = preprocess(arr[pub_idx] if isinstance(arr, np.ndarray) else arr[pub_idx], shape)
    priv_labels = torch.tensor([remap[int(l)] for l in labels[priv_idx]], dtype=torch.int64)

    return DatasetSplit(
        private=ImageBatch(priv_values, priv_labels),
        public=ImageBatch(pub_values),
        K=len(private_labels),
        image_shape=shape,
        private_ids=[f"{tag}:train:{i}" for i in priv_idx],
        public_ids=[f"{tag}:train:{i}" for i in pub_idx],
        meta={"dataset": dataset_name, "seed": seed, "resize_interpolation": "bilinear",
              "private_labels": private_labels, "public_labels": public_labels},
    )


def solid_intensity_dataset(K=4, n_per_class=64, shape=(1, 16, 16), noise=0.02, seed=0):
    """Toy dataset where class k (1-based) is a near-solid image at intensity (k - 0.5) / K."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(K), n_per_class)
    levels = (labels.astype(np.float64) + 0.5) / K
    imgs = np.tile(levels[:, None, None, None], (1,) + tuple(shape))
    if noise:
        imgs = imgs + rng.normal(0, noise, size=imgs.shape)
    imgs = np.clip(imgs, 0, 1).astype(np.float32)
    return ImageBatch(torch.from_numpy(imgs), torch.from_numpy(labels + 1))
