"""Stochastic, differentiable image augmentations used in GAN training and
latent reconstruction: random resized crop, horizontal flip, rotation, color jitter.

Every transform maps [0, 1] batches to [0, 1] batches of unchanged shape, and
gradients flow through to the input."""

from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF


def _uniform(lo, hi, rng):
    return lo + (hi - lo) * torch.rand((), generator=rng).item()


@dataclass
class AugmentationPolicy:
    """Togglable transform set; ``None``/0 disables the corresponding transform."""

    crop_scale: Optional[Tuple[float, float]] = (0.8, 1.0)
    flip_prob: float = 0.5
    rotation_degrees: float = 10.0
    jitter: float = 0.2  # brightness/contrast/saturation half-range

    @classmethod
    def identity(cls):
        return cls(crop_scale=None, flip_prob=0.0, rotation_degrees=0.0, jitter=0.0)

    def is_identity(self):
        return (self.crop_scale is None and self.flip_prob == 0.0
                and self.rotation_degrees == 0.0 and self.jitter == 0.0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        p = cls(**d)
        if p.crop_scale is not None:
            p.crop_scale = tuple(p.crop_scale)
        return p


def _random_resized_crop(x, scale, rng):
    n, c, h, w = x.shape
    s = _uniform(scale[0], scale[1], rng)
    side_h = max(1, round(h * s ** 0.5))
    side_w = max(1, round(w * s ** 0.5))
    top = int(torch.randint(0, h - side_h + 1, (), generator=rng).item())
    left = int(torch.randint(0, w - side_w + 1, (), generator=rng).item())
    patch = x[:, :, top:top + side_h, left:left + side_w]
    if (side_h, side_w) == (h, w):
        return patch
    return F.interpolate(patch, size=(h, w), mode="bilinear", align_corners=False)


def _random_flip(x, p, rng):
    coins = torch.rand(x.shape[0], generator=rng) < p
    if not coins.any():
        return x
    flipped = torch.flip(x, dims=[3])
    return torch.where(coins[:, None, None, None], flipped, x)


def _random_rotation(x, degrees, rng):
    angle = _uniform(-degrees, degrees, rng)
    if angle == 0.0:
        return x
    return TF.rotate(x, angle, interpolation=TF.InterpolationMode.BILINEAR)


def _color_jitter(x, j, rng):
    b = _uniform(1 - j, 1 + j, rng)      # brightness
    c = _uniform(1 - j, 1 + j, rng)      # contrast
    x = x * b
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * c + mean
    if x.shape[1] == 3:
        s = _uniform(1 - j, 1 + j, rng)  # saturation
        gray = x.mean(dim=1, keepdim=True)
        x = gray + (x - gray) * s
    return x


def apply_augmentations(x, policy, rng=None):
    """Apply one random draw of the policy to a batch in [0, 1]."""
    if rng is None:
        rng = torch.Generator()
    if policy.crop_scale is not None:
        x = _random_resized_crop(x, policy.crop_scale, rng)
    if policy.flip_prob > 0:
        x = _random_flip(x, policy.flip_prob, rng)
    if policy.rotation_degrees > 0:
        x = _random_rotation(x, policy.rotation_degrees, rng)
    if policy.jitter > 0:
        x = _color_jitter(x, policy.jitter, rng)
    return x.clamp(0.0, 1.0)
