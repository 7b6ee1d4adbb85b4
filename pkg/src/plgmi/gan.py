"""Pseudo-label-guided conditional GAN.

SNGAN-style residual generator with conditional batch normalization, projection
discriminator with spectral normalization on every weight, hinge adversarial
losses, and a classifier-guidance term on the generator."""

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .augment import AugmentationPolicy, apply_augmentations
from .losses import batched_inversion_loss


class _SpectralNorm(nn.Module):
    """Divide a weight by its largest singular value.

    The value of sigma is computed exactly (largest Gram eigenvalue, cached per
    weight version) so the bound sigma_max <= 1 + 1e-3 holds on the weight used
    in every forward pass; power iteration only maintains the singular vectors
    that carry the gradient of sigma.
    """

    n_power_iterations = 3

    def __init__(self, weight, eps=1e-12):
        super().__init__()
        mat = weight.detach().flatten(1)
        self.eps = eps
        self.register_buffer("u", F.normalize(torch.randn(mat.shape[0]), dim=0, eps=eps))
        self.register_buffer("v", F.normalize(torch.randn(mat.shape[1]), dim=0, eps=eps))
        self._cached_version = None
        self._cached_sigma = None
        self._iterate(mat, 20)

    @torch.no_grad()
    def _iterate(self, mat, iters=None):
        u, v = self.u, self.v
        for _ in range(iters or self.n_power_iterations):
            v = F.normalize(mat.t() @ u, dim=0, eps=self.eps)
            u = F.normalize(mat @ v, dim=0, eps=self.eps)
        self.u.copy_(u)
        self.v.copy_(v)

    @staticmethod
    @torch.no_grad()
    def _exact_sigma(mat):
        n, m = mat.shape
        if n == 1 or m == 1:
            return float(mat.norm())
        gram = mat @ mat.t() if n <= m else mat.t() @ mat
        lam = torch.linalg.eigvalsh(gram)[-1].clamp_min(0)
        return float(lam.sqrt())

    def forward(self, weight):
        mat = weight.flatten(1)
        version = weight._version
        if self._cached_sigma is None or version != self._cached_version:
            detached = mat.detach()
            if self.training:
                self._iterate(detached)
            self._cached_sigma = self._exact_sigma(detached)
            self._cached_version = version
        # clone so later in-place u/v updates don't invalidate this graph;
        # gradient flows through the power-iteration estimate, value is exact
        s_uv = torch.dot(self.u.clone(), mat @ self.v.clone())
        sigma = s_uv * (self._cached_sigma / s_uv.detach().clamp_min(self.eps))
        return weight / sigma


def spectral_norm(module, **_ignored):
    parametrize.register_parametrization(module, "weight", _SpectralNorm(module.weight))
    return module


class ConditionalBatchNorm2d(nn.Module):
    def __init__(self, num_features, K):
        super().__init__()
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gain = nn.Embedding(K, num_features)
        self.bias = nn.Embedding(K, num_features)
        nn.init.ones_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x, y):
        h = self.bn(x)
        g = self.gain(y)[:, :, None, None]
        b = self.bias(y)[:, :, None, None]
        return g * h + b


class GenBlock(nn.Module):
    def __init__(self, in_ch, out_ch, K):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(in_ch, K)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.bn2 = ConditionalBatchNorm2d(out_ch, K)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x, y):
        h = F.relu(self.bn1(x, y))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, y)))
        sc = self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))
        return h + sc


class ConditionalGenerator(nn.Module):
    """Class-conditional generator G(z, y). ``sample`` maps outputs to [0, 1]."""

    def __init__(self, K, latent_dim=128, base_ch=64, output_shape=(1, 32, 32)):
        super().__init__()
        C, H, W = output_shape
        if H != W or H & (H - 1) or H < 8:
            raise ValueError(f"output side must be a power of two >= 8, got {H}x{W}")
        self.K = K
        self.latent_dim = latent_dim
        self.output_shape = tuple(output_shape)
        n_up = int(math.log2(H // 4))
        chs = [base_ch * 2 ** min(i, 3) for i in range(n_up, -1, -1)]
        self.fc = nn.Linear(latent_dim, chs[0] * 4 * 4)
        self.blocks = nn.ModuleList(
            [GenBlock(chs[i], chs[i + 1], K) for i in range(n_up)])
        self.bn_out = nn.BatchNorm2d(chs[-1])
        self.conv_out = nn.Conv2d(chs[-1], C, 3, 1, 1)
        self._c0 = chs[0]

    def forward(self, z, classes):
        """Raw tanh output in [-1, 1]; ``classes`` is 1-based."""
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"latent dim {z.shape[1]} != {self.latent_dim}")
        classes = torch.as_tensor(classes, dtype=torch.int64, device=z.device)
        if classes.numel() and (classes.min() < 1 or classes.max() > self.K):
            raise ValueError("class labels must be in {1..K}")
        y = classes - 1
        h = self.fc(z).view(z.shape[0], self._c0, 4, 4)
        for block in self.blocks:
            h = block(h, y)
        h = F.relu(self.bn_out(h))
        return torch.tanh(self.conv_out(h))

    def sample(self, z, classes):
        """Generate images in [0, 1] (inference mode)."""
        self.eval()
        with torch.no_grad():
            return self.generate(z, classes)

    def generate(self, z, classes):
        """Differentiable [0, 1] output for loss computation."""
        return (self.forward(z, classes) + 1.0) / 2.0


class DiscBlock(nn.Module):
    def __init__(self, in_ch, out_ch, downsample=True, first=False):
        super().__init__()
        self.conv1 = spectral_norm(nn.Conv2d(in_ch, out_ch, 3, 1, 1))
        self.conv2 = spectral_norm(nn.Conv2d(out_ch, out_ch, 3, 1, 1))
        self.skip = spectral_norm(nn.Conv2d(in_ch, out_ch, 1))
        self.downsample = downsample
        self.first = first

    def forward(self, x):
        h = x if self.first else F.relu(x)
        h = self.conv2(F.relu(self.conv1(h)))
        sc = self.skip(x)
        if self.downsample:
            h = F.avg_pool2d(h, 2)
            sc = F.avg_pool2d(sc, 2)
        return h + sc


class ConditionalDiscriminator(nn.Module):
    """Projection discriminator; every weight is spectrally normalized."""

    def __init__(self, K, base_ch=64, input_shape=(1, 32, 32)):
        super().__init__()
        C, H, W = input_shape
        self.K = K
        n_down = int(math.log2(H // 4))
        chs = [base_ch * 2 ** min(i, 3) for i in range(n_down + 1)]
        blocks = [DiscBlock(C, chs[0], first=True)]
        blocks += [DiscBlock(chs[i], chs[i + 1]) for i in range(n_down)]
        self.blocks = nn.ModuleList(blocks)
        self.fc = spectral_norm(nn.Linear(chs[-1], 1))
        self.embed = spectral_norm(nn.Embedding(K, chs[-1]))

    def forward(self, x, classes):
        classes = torch.as_tensor(classes, dtype=torch.int64, device=x.device)
        y = classes - 1
        h = x
        for block in self.blocks:
            h = block(h)
        h = F.relu(h).sum(dim=(2, 3))
        out = self.fc(h).squeeze(1)
        out = out + (self.embed(y) * h).sum(dim=1)
        return out


def spectral_norm_sigmas(disc):
    """Exact largest singular value of every spectrally normalized weight in ``disc``.

    Refreshes the power-iteration state first so the value reflects the weight
    the next forward pass will use."""
    sigmas = {}
    for name, module in disc.named_modules():
        if isinstance(module, _SpectralNorm):
            owner = name.rsplit(".parametrizations.", 1)[0]
            w = disc.get_submodule(owner).weight.detach()
            sigmas[owner] = torch.linalg.matrix_norm(w.flatten(1), ord=2).item()
    return sigmas


def discriminator_loss(d_real, d_fake):
    """Hinge loss: mean relu(1 - D(x, y)) + mean relu(1 + D(G(z, y), y))."""
    if not (torch.isfinite(d_real).all() and torch.isfinite(d_fake).all()):
        raise ValueError("non-finite discriminator scores")
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def generator_loss(d_fake, gen_batch=None, labels=None, target=None,
                   policy=None, alpha=0.0, inv_loss="mm", rng=None):
    """Adversarial term -mean(D(G(z,y),y)) plus alpha-weighted classifier guidance.

    The guidance term runs one stochastic augmentation of ``gen_batch`` through
    the (frozen) target and applies the chosen inversion loss against ``labels``.
    """
    adv = -d_fake.mean()
    if alpha == 0.0:
        return adv
    if gen_batch is None or labels is None or target is None:
        raise ValueError("alpha > 0 requires gen_batch, labels and target")
    views = gen_batch if policy is None else apply_augmentations(gen_batch, policy, rng)
    logits = target.logits(views)
    inv = batched_inversion_loss(logits, labels, inv_loss)
    total = adv + alpha * inv
    if not torch.isfinite(total):
        raise ValueError("non-finite generator loss")
    return total


@dataclass
class GanConfig:
    latent_dim: int = 128
    base_ch: int = 64
    batch_size: int = 64
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    betas: Tuple[float, float] = (0.0, 0.9)
    alpha: float = 0.2
    inv_loss: str = "mm"
    total_iters: int = 10000
    d_steps: int = 1
    policy: Optional[AugmentationPolicy] = None
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 2000
    device: str = "cpu"


@dataclass
class GanTrainState:
    generator: ConditionalGenerator
    discriminator: ConditionalDiscriminator
    iteration: int
    alpha: float
    history: list = field(default_factory=list)  # (iter, d_loss, g_adv, g_inv)


def save_gan_checkpoint(path, G, D, config, iteration):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save({"generator": G.state_dict(), "discriminator": D.state_dict(),
                "K": G.K, "latent_dim": G.latent_dim,
                "base_ch": config.base_ch, "output_shape": G.output_shape,
                "iteration": iteration}, path)


def load_generator(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    G = ConditionalGenerator(ckpt["K"], ckpt["latent_dim"], ckpt["base_ch"],
                             tuple(ckpt["output_shape"]))
    G.load_state_dict(ckpt["generator"])
    G.eval()
    return G


def train_cgan(images, labels, target, config, image_shape=None):
    """Alternating hinge-loss training of the conditional GAN.

    ``images``/``labels`` form the pseudo-labeled training set; ``target`` stays
    frozen throughout (its parameters are bit-identical before and after).
    Returns the final GanTrainState.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    labels = torch.as_tensor(labels, dtype=torch.int64)
    K = int(labels.max().item())
    shape = tuple(image_shape or images.shape[1:])
    policy = config.policy if config.policy is not None else AugmentationPolicy()

    torch.manual_seed(config.seed)
    device = config.device
    G = ConditionalGenerator(K, config.latent_dim, config.base_ch, shape).to(device)
    D = ConditionalDiscriminator(K, config.base_ch, shape).to(device)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.g_lr, betas=config.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.d_lr, betas=config.betas)

    target_requires = [p.requires_grad for p in target.net.parameters()]
    for p in target.net.parameters():
        p.requires_grad_(False)

    # index images per class for uniform class sampling
    by_class = {k: torch.nonzero(labels == k).squeeze(1) for k in range(1, K + 1)}
    for k, idx in by_class.items():
        if idx.numel() == 0:
            raise ValueError(f"class {k} has no training images")

    rng = torch.Generator().manual_seed(config.seed)
    aug_rng = torch.Generator().manual_seed(config.seed + 1)
    state = GanTrainState(G, D, 0, config.alpha)
    last_good = None

    def _real_batch():
        ys = torch.randint(1, K + 1, (config.batch_size,), generator=rng)
        idx = torch.stack([
            by_class[int(y)][torch.randint(0, len(by_class[int(y)]), (), generator=rng)]
            for y in ys])
        return images[idx].to(device), ys.to(device)

    try:
        for it in range(1, config.total_iters + 1):
            for _ in range(config.d_steps):
                x_real, y_real = _real_batch()
                z = torch.randn(config.batch_size, config.latent_dim, generator=rng).to(device)
                y_fake = torch.randint(1, K + 1, (config.batch_size,), generator=rng).to(device)
                G.train(); D.train()
                with torch.no_grad():
                    x_fake = G.generate(z, y_fake)
                d_loss = discriminator_loss(D(x_real, y_real), D(x_fake, y_fake))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            z = torch.randn(config.batch_size, config.latent_dim, generator=rng).to(device)
            y_fake = torch.randint(1, K + 1, (config.batch_size,), generator=rng).to(device)
            x_fake = G.generate(z, y_fake)
            d_fake = D(x_fake, y_fake)
            g_adv = -d_fake.mean()
            if config.alpha > 0:
                views = apply_augmentations(x_fake, policy, aug_rng)
                g_inv = batched_inversion_loss(target.logits(views), y_fake, config.inv_loss)
                g_loss = g_adv + config.alpha * g_inv
            else:
                g_inv = torch.zeros(())
                g_loss = g_adv
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise RuntimeError(
                    f"GAN training diverged at iteration {it} "
                    f"(d={float(d_loss)}, g={float(g_loss)}); last checkpoint: {last_good}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            state.iteration = it
            state.history.append((it, d_loss.item(), g_adv.item(),
                                  float(g_inv.detach())))
            if config.checkpoint_dir and (it % config.checkpoint_every == 0
                                          or it == config.total_iters):
                path = os.path.join(config.checkpoint_dir, f"gan_{it}.ckpt")
                save_gan_checkpoint(path, G, D, config, it)
                last_good = path
    finally:
        for p, flag in zip(target.net.parameters(), target_requires):
            p.requires_grad_(flag)

    G.eval(); D.eval()
    return state


def write_history_csv(history, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "d_loss", "g_adv", "g_inv"])
        w.writerows(history)
