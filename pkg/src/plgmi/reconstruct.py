"""Stage-2 latent reconstruction: optimize z so that augmented views of
G(z, c) all score as the target class, with random restarts."""

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

from .augment import AugmentationPolicy, apply_augmentations
from .losses import batched_inversion_loss


@dataclass
class ReconstructConfig:
    restarts: int = 5
    iters: int = 600
    m: int = 2
    lr: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.999)
    inv_loss: str = "mm"
    policy: Optional[AugmentationPolicy] = None
    seed: int = 0


@dataclass
class RestartResult:
    seed: int
    z_final: torch.Tensor
    final_objective: float
    loss_curve: list


@dataclass
class AttackResult:
    target_class: int
    restarts: list
    best_index: int
    z_star: torch.Tensor
    x_star: torch.Tensor
    seeds: list = field(default_factory=list)

    @property
    def final_objective(self):
        return self.restarts[self.best_index].final_objective


def _run_restart(gen, target, c, cfg, seed):
    rng = torch.Generator().manual_seed(seed)
    z = torch.randn(1, gen.latent_dim, generator=rng).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.lr, betas=cfg.betas)
    policy = cfg.policy if cfg.policy is not None else AugmentationPolicy()
    labels = torch.tensor([c], dtype=torch.int64)
    curve = []
    for _ in range(cfg.iters):
        gen.eval()
        x = gen.generate(z, labels)
        obj = torch.zeros(())
        for _i in range(cfg.m):
            view = apply_augmentations(x, policy, rng)
            obj = obj + batched_inversion_loss(target.logits(view), labels, cfg.inv_loss)
        if not torch.isfinite(obj):
            raise RuntimeError(f"non-finite objective in restart seed {seed}")
        opt.zero_grad()
        obj.backward()
        opt.step()
        curve.append(float(obj.detach()))
    return RestartResult(seed, z.detach().clone(), curve[-1], curve)


def reconstruct(gen, target, c, cfg=None):
    """Recover an image of class ``c`` by adaptive-moment latent search.

    Runs ``cfg.restarts`` independent restarts from fresh Gaussian latents and
    returns all of them plus the one with the lowest final objective. Generator
    and target parameters are left untouched.
    """
    cfg = cfg or ReconstructConfig()
    if not 1 <= c <= gen.K:
        raise ValueError(f"class {c} out of range 1..{gen.K}")
    if cfg.m < 1 or cfg.restarts < 1:
        raise ValueError("m and restarts must be >= 1")

    frozen = []
    for model in (gen, target.net):
        for p in model.parameters():
            frozen.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        restarts, failures = [], []
        for r in range(cfg.restarts):
            seed = cfg.seed + r
            try:
                restarts.append(_run_restart(gen, target, c, cfg, seed))
            except RuntimeError as e:
                failures.append((seed, str(e)))
        if not restarts:
            raise RuntimeError(f"all {cfg.restarts} restarts failed: {failures}")
        best = int(np.argmin([r.final_objective for r in restarts]))
        z_star = restarts[best].z_final
        x_star = gen.sample(z_star, torch.tensor([c]))
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    return AttackResult(c, restarts, best, z_star, x_star[0],
                        seeds=[r.seed for r in restarts])


def _result_path(out_dir, c, seed):
    return os.path.join(out_dir, f"class_{c}", f"seed_{seed}.npz")


def save_attack_result(result, out_dir, seed):
    path = _result_path(out_dir, result.target_class, seed)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    np.savez(path,
             z_star=result.z_star.numpy(),
             x_star=result.x_star.numpy(),
             target_class=result.target_class,
             best_objective=result.final_objective,
             curves=np.array([r.loss_curve for r in result.restarts]),
             seeds=np.array(result.seeds))


def load_attack_result(path):
    d = np.load(path)
    curves = d["curves"]
    seeds = [int(s) for s in d["seeds"]]
    restarts = [RestartResult(seeds[i], torch.from_numpy(d["z_star"]).clone(),
                              float(curves[i][-1]), list(curves[i]))
                for i in range(len(seeds))]
    best = int(np.argmin([r.final_objective for r in restarts]))
    return AttackResult(int(d["target_class"]), restarts, best,
                        torch.from_numpy(d["z_star"]),
                        torch.from_numpy(d["x_star"]), seeds=seeds)


def batch_attack(gen, target, classes, cfg=None, images_per_class=1, out_dir=None):
    """Independent reconstructions for each (class, image index) pair.

    Each image index i uses base seed ``cfg.seed + i * 1000``, shared across
    classes so that across-seed statistics group naturally. When ``out_dir`` is
    given, finished results are persisted and the run resumes past them.
    """
    cfg = cfg or ReconstructConfig()
    results, errors = [], []
    index_rows = []
    for c in classes:
        for i in range(images_per_class):
            base_seed = cfg.seed + i * 1000
            if out_dir:
                path = _result_path(out_dir, c, base_seed)
                if os.path.exists(path):
                    results.append(load_attack_result(path))
                    index_rows.append((c, base_seed, results[-1].final_objective, "cached"))
                    continue
            run_cfg = ReconstructConfig(**{**cfg.__dict__, "seed": base_seed})
            try:
                res = reconstruct(gen, target, c, run_cfg)
            except RuntimeError as e:
                errors.append((c, base_seed, str(e)))
                continue
            results.append(res)
            if out_dir:
                save_attack_result(res, out_dir, base_seed)
            index_rows.append((c, base_seed, res.final_objective, "fresh"))
    if out_dir and index_rows:
        with open(os.path.join(out_dir, "index.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "seed", "best_objective", "source"])
            w.writerows(index_rows)
    return results, errors
