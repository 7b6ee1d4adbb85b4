"""Attack evaluation: top-k attack accuracy, KNN feature distance, and the
Frechet distance between feature distributions of reconstructions and private data."""

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch

from .data import ImageBatch


def _as_values(batch):
    return batch.values if isinstance(batch, ImageBatch) else batch


def attack_accuracy(eval_model, recons, targets, k=1):
    """Fraction of reconstructions whose target class is in the top-k prediction."""
    values = _as_values(recons)
    if len(values) == 0:
        raise ValueError("empty batch")
    targets = torch.as_tensor(targets, dtype=torch.int64)
    logits = eval_model.predict_logits(values)
    topk = logits.topk(min(k, logits.shape[1]), dim=1).indices + 1
    hits = (topk == targets[:, None]).any(dim=1)
    return float(hits.float().mean())


def knn_distance(eval_model, recons, private_class_images):
    """Mean over reconstructions of the minimum penultimate-feature L2 distance
    to any private image of the class."""
    rec = _as_values(recons)
    priv = _as_values(private_class_images)
    if len(priv) == 0:
        raise ValueError("empty private set")
    f_rec = eval_model.penultimate_features(rec)
    f_priv = eval_model.penultimate_features(priv)
    d = torch.cdist(f_rec, f_priv)
    return float(d.min(dim=1).values.mean())


def _sqrtm_psd(a, eps=1e-10):
    """Symmetric PSD matrix square root via eigendecomposition with clamping."""
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    vals = np.clip(vals, eps, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=1e-10):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) via the symmetrized product."""
    diff = mu1 - mu2
    s1_half = _sqrtm_psd(sigma1, eps)
    middle = _sqrtm_psd(s1_half @ sigma2 @ s1_half, eps)
    val = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(middle))
    return max(val, 0.0)


def compute_fid(success_recons, reference, feature_extractor):
    """Frechet distance between Gaussian fits of extractor features.

    ``feature_extractor`` is a classifier whose penultimate features are used.
    Returns (fid, warnings).
    """
    warnings = []
    rec = _as_values(success_recons)
    ref = _as_values(reference)
    f1 = feature_extractor.penultimate_features(rec).numpy().astype(np.float64)
    f2 = feature_extractor.penultimate_features(ref).numpy().astype(np.float64)
    dim = f1.shape[1]
    if len(f1) < 2 * dim or len(f2) < 2 * dim:
        warnings.append(f"small sample: {len(f1)}/{len(f2)} points for {dim}-dim covariance")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.cov(f1, rowvar=False).reshape(dim, dim)
    s2 = np.cov(f2, rowvar=False).reshape(dim, dim)
    return frechet_distance(mu1, s1, mu2, s2), warnings


@dataclass
class EvaluationReport:
    attack_acc_top1: float
    attack_acc_top5: float
    top1_std: float
    top5_std: float
    knn_dist: float
    fid: Optional[float]
    n_success: int
    n_total: int
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self, path=None):
        payload = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w") as f:
                f.write(payload)
        return payload

    def format_table(self):
        fid = f"{self.fid:.2f}" if self.fid is not None else "absent"
        rows = [
            ("Attack Acc ↑", f"{self.attack_acc_top1:.2f}±{self.top1_std:.4f}"),
            ("Top-5 Attack Acc ↑", f"{self.attack_acc_top5:.2f}±{self.top5_std:.4f}"),
            ("KNN Dist ↓", f"{self.knn_dist:.2f}"),
            ("FID ↓", fid),
            ("Success / Total", f"{self.n_success}/{self.n_total}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


def build_report(results, eval_model, private_split, config=None, class_map=None):
    """Aggregate attack results into an EvaluationReport.

    Success means the evaluation model's top-1 prediction equals the target
    class; FID is computed over successful reconstructions only. Standard
    deviations are computed across reconstruction seed groups. ``class_map``
    translates attack classes into the evaluation model's label space when the
    evaluator was trained on a wider label set.
    """
    if not results:
        raise ValueError("no attack results to evaluate")
    config = dict(config or {})
    target_arch = config.get("target_architecture")
    if target_arch and target_arch == eval_model.architecture:
        raise ValueError("evaluation model must differ architecturally from the target")

    recons = torch.stack([r.x_star for r in results])
    targets = torch.tensor([r.target_class for r in results])
    seeds = [r.seeds[0] if r.seeds else 0 for r in results]
    eval_targets = (torch.tensor([class_map[int(c)] for c in targets])
                    if class_map else targets)

    logits = eval_model.predict_logits(recons)
    k5 = min(5, logits.shape[1])
    top1_hits = (logits.argmax(dim=1) + 1 == eval_targets)
    top5_hits = (logits.topk(k5, dim=1).indices + 1 == eval_targets[:, None]).any(dim=1)

    def _per_seed(hits):
        groups = {}
        for s, h in zip(seeds, hits.tolist()):
            groups.setdefault(s, []).append(h)
        return np.array([np.mean(v) for v in groups.values()])

    per_seed_1, per_seed_5 = _per_seed(top1_hits), _per_seed(top5_hits)
    std1 = float(per_seed_1.std()) if len(per_seed_1) > 1 else 0.0
    std5 = float(per_seed_5.std()) if len(per_seed_5) > 1 else 0.0

    # per-class KNN distance against that class's private images
    knn_vals = []
    priv_values, priv_labels = private_split.private.values, private_split.private.labels
    for c in sorted(set(targets.tolist())):
        mask = targets == c
        priv_c = priv_values[priv_labels == c]
        knn_vals.append((knn_distance(eval_model, recons[mask], priv_c), int(mask.sum())))
    knn = sum(v * w for v, w in knn_vals) / sum(w for _, w in knn_vals)

    warnings = []
    success_mask = top1_hits
    n_success = int(success_mask.sum())
    if n_success >= 2:
        fid, fid_warn = compute_fid(recons[success_mask], private_split.private, eval_model)
        warnings.extend(fid_warn)
    else:
        fid = None
        warnings.append("FID absent: fewer than 2 successful attacks")

    return EvaluationReport(
        attack_acc_top1=float(top1_hits.float().mean()),
        attack_acc_top5=float(top5_hits.float().mean()),
        top1_std=std1, top5_std=std5,
        knn_dist=float(knn), fid=fid,
        n_success=n_success, n_total=len(results),
        warnings=warnings, config=config)
