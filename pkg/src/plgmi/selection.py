"""Top-n pseudo-label selection: assign each private class the n public images
with the highest target-model confidence for that class."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ImageBatch


@dataclass
class PseudoLabeledDataset:
    """Per-class ordered selections over the public pool.

    ``per_class[k]`` is a list of (public image index, score) of length exactly n,
    scores non-increasing, ties broken by original index. The same image may be
    selected by several classes.
    """

    per_class: dict
    n: int
    score_kind: str = "probability"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, entries in self.per_class.items():
            if len(entries) != self.n:
                raise ValueError(f"class {k}: expected {self.n} entries, got {len(entries)}")
            scores = [s for _, s in entries]
            if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
                raise ValueError(f"class {k}: scores not non-increasing")

    @property
    def K(self):
        return len(self.per_class)

    def indices(self, k):
        return [i for i, _ in self.per_class[k]]

    def save(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        payload = {"n": self.n, "score_kind": self.score_kind, "meta": self.meta,
                   "per_class": {str(k): [[int(i), float(s)] for i, s in v]
                                 for k, v in self.per_class.items()}}
        with open(path, "w") as f:
            json.dump(payload, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            payload = json.load(f)
        per_class = {int(k): [(int(i), float(s)) for i, s in v]
                     for k, v in payload["per_class"].items()}
        return cls(per_class, payload["n"], payload.get("score_kind", "probability"),
                   payload.get("meta", {}))


def score_public_pool(public, target, score_kind="probability", batch_size=256):
    """Score every public image for every class: returns an (N, K) array."""
    values = public.values if isinstance(public, ImageBatch) else public
    chunks = []
    for start in range(0, len(values), batch_size):
        o = target.predict_logits(values[start:start + batch_size])
        chunks.append(torch.softmax(o, dim=1) if score_kind == "probability" else o)
    return torch.cat(chunks).numpy()


def assign_pseudo_labels(public, target, n, K=None, score_kind="probability",
                         scores=None, batch_size=256):
    """Top-n selection per class. ``scores`` may be precomputed (N, K).

    For each class k, picks the n pool images maximizing the class-k score,
    ordered by descending score with ties broken by original index.
    """
    if score_kind not in ("probability", "logit"):
        raise ValueError(f"unknown score_kind {score_kind!r}")
    if scores is None:
        scores = score_public_pool(public, target, score_kind, batch_size)
    scores = np.asarray(scores)
    pool_size, width = scores.shape
    if K is None:
        K = width
    if K != width:
        raise ValueError(f"target outputs {width} classes, expected {K}")
    if n > pool_size:
        raise ValueError(f"n={n} exceeds public pool size {pool_size}")
    if n < 1:
        raise ValueError("n must be positive")

    per_class = {}
    for k in range(1, K + 1):
        col = scores[:, k - 1]
        # stable argsort of -col keeps original index order within ties
        order = np.argsort(-col, kind="stable")[:n]
        per_class[k] = [(int(i), float(col[i])) for i in order]
    return PseudoLabeledDataset(per_class, n, score_kind,
                                meta={"pool_size": pool_size, "K": K})


def selection_summary(dr):
    """Per-class score statistics and the duplicate-image count."""
    stats = {}
    multiplicity = {}
    for k, entries in dr.per_class.items():
        scores = [s for _, s in entries]
        stats[k] = {"mean_score": float(np.mean(scores)),
                    "min_score": float(np.min(scores)),
                    "max_score": float(np.max(scores))}
        for i, _ in entries:
            multiplicity[i] = multiplicity.get(i, 0) + 1
    duplicates = sum(m - 1 for m in multiplicity.values() if m > 1)
    return {"per_class": stats, "duplicate_count": duplicates,
            "unique_images": len(multiplicity)}


def gather_training_set(public, dr):
    """Materialize the pseudo-labeled dataset as (values, labels) tensors."""
    values = public.values if isinstance(public, ImageBatch) else public
    xs, ys = [], []
    for k in sorted(dr.per_class):
        idx = torch.tensor(dr.indices(k), dtype=torch.int64)
        xs.append(values[idx])
        ys.append(torch.full((len(idx),), k, dtype=torch.int64))
    return torch.cat(xs), torch.cat(ys)
