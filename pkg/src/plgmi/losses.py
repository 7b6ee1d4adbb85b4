"""Inversion losses on classifier logits and their analytic gradients.

All losses take a 1-D logit tensor ``o`` of length K and a 1-based target
class ``c``. Batched reductions for training live in ``batched_inversion_loss``.
"""

import csv
import os
from dataclasses import dataclass, field

import torch


class NonFiniteTraceError(RuntimeError):
    """Raised when a trend trace hits a non-finite entry; carries the partial trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _check_target(o, c):
    K = o.shape[-1]
    if not 1 <= c <= K:
        raise ValueError(f"target class {c} out of range 1..{K}")
    return K


def cross_entropy_loss(o, c):
    """-log softmax(o)_c, computed via log-sum-exp."""
    _check_target(o, c)
    return torch.logsumexp(o, dim=-1) - o[..., c - 1]


def cross_entropy_grad(o, c):
    """Analytic d/do of cross_entropy_loss: softmax(o) minus the one-hot target."""
    K = _check_target(o, c)
    p = torch.softmax(o, dim=-1)
    y = torch.zeros(K, dtype=o.dtype, device=o.device)
    y[c - 1] = 1.0
    return p - y


def _runner_up(o, c):
    # highest logit excluding the target; argmax returns the first (lowest-index) tie
    masked = o.clone()
    masked[c - 1] = float("-inf")
    return int(torch.argmax(masked).item())


def max_margin_loss(o, c):
    """-o_c + max_{j != c} o_j. Requires K >= 2."""
    K = _check_target(o, c)
    if K < 2:
        raise ValueError("max-margin loss needs at least 2 classes")
    masked = o.clone()
    masked[c - 1] = float("-inf")
    return masked.max() - o[c - 1]


def max_margin_grad(o, c):
    """Analytic gradient: one-hot(runner-up) - one-hot(target). L1 norm is always 2."""
    K = _check_target(o, c)
    if K < 2:
        raise ValueError("max-margin loss needs at least 2 classes")
    j = _runner_up(o, c)
    g = torch.zeros(K, dtype=o.dtype, device=o.device)
    g[j] = 1.0
    g[c - 1] = -1.0
    return g


def poincare_loss(o, c, xi=1e-5, target_only=False):
    """Hyperbolic distance between L1-normalized logits and the shrunk one-hot target.

    ``target_only=True`` subtracts xi from the target coordinate only instead of
    all coordinates before the max with 0.
    """
    K = _check_target(o, c)
    l1 = o.abs().sum()
    if l1 <= 0:
        raise ValueError("logits must have positive L1 norm")
    u = o / l1
    v = torch.zeros(K, dtype=o.dtype, device=o.device)
    v[c - 1] = 1.0
    if target_only:
        v[c - 1] = v[c - 1] - xi
        v = torch.clamp(v, min=0.0)
    else:
        v = torch.clamp(v - xi, min=0.0)
    u_sq = (u * u).sum()
    v_sq = (v * v).sum()
    # ||u||_2 can reach 1 when a single coordinate dominates; clamp and proceed
    u_sq = torch.clamp(u_sq, max=1.0 - 1e-7)
    v_sq = torch.clamp(v_sq, max=1.0 - 1e-7)
    diff_sq = ((u - v) ** 2).sum()
    arg = 1.0 + 2.0 * diff_sq / ((1.0 - u_sq) * (1.0 - v_sq))
    return torch.acosh(torch.clamp(arg, min=1.0))


def batched_inversion_loss(logits, labels, loss_id, xi=1e-5):
    """Mean inversion loss over a batch. ``logits`` is (N, K), ``labels`` 1-based (N,).

    Differentiable w.r.t. ``logits`` for all three loss ids.
    """
    if loss_id == "ce":
        return torch.nn.functional.cross_entropy(logits, labels - 1)
    if loss_id == "mm":
        if logits.shape[1] < 2:
            raise ValueError("max-margin loss needs at least 2 classes")
        idx = labels - 1
        target = logits.gather(1, idx[:, None]).squeeze(1)
        masked = logits.scatter(1, idx[:, None], float("-inf"))
        return (masked.max(dim=1).values - target).mean()
    if loss_id == "poincare":
        vals = [poincare_loss(logits[i], int(labels[i].item()), xi=xi)
                for i in range(logits.shape[0])]
        return torch.stack(vals).mean()
    raise ValueError(f"unknown inversion loss {loss_id!r}")


INVERSION_LOSSES = ("ce", "mm", "poincare")


def pointwise_loss_and_grad(o, c, loss_id, xi=1e-5):
    """(loss value, analytic gradient) on a single logit vector."""
    if loss_id == "ce":
        return cross_entropy_loss(o, c), cross_entropy_grad(o, c)
    if loss_id == "mm":
        return max_margin_loss(o, c), max_margin_grad(o, c)
    if loss_id == "poincare":
        o_req = o.detach().clone().requires_grad_(True)
        val = poincare_loss(o_req, c, xi=xi)
        val.backward()
        return val.detach(), o_req.grad.detach()
    raise ValueError(f"unknown inversion loss {loss_id!r}")


@dataclass
class LossTrace:
    """Per-iteration stage-2 diagnostics for one inversion loss."""

    loss_id: str
    grad_l1: list = field(default_factory=list)       # raw ||dL/do||_1
    loss_value: list = field(default_factory=list)    # raw loss
    target_logit: list = field(default_factory=list)  # o_c
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.grad_l1)

    def _rescale(self, xs):
        if not xs:
            return []
        base = xs[0]
        if base == 0:
            return [1.0] + [float("nan")] * (len(xs) - 1)
        return [x / base for x in xs]

    @property
    def grad_rescaled(self):
        return self._rescale(self.grad_l1)

    @property
    def loss_rescaled(self):
        return self._rescale(self.loss_value)

    def append(self, grad_l1, loss_value, target_logit):
        for v in (grad_l1, loss_value, target_logit):
            if not torch.isfinite(torch.as_tensor(float(v))):
                raise NonFiniteTraceError(
                    f"non-finite trace entry at iteration {len(self)}", self)
        self.grad_l1.append(float(grad_l1))
        self.loss_value.append(float(loss_value))
        self.target_logit.append(float(target_logit))

    def to_csv(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        gr, lr = self.grad_rescaled, self.loss_rescaled
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "grad_rescaled", "loss_rescaled", "target_logit"])
            for i in range(len(self)):
                w.writerow([i, gr[i], lr[i], self.target_logit[i]])

    @classmethod
    def from_csv(cls, path, loss_id=""):
        trace = cls(loss_id=loss_id or os.path.splitext(os.path.basename(path))[0])
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        # CSV stores rescaled values; keep them as the raw series (base becomes 1)
        for r in rows:
            trace.grad_l1.append(float(r["grad_rescaled"]))
            trace.loss_value.append(float(r["loss_rescaled"]))
            trace.target_logit.append(float(r["target_logit"]))
        return trace


def record_trend(model, optimizer_step, target_class, loss_id, iters, xi=1e-5):
    """Run ``iters`` stage-2 steps and trace gradient/loss/target-logit trends.

    ``optimizer_step(i)`` advances the latent search by one step and returns the
    current reconstruction as an image tensor (1, C, H, W) in [0, 1]. The trace
    records, per iteration, the raw L1 gradient norm of the chosen loss w.r.t.
    the model's logits, the raw loss value, and the target logit.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    trace = LossTrace(loss_id=loss_id, meta={"target_class": target_class})
    for i in range(iters):
        x = optimizer_step(i)
        with torch.no_grad():
            o = model.logits(x)[0]
        val, grad = pointwise_loss_and_grad(o, target_class, loss_id, xi=xi)
        trace.append(grad.abs().sum().item(), float(val), float(o[target_class - 1]))
    return trace
