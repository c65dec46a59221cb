"""Dense-tensor compute contract: attention, rotary embedding, optimizer, scheduler.

Autodiff and tensor storage are provided by torch; everything here is written
against explicit contracts so the rest of the package never touches raw torch
semantics for these operations. Training runs in float32; correctness oracles
in the test suite re-evaluate in float64.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractViolationError, DimensionError, TrainingError, ValidationError

NEG_INF = float("-inf")


def attention(q, k, v, mask=None):
    """Scaled dot-product attention ``softmax(QK^T / sqrt(d) + mask) V``.

    ``q``: (..., Tq, d), ``k``: (..., Tk, d), ``v``: (..., Tk, dv).
    ``mask`` is additive with entries 0 or -inf, broadcastable to (..., Tq, Tk).
    A query row with every key masked has no convex combination to return and
    raises ContractViolationError.
    """
    if q.dim() < 2 or k.dim() < 2 or v.dim() < 2:
        raise DimensionError("attention arguments need at least 2 dims")
    d = q.shape[-1]
    if d <= 0:
        raise DimensionError("key dimension must be positive")
    if k.shape[-1] != d:
        raise DimensionError(f"q/k dim mismatch: {d} vs {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"k/v length mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        scores = scores + mask
        if torch.isneginf(scores).all(dim=-1).any():
            raise ContractViolationError("attention row is fully masked")
    weights = torch.softmax(scores, dim=-1)
    return weights @ v


def causal_mask(size, dtype=torch.float32, device=None):
    """Additive lower-triangular mask: position i attends to j <= i."""
    m = torch.zeros(size, size, dtype=dtype, device=device)
    return m.masked_fill(torch.ones(size, size, dtype=torch.bool, device=device).triu(1), NEG_INF)


def rope_apply(x, positions, base=10000.0):
    """Rotate consecutive pairs (x[2i], x[2i+1]) by angle pos * base^(-2i/d).

    ``x``: (..., T, d) with d even; ``positions``: length-T integers (or any
    shape broadcastable against x's T axis). Pairwise norms are preserved.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"rotary embedding needs an even dim, got {d}")
    pos = torch.as_tensor(positions, dtype=x.dtype, device=x.device)
    idx = torch.arange(d // 2, dtype=x.dtype, device=x.device)
    theta = base ** (-2.0 * idx / d)
    ang = pos.unsqueeze(-1) * theta  # (..., T, d/2)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack((r1, r2), dim=-1).flatten(-2)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def embedding_lookup(ids, table):
    return F.embedding(ids, table)


def cross_entropy(logits, targets, ignore_index=-100, reduction="mean"):
    """Softmax cross-entropy with integer targets."""
    return F.cross_entropy(logits, targets, ignore_index=ignore_index, reduction=reduction)


def dropout(x, p, training):
    """Train-only dropout; identity in eval mode."""
    return F.dropout(x, p=p, training=training)


@dataclass
class OptimState:
    """AdamW state: per-parameter moments plus hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)
    names: list = field(default_factory=list)


def adamw_init(params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, names=None):
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    return OptimState(
        lr=lr,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        weight_decay=weight_decay,
        exp_avg=[torch.zeros_like(p) for p in params],
        exp_avg_sq=[torch.zeros_like(p) for p in params],
        names=list(names),
    )


def adamw_step(params, grads, state, lr=None):
    """One AdamW update in place; weight decay is decoupled and multiplicative.

    ``grads[i]`` may be None to skip a parameter this step. Returns
    ``(params, state)`` with ``state.step`` advanced by one.
    """
    if lr is None:
        lr = state.lr
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise DimensionError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape mismatch for {state.names[i]}")
            if not torch.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {state.names[i]}")
            m, v = state.exp_avg[i], state.exp_avg_sq[i]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """One-cycle schedule: cosine warmup to max_lr, cosine anneal to the floor."""

    max_lr: float
    total_steps: int
    warmup_steps: int
    start_divisor: float = 25.0
    final_divisor: float = 1e4


def one_cycle_lr(step, schedule):
    """Learning rate at ``step``; steps past total_steps clamp to the end value."""
    if step < 0:
        raise ValidationError(f"negative step {step}")
    s = schedule
    step = min(step, s.total_steps)
    start = s.max_lr / s.start_divisor
    end = s.max_lr / s.final_divisor
    if s.warmup_steps > 0 and step <= s.warmup_steps:
        t = step / s.warmup_steps
        return start + (s.max_lr - start) * 0.5 * (1.0 - math.cos(math.pi * t))
    span = s.total_steps - s.warmup_steps
    if span <= 0:
        return s.max_lr if step <= s.warmup_steps else end
    t = (step - s.warmup_steps) / span
    return end + (s.max_lr - end) * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params, max_norm):
    """Global-L2 gradient clipping; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))
