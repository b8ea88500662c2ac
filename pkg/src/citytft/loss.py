"""Composite training objective: trigger-probability loss + masked quantile loss.

The total is the plain sum of two terms. The trigger term is weighted binary
cross-entropy between trigger targets and predicted probabilities, averaged
over every (step, channel) element. The quantile term is pinball loss averaged
over all quantiles and only those elements whose actual load is non-zero;
zero-load elements contribute nothing, in value or gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .dataio import EPSILON_ZERO
from .model import ModelOutput

PROB_CLAMP = 1e-7  # probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] inside the log


@dataclass(frozen=True)
class LossConfig:
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    trigger_weighting: str = "uniform"  # "uniform" (w=1) or "balanced" (w = N / (2 N_class))
    epsilon_zero: float = EPSILON_ZERO

    def __post_init__(self):
        q = tuple(self.quantiles)
        if sorted(set(q)) != list(q) or any(not 0.0 < v < 1.0 for v in q):
            raise ValueError(f"quantiles must be sorted, unique, and in (0, 1): {q}")
        if self.trigger_weighting not in ("uniform", "balanced"):
            raise ValueError(f"unknown trigger_weighting {self.trigger_weighting!r}")
        object.__setattr__(self, "quantiles", q)


@dataclass
class LossBreakdown:
    """Scalar loss terms; l_total = l_prob + l_quantile exactly."""

    l_prob: Tensor
    l_quantile: Tensor
    l_total: Tensor
    n_active: int

    def to_floats(self) -> dict[str, float]:
        return {
            "l_prob": float(self.l_prob.detach()),
            "l_quantile": float(self.l_quantile.detach()),
            "l_total": float(self.l_total.detach()),
            "n_active": self.n_active,
        }


def class_balance_weights(targets: Tensor) -> Tensor:
    """Per-element weights w = N / (2 N_class); an absent class gets weight 1."""
    n = targets.numel()
    n_pos = targets.sum()
    n_neg = n - n_pos
    w_pos = n / (2.0 * n_pos) if n_pos > 0 else torch.ones((), dtype=targets.dtype)
    w_neg = n / (2.0 * n_neg) if n_neg > 0 else torch.ones((), dtype=targets.dtype)
    return torch.where(targets > 0.5, w_pos, w_neg)


def trigger_loss(targets: Tensor, probs: Tensor, weights: Tensor | None = None) -> Tensor:
    """Weighted binary cross-entropy averaged over every (step, channel) element."""
    if targets.shape != probs.shape:
        raise ValueError(f"shape mismatch: targets {tuple(targets.shape)} vs probs {tuple(probs.shape)}")
    p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_element = -(targets * torch.log(p) + (1.0 - targets) * torch.log(1.0 - p))
    if weights is not None:
        per_element = weights * per_element
    return per_element.mean()


def quantile_loss(
    actual: Tensor, proj: Tensor, mask: Tensor, quantiles: tuple[float, ...]
) -> Tensor:
    """Pinball loss over masked elements, averaged over elements and quantiles.

    `actual` and `mask` have shape (..., channels); `proj` adds a trailing
    quantile axis. An empty mask yields exactly zero.
    """
    if proj.shape[:-1] != actual.shape or proj.shape[-1] != len(quantiles):
        raise ValueError(
            f"proj shape {tuple(proj.shape)} does not match actual {tuple(actual.shape)} "
            f"x {len(quantiles)} quantiles"
        )
    n_active = mask.sum()
    if n_active == 0:
        return proj.new_zeros(())
    q = torch.as_tensor(quantiles, dtype=proj.dtype, device=proj.device)
    diff = actual.unsqueeze(-1) - proj
    pinball = torch.maximum(q * diff, (q - 1.0) * diff)
    masked = pinball * mask.unsqueeze(-1)
    return masked.sum() / (n_active * len(quantiles))


def composite_loss(
    trigger_targets: Tensor,
    target_loads: Tensor,
    output: ModelOutput,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Sum of the trigger and masked-quantile terms, with a per-term breakdown."""
    weights = class_balance_weights(trigger_targets) if cfg.trigger_weighting == "balanced" else None
    l_prob = trigger_loss(trigger_targets, output.trigger_probs, weights)
    mask = trigger_targets.to(target_loads.dtype)
    l_quantile = quantile_loss(target_loads, output.quantile_proj, mask, cfg.quantiles)
    return LossBreakdown(
        l_prob=l_prob,
        l_quantile=l_quantile,
        l_total=l_prob + l_quantile,
        n_active=int(mask.sum()),
    )
