"""Classification/regression heads and the hybrid weighted loss.

The total loss is ``classification + alpha * regression``. The classification
term is class-weighted cross-entropy (only the true-class term of each pixel
survives, scaled by that class's weight); the regression term is the squared
error of the rain-rate head. Both are summed over pixels unless
``reduction="mean"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

N_CLASSES = 3


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class HybridLossConfig:
    class_weights: tuple[float, float, float] = (1.0, 5.0, 30.0)
    alpha: float = 100.0
    enable_weighting: bool = True
    enable_regression_branch: bool = True
    reduction: str = "sum"
    log1p_target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise LossError(f"class_weights must be {N_CLASSES} positive values, got {self.class_weights}")
        if self.alpha < 0:
            raise LossError("alpha must be non-negative")
        if self.reduction not in ("sum", "mean"):
            raise LossError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class DualPrediction:
    cls_logits: torch.Tensor  # (3, H, W) or (B, 3, H, W)
    reg: torch.Tensor  # (H, W) or (B, H, W), mm/h

    def probabilities(self) -> torch.Tensor:
        return self.cls_logits.softmax(dim=-3)


class MultiTaskHeads(nn.Module):
    """1x1 projections of shared features to 3 class logits and 1 rain rate."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.cls = nn.Conv2d(in_channels, N_CLASSES, 1)
        self.reg = nn.Conv2d(in_channels, 1, 1)

    def forward(self, features: torch.Tensor) -> DualPrediction:
        squeeze = features.dim() == 3
        x = features.unsqueeze(0) if squeeze else features
        logits = self.cls(x)
        reg = self.reg(x)[:, 0]
        if squeeze:
            return DualPrediction(logits[0], reg[0])
        return DualPrediction(logits, reg)


def heads_forward(heads: MultiTaskHeads, features: torch.Tensor) -> DualPrediction:
    return heads(features)


def hybrid_loss(pred: DualPrediction, truth_rain: torch.Tensor, truth_class: torch.Tensor,
                cfg: HybridLossConfig):
    """Return ``(total, classification, regression)`` losses as scalar tensors."""
    logits = pred.cls_logits
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    reg = pred.reg.reshape(logits.shape[0], *logits.shape[2:])
    rain = torch.as_tensor(truth_rain, dtype=reg.dtype).reshape(reg.shape)
    cls = torch.as_tensor(truth_class).reshape(reg.shape).long()
    if logits.shape[1] != N_CLASSES:
        raise LossError(f"expected {N_CLASSES} class logits, got {logits.shape[1]}")
    if ((cls < 0) | (cls >= N_CLASSES)).any():
        bad = cls[(cls < 0) | (cls >= N_CLASSES)][0].item()
        raise LossError(f"truth class {bad} outside {{0, 1, 2}}")

    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, cls.unsqueeze(1))[:, 0]
    if cfg.enable_weighting:
        w = torch.tensor(cfg.class_weights, dtype=logits.dtype, device=logits.device)
        nll = nll * w[cls]
    target = torch.log1p(rain) if cfg.log1p_target else rain
    se = (reg - target) ** 2

    reduce = torch.sum if cfg.reduction == "sum" else torch.mean
    l_cls = reduce(nll)
    l_reg = reduce(se)
    total = l_cls + cfg.alpha * l_reg if cfg.enable_regression_branch else l_cls
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite hybrid loss (classification {l_cls.item()}, regression {l_reg.item()})")
    return total, l_cls, l_reg


def predict_classes(pred: DualPrediction) -> torch.Tensor:
    """Per-pixel argmax; exact ties go to the higher class index."""
    logits = pred.cls_logits
    flipped = logits.flip(dims=(-3,))
    idx = flipped.argmax(dim=-3)
    return (N_CLASSES - 1 - idx).to(torch.uint8)


def regression_classes(pred: DualPrediction, thresholds, log1p_target: bool = False) -> torch.Tensor:
    """Classes from thresholding the regression head (comparison mode)."""
    rain = torch.expm1(pred.reg) if log1p_target else pred.reg
    out = torch.zeros(rain.shape, dtype=torch.uint8)
    out[rain >= thresholds.rain_threshold] = 1
    out[rain >= thresholds.heavy_threshold] = 2
    return out
