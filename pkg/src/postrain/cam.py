"""Channel attention over stacked NWP variables.

Average- and max-pooled channel descriptors go through one shared bottleneck
MLP (GeLU after the first layer); their sum is squashed by a sigmoid into a
per-channel attention map of shape (C, 1, 1). By default the map is merged
by a residual broadcast add onto the features; ``gated_multiply`` scales the
features by it instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

MERGES = ("residual_add", "gated_multiply")


@dataclass(frozen=True)
class ChannelAttentionConfig:
    channels: int
    reduction_ratio: int = 16
    activation: str = "gelu"
    merge: str = "residual_add"
    bias: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1:
            raise ValueError("channels and reduction_ratio must be positive")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.merge not in MERGES:
            raise ValueError(f"merge must be one of {MERGES}, got {self.merge!r}")

    @property
    def hidden(self) -> int:
        return max(1, self.channels // self.reduction_ratio)

    @property
    def parameter_count(self) -> int:
        c, h = self.channels, self.hidden
        return 2 * c * h + ((h + c) if self.bias else 0)


@dataclass
class CamParameters:
    w0: torch.Tensor  # (hidden, C)
    w1: torch.Tensor  # (C, hidden)
    b0: torch.Tensor | None = None
    b1: torch.Tensor | None = None

    @classmethod
    def init(cls, cfg: ChannelAttentionConfig, generator: torch.Generator | None = None,
             dtype=torch.float32) -> "CamParameters":
        c, h = cfg.channels, cfg.hidden

        def u(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound

        b0 = torch.zeros(h, dtype=dtype) if cfg.bias else None
        b1 = torch.zeros(c, dtype=dtype) if cfg.bias else None
        return cls(u((h, c), c), u((c, h), h), b0, b1)


def _mlp(v: torch.Tensor, p: CamParameters) -> torch.Tensor:
    return F.linear(F.gelu(F.linear(v, p.w0, p.b0)), p.w1, p.b1)


def channel_attention(feat: torch.Tensor, params: CamParameters, merge: str = "residual_add"):
    """Compute the channel attention map and the merged features.

    Parameters
    ----------
    feat : torch.Tensor
        Features of shape (C, H, W) or (B, C, H, W).
    params : CamParameters
    merge : {"residual_add", "gated_multiply"}

    Returns
    -------
    (attention, fused)
        ``attention`` has shape (C, 1, 1) (or (B, C, 1, 1)); ``fused`` matches
        ``feat``.
    """
    squeeze = feat.dim() == 3
    x = feat.unsqueeze(0) if squeeze else feat
    if x.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(feat.shape)}")
    c = x.shape[1]
    if params.w0.shape[1] != c or params.w1.shape[0] != c or params.w1.shape[1] != params.w0.shape[0]:
        raise ValueError(
            f"CAM weights {tuple(params.w0.shape)}/{tuple(params.w1.shape)} do not fit {c} channels"
        )
    avg = x.mean(dim=(2, 3))
    mx = x.amax(dim=(2, 3))
    att = torch.sigmoid(_mlp(avg, params) + _mlp(mx, params))[:, :, None, None]
    if merge == "residual_add":
        fused = x + att
    elif merge == "gated_multiply":
        fused = x * att
    else:
        raise ValueError(f"unknown merge {merge!r}")
    if squeeze:
        return att[0], fused[0]
    return att, fused


class ChannelAttention(nn.Module):
    def __init__(self, cfg: ChannelAttentionConfig):
        super().__init__()
        self.cfg = cfg
        p = CamParameters.init(cfg)
        self.w0 = nn.Parameter(p.w0)
        self.w1 = nn.Parameter(p.w1)
        self.b0 = nn.Parameter(p.b0) if cfg.bias else None
        self.b1 = nn.Parameter(p.b1) if cfg.bias else None

    @property
    def params(self) -> CamParameters:
        return CamParameters(self.w0, self.w1, self.b0, self.b1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(x, self.params, self.cfg.merge)[1]

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(x, self.params, self.cfg.merge)[0]


def _has_max_tie(feat: torch.Tensor, gap: float) -> bool:
    flat = feat.reshape(feat.shape[0], -1)
    if flat.shape[1] < 2:
        return False
    top2 = flat.topk(2, dim=1).values
    return bool(((top2[:, 0] - top2[:, 1]) < gap).any())


def cam_gradcheck(params: CamParameters, feat: torch.Tensor, merge: str = "residual_add",
                  step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    The scalar readout is ``sum(R * fused)`` for a fixed random ``R``. Errors
    are measured per tensor as ``max|analytic - numeric| / max(|analytic|,
    |numeric|)`` for the gradients w.r.t. ``feat``, ``w0`` and ``w1``. If a
    max-pool tie is within reach of the finite-difference step the input is
    jittered until the tie is gone.
    """
    gen = torch.Generator().manual_seed(seed)
    x = feat.detach().to(torch.float64).clone()
    attempts = 0
    while _has_max_tie(x, 4 * step):
        attempts += 1
        if attempts > 100:
            raise RuntimeError("could not remove max-pool ties from gradcheck input")
        log.warning("max-pool tie in gradcheck input; jittering (attempt %d)", attempts)
        x = x + 1e-3 * torch.randn(x.shape, generator=gen, dtype=torch.float64)

    p = {
        "feat": x,
        "w0": params.w0.detach().to(torch.float64).clone(),
        "w1": params.w1.detach().to(torch.float64).clone(),
    }
    b0 = None if params.b0 is None else params.b0.detach().to(torch.float64)
    b1 = None if params.b1 is None else params.b1.detach().to(torch.float64)
    readout = torch.randn(x.shape, generator=gen, dtype=torch.float64)

    def f(d):
        _, fused = channel_attention(d["feat"], CamParameters(d["w0"], d["w1"], b0, b1), merge)
        return (fused * readout).sum()

    leaves = {k: v.clone().requires_grad_(True) for k, v in p.items()}
    grads = torch.autograd.grad(f(leaves), list(leaves.values()))

    worst = 0.0
    with torch.no_grad():
        for (name, base), g in zip(p.items(), grads):
            num = torch.empty_like(base)
            flat = base.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f(p).item()
                flat[i] = orig - step
                down = f(p).item()
                flat[i] = orig
                num.view(-1)[i] = (up - down) / (2 * step)
            worst = max(worst, relative_error(g, num))
    return worst


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item())
    if scale == 0.0:
        return 0.0
    return (analytic - numeric).abs().max().item() / scale
