"""Dense-prediction backbones at toy scale.

All backbones map ``(B, T, C, H, W)`` inputs to ``(B, F, H, W)`` features.
``swin_unet`` and ``unet`` fold time into channels; ``convlstm`` consumes the
sequence step by step. Inputs whose size is not legal for a backbone are
zero-padded symmetrically and the features are cropped back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

KINDS = ("swin_unet", "unet", "convlstm")
_MASK_FILL = -1e4


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "swin_unet"
    in_channels: int = 0  # T*C for folding backbones, C for convlstm; 0 = infer from data
    out_feature_channels: int = 32
    input_size: tuple[int, int] | None = None
    # swin_unet
    patch_size: int = 4
    window_size: int = 4
    depths: tuple[int, ...] = (2, 2)
    embed_dims: tuple[int, ...] = (48, 96)
    num_heads: tuple[int, ...] = (3, 6)
    mlp_ratio: float = 4.0
    # unet
    levels: int = 3
    base_width: int = 16
    # convlstm
    hidden_channels: int = 16
    num_layers: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("depths", "embed_dims", "num_heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.input_size is not None:
            object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))

    @property
    def folds_time(self) -> bool:
        return self.kind != "convlstm"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"backbone kind must be one of {KINDS}, got {self.kind!r}")
        if self.in_channels < 1 or self.out_feature_channels < 1:
            raise ConfigError("in_channels and out_feature_channels must be positive")
        if self.kind == "swin_unet":
            n = len(self.depths)
            if n < 1 or len(self.embed_dims) != n or len(self.num_heads) != n:
                raise ConfigError("depths, embed_dims and num_heads must have equal non-zero length")
            for d, h in zip(self.embed_dims, self.num_heads):
                if d % h:
                    raise ConfigError(f"embed dim {d} is not divisible by {h} heads")
            if self.patch_size < 1 or self.window_size < 1:
                raise ConfigError("patch_size and window_size must be positive")
        if self.kind == "unet" and (self.levels < 1 or self.base_width < 1):
            raise ConfigError("unet needs levels >= 1 and base_width >= 1")
        if self.kind == "convlstm" and (self.hidden_channels < 1 or self.num_layers < 1
                                        or self.kernel_size % 2 == 0):
            raise ConfigError("convlstm needs positive hidden/layers and an odd kernel")
        if self.input_size is not None:
            for dim, size in zip("HW", self.input_size):
                self._check_size(dim, size)

    def _check_size(self, dim: str, size: int) -> None:
        if self.kind == "swin_unet":
            p, w, n = self.patch_size, self.window_size, len(self.depths)
            m = p * 2 ** (n - 1)
            if size % m:
                raise ConfigError(
                    f"input {dim}={size} must be divisible by patch_size*2^(stages-1) = {m}"
                )
            if (size // p) % w:
                raise ConfigError(
                    f"post-patch {dim}={size // p} is not divisible by window_size={w}"
                )
        elif self.kind == "unet":
            m = 2 ** (self.levels - 1)
            if size % m:
                raise ConfigError(f"input {dim}={size} must be divisible by 2^(levels-1) = {m}")

    def size_multiple(self) -> int:
        if self.kind == "swin_unet":
            a = self.patch_size * 2 ** (len(self.depths) - 1)
            b = self.patch_size * self.window_size
            return a * b // math.gcd(a, b)
        if self.kind == "unet":
            return 2 ** (self.levels - 1)
        return 1

    def legal_size(self, h: int, w: int) -> tuple[int, int]:
        """Smallest legal (H, W) not smaller than the given size."""
        m = self.size_multiple()
        return (-(-h // m) * m, -(-w // m) * m)


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d)) and getattr(m, "_trunc_init", False):
        nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def _tlinear(i: int, o: int, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(i, o, bias=bias)
    lin._trunc_init = True
    return lin


# --------------------------------------------------------------------------
# Swin-Unet


def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def _window_reverse(win: torch.Tensor, w: int, h: int, wd: int) -> torch.Tensor:
    b = win.shape[0] // ((h // w) * (wd // w))
    x = win.view(b, h // w, wd // w, w, w, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = _tlinear(dim, 3 * dim)
        self.proj = _tlinear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02, a=-0.04, b=0.04)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


def _attention_mask(h: int, w: int, window: int, shift: int, device, dtype) -> torch.Tensor | None:
    hp, wp = -(-h // window) * window, -(-w // window) * window
    if shift == 0 and hp == h and wp == w:
        return None
    labels = torch.zeros(hp, wp, device=device)
    if shift:
        cnt = 0
        for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
                labels[hs, ws] = cnt
                cnt += 1
    pad = torch.zeros(hp, wp, device=device)
    pad[h:, :] = 1
    pad[:, w:] = 1
    if shift:
        pad = torch.roll(pad, (-shift, -shift), (0, 1))
    lab = _window_partition(labels[None, :, :, None], window).squeeze(-1)
    pw = _window_partition(pad[None, :, :, None], window).squeeze(-1)
    allowed = (lab[:, :, None] == lab[:, None, :]) & (pw[:, None, :] == 0)
    mask = torch.zeros(allowed.shape, device=device, dtype=dtype)
    return mask.masked_fill(~allowed, _MASK_FILL)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: float):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(_tlinear(dim, hidden), nn.GELU(), _tlinear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        win = self.window
        shift = win // 2 if (self.shifted and min(h, w) > win) else 0
        y = self.norm1(x)
        ph, pw = (-h) % win, (-w) % win
        if ph or pw:
            y = F.pad(y, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        if shift:
            y = torch.roll(y, (-shift, -shift), (1, 2))
        mask = _attention_mask(h, w, win, shift, x.device, x.dtype)
        y = self.attn(_window_partition(y, win), mask)
        y = _window_reverse(y, win, hp, wp)
        if shift:
            y = torch.roll(y, (shift, shift), (1, 2))
        x = x + y[:, :h, :w]
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = _tlinear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduce(self.norm(x))


class PatchExpand(nn.Module):
    def __init__(self, dim: int, out_dim: int, scale: int):
        super().__init__()
        self.scale = scale
        self.out_dim = out_dim
        self.expand = _tlinear(dim, scale * scale * out_dim, bias=False)
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, x):
        b, h, w, _ = x.shape
        s = self.scale
        x = self.expand(x).view(b, h, w, s, s, self.out_dim)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h * s, w * s, self.out_dim)
        return self.norm(x)


class SwinUnet(nn.Module):
    """Hierarchical shifted-window encoder-decoder with skip connections."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        dims, depths, heads = cfg.embed_dims, cfg.depths, cfg.num_heads
        p = cfg.patch_size
        self.patch_embed = nn.Conv2d(cfg.in_channels, dims[0], p, stride=p)
        self.patch_embed._trunc_init = True
        self.embed_norm = nn.LayerNorm(dims[0])

        def stage(i):
            return nn.Sequential(*[
                SwinBlock(dims[i], heads[i], cfg.window_size, j % 2 == 1, cfg.mlp_ratio)
                for j in range(depths[i])
            ])

        n = len(dims)
        self.encoder = nn.ModuleList(stage(i) for i in range(n))
        self.merges = nn.ModuleList(PatchMerging(dims[i], dims[i + 1]) for i in range(n - 1))
        self.expands = nn.ModuleList(PatchExpand(dims[i + 1], dims[i], 2) for i in range(n - 1))
        self.concat_proj = nn.ModuleList(_tlinear(2 * dims[i], dims[i]) for i in range(n - 1))
        self.decoder = nn.ModuleList(stage(i) for i in range(n - 1))
        self.out_norm = nn.LayerNorm(dims[0])
        self.final_expand = PatchExpand(dims[0], cfg.out_feature_channels, p)
        self.apply(_init_linear)

    def probe_parameters(self) -> dict[str, nn.Parameter]:
        return {
            "first": self.patch_embed.weight,
            "bottleneck": self.encoder[-1][0].attn.qkv.weight,
            "last": self.final_expand.expand.weight,
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.embed_norm(self.patch_embed(x).permute(0, 2, 3, 1))
        skips = []
        for i, st in enumerate(self.encoder):
            x = _checked(st(x), f"encoder stage {i}")
            if i < len(self.merges):
                skips.append(x)
                x = self.merges[i](x)
        for i in reversed(range(len(self.decoder))):
            x = self.expands[i](x)
            x = self.concat_proj[i](torch.cat([x, skips[i]], -1))
            x = _checked(self.decoder[i](x), f"decoder stage {i}")
        x = self.final_expand(self.out_norm(x))
        return _checked(x.permute(0, 3, 1, 2).contiguous(), "final expand")


def _checked(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations after {where}")
    return x


# --------------------------------------------------------------------------
# U-Net


def _double_conv(i: int, o: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(i, o, 3, padding=1), nn.ReLU(),
        nn.Conv2d(o, o, 3, padding=1), nn.ReLU(),
    )


class UNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** i for i in range(cfg.levels)]
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for wd in widths:
            self.down.append(_double_conv(prev, wd))
            prev = wd
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(cfg.levels - 1)
        )
        self.up_convs = nn.ModuleList(_double_conv(2 * widths[i], widths[i]) for i in range(cfg.levels - 1))
        self.head = nn.Conv2d(widths[0], cfg.out_feature_channels, 1)

    def probe_parameters(self):
        return {
            "first": self.down[0][0].weight,
            "bottleneck": self.down[-1][0].weight,
            "last": self.head.weight,
        }

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = _checked(block(x), f"down level {i}")
            skips.append(x)
        for i in reversed(range(len(self.ups))):
            x = self.ups[i](x)
            x = _checked(self.up_convs[i](torch.cat([x, skips[i]], 1)), f"up level {i}")
        return self.head(x)


def unet_parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count of :class:`UNet`."""

    def dc(i, o):
        return 9 * i * o + o + 9 * o * o + o

    widths = [cfg.base_width * 2 ** i for i in range(cfg.levels)]
    total, prev = 0, cfg.in_channels
    for wd in widths:
        total += dc(prev, wd)
        prev = wd
    for i in range(cfg.levels - 1):
        total += 4 * widths[i + 1] * widths[i] + widths[i]
        total += dc(2 * widths[i], widths[i])
    return total + widths[0] * cfg.out_feature_channels + cfg.out_feature_channels


# --------------------------------------------------------------------------
# ConvLSTM


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, k: int):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_ch + hidden, 4 * hidden, k, padding=k // 2)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.gates(torch.cat([x, h], 1)).chunk(4, 1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvLSTM(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        hid = cfg.hidden_channels
        self.cells = nn.ModuleList(
            ConvLSTMCell(cfg.in_channels if i == 0 else hid, hid, cfg.kernel_size)
            for i in range(cfg.num_layers)
        )
        self.proj = nn.Conv2d(hid, cfg.out_feature_channels, 1)

    def probe_parameters(self):
        return {
            "first": self.cells[0].gates.weight,
            "bottleneck": self.cells[-1].gates.bias,
            "last": self.proj.weight,
        }

    def forward(self, x):
        # x: (B, T, C, H, W)
        b, t, _, h, w = x.shape
        states = [
            (x.new_zeros(b, self.cfg.hidden_channels, h, w),) * 2 for _ in self.cells
        ]
        for step in range(t):
            inp = x[:, step]
            for li, cell in enumerate(self.cells):
                states[li] = cell(inp, states[li])
                inp = states[li][0]
        return _checked(self.proj(states[-1][0]), "convlstm projection")


# --------------------------------------------------------------------------
# public interface


class Backbone(nn.Module):
    """Backbone with folding, legal-size padding and output cropping."""

    def __init__(self, cfg: BackboneConfig, net: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.net = net

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if x.dim() != 5:
            raise ValueError(f"expected (B, T, C, H, W) input, got {tuple(x.shape)}")
        b, t, c, h, w = x.shape
        if self.cfg.folds_time:
            x = x.reshape(b, t * c, h, w)
            if t * c != self.cfg.in_channels:
                raise ValueError(f"folded input has {t * c} channels, backbone expects {self.cfg.in_channels}")
        elif c != self.cfg.in_channels:
            raise ValueError(f"input has {c} channels, backbone expects {self.cfg.in_channels}")
        hp, wp = self.cfg.legal_size(h, w)
        top, left = (hp - h) // 2, (wp - w) // 2
        if (hp, wp) != (h, w):
            x = F.pad(x, (left, wp - w - left, top, hp - h - top))
        out = self.net(x)
        return out[..., top:top + h, left:left + w]

    def probe_parameters(self) -> dict[str, nn.Parameter]:
        return self.net.probe_parameters()


def build_backbone(cfg: BackboneConfig, seed: int | None = None) -> Backbone:
    """Validate ``cfg`` and build the backbone, seeding torch when ``seed`` is given."""
    cfg.validate()
    if seed is not None:
        torch.manual_seed(seed)
    net = {"swin_unet": SwinUnet, "unet": UNet, "convlstm": ConvLSTM}[cfg.kind](cfg)
    return Backbone(cfg, net)


def gradient_probe(model: nn.Module, x: torch.Tensor, params: dict[str, torch.Tensor] | None = None,
                   step: float = 1e-6, seed: int = 0, n_entries: int = 1) -> dict[str, float]:
    """Compare autograd with central differences on a few parameter entries.

    Runs in float64 on a copy of ``model``'s dtype (the caller should pass a
    double model). The readout is ``sum(R * model(x))`` for a fixed random
    ``R``. Returns the relative error per probe.
    """
    if params is None:
        params = model.probe_parameters()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out_shape = model(x).shape
    readout = torch.randn(out_shape, generator=gen, dtype=x.dtype)

    def f():
        return (model(x) * readout).sum()

    model.zero_grad()
    f().backward()
    errors = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=gen)[:n_entries]
        worst = 0.0
        for i in idx.tolist():
            g = p.grad.view(-1)[i].item()
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
            num = (up - down) / (2 * step)
            scale = max(abs(g), abs(num))
            worst = max(worst, 0.0 if scale == 0 else abs(g - num) / scale)
        errors[name] = worst
    return errors
