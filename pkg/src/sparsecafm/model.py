"""Shifted-window attention upsampler for sparse C-AFM scans.

The network composes three stages::

    f0  = shallow(x)                 # one 3x3 conv, 1 -> C channels
    fdf = deep(f0)                   # residual Swin blocks + 3x3 conv
    y   = reconstruct(f0 + fdf)      # sub-pixel conv head, x sigma

Feature maps inside the deep stage are kept channels-last, (B, H, W, C).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, NormStateError, NumericError
from .scanio import SIGMAS, NormState, ScanField


@dataclass(frozen=True)
class ModelConfig:
    sigma: int = 4
    embed_dim: int = 180
    rstb_count: int = 6
    stl_per_rstb: int = 6
    window_size: int = 8
    num_heads: int = 6
    in_channels: int = 1
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.sigma not in SIGMAS:
            raise ConfigError(f"unsupported sigma {self.sigma}; expected one of {SIGMAS}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if min(self.rstb_count, self.stl_per_rstb, self.in_channels, self.embed_dim) < 1:
            raise ConfigError("layer counts and widths must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def small_config(sigma: int) -> ModelConfig:
    """Desk-scale profile used for CPU training runs."""
    return ModelConfig(sigma=sigma, embed_dim=32, rstb_count=2, stl_per_rstb=2, window_size=8, num_heads=4)


def tiny_config(sigma: int = 2) -> ModelConfig:
    """Smallest useful network; used for gradient checks."""
    return ModelConfig(sigma=sigma, embed_dim=8, rstb_count=1, stl_per_rstb=1, window_size=4, num_heads=2)


# ---------------------------------------------------------------------------
# tensor rearrangements


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window * window, C), zero-padding H, W up to multiples of ``window``."""
    B, H, W, C = x.shape
    ph, pw = (-H) % window, (-W) % window
    if ph or pw:
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
    Hp, Wp = H + ph, W + pw
    x = x.view(B, Hp // window, window, Wp // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`; crops the padding back off."""
    Hp, Wp = H + (-H) % window, W + (-W) % window
    nh, nw = Hp // window, Wp // window
    C = windows.shape[-1]
    B = windows.shape[0] // (nh * nw)
    x = windows.view(B, nh, nw, window, window, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, Hp, Wp, C)[:, :H, :W, :]


def depth_to_space(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_shuffle(x, r)


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    return F.pixel_unshuffle(x, r)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shift_attention_mask(H: int, W: int, window: int, shift: int) -> torch.Tensor:
    """Boolean (nW, N, N) mask; True where attention is allowed after a cyclic shift.

    ``H`` and ``W`` must already be window multiples.
    """
    region = torch.zeros(1, H, W, 1)
    slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for hs in slices:
        for ws in slices:
            region[:, hs, ws, :] = cnt
            cnt += 1
    ids = window_partition(region, window).squeeze(-1)
    return ids[:, :, None] == ids[:, None, :]


# ---------------------------------------------------------------------------
# layers


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.last_attn: torch.Tensor | None = None
        self.keep_attn = False

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.num_heads, N, N)
            attn = attn.masked_fill(~mask[None, :, None], float("-inf")).view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class SwinLayer(nn.Module):
    """One Swin transformer layer (STL): W-MSA or SW-MSA followed by an MLP."""

    def __init__(self, dim: int, window: int, num_heads: int, mlp_ratio: float, shifted: bool):
        super().__init__()
        self.window = window
        self.shift = window // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._mask_cache: dict[tuple[int, int], torch.Tensor] = {}

    def _mask(self, H: int, W: int) -> torch.Tensor | None:
        if not self.shift:
            return None
        if (H, W) not in self._mask_cache:
            self._mask_cache[(H, W)] = shift_attention_mask(H, W, self.window, self.shift)
        return self._mask_cache[(H, W)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        h = self.norm1(x)
        ws = self.window
        Hp, Wp = H + (-H) % ws, W + (-W) % ws
        if (Hp, Wp) != (H, W):
            h = F.pad(h, (0, 0, 0, Wp - W, 0, Hp - H))
        if self.shift:
            h = torch.roll(h, shifts=(-self.shift, -self.shift), dims=(1, 2))
        h = self.attn(window_partition(h, ws), self._mask(Hp, Wp))
        h = window_reverse(h, ws, Hp, Wp)
        if self.shift:
            h = torch.roll(h, shifts=(self.shift, self.shift), dims=(1, 2))
        x = x + h[:, :H, :W, :]
        return x + self.mlp(self.norm2(x))


class ResidualSwinBlock(nn.Module):
    """RSTB: a stack of STLs (alternating shift), a 3x3 conv, and a skip."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            SwinLayer(cfg.embed_dim, cfg.window_size, cfg.num_heads, cfg.mlp_ratio, shifted=bool(i % 2))
            for i in range(cfg.stl_per_rstb)
        )
        self.conv = nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, 1, 1)

    def forward(self, x: torch.Tensor, check=None) -> torch.Tensor:
        # x: (B, C, H, W)
        h = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            h = layer(h)
            if check is not None:
                check(h)
        return self.conv(h.permute(0, 3, 1, 2)) + x


class Upsampler(nn.Module):
    """Sub-pixel head: log2(sigma) stages of conv(C -> 4C) + depth-to-space, then conv to 1 channel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = int(math.log2(cfg.sigma))
        self.stages = nn.ModuleList(nn.Conv2d(cfg.embed_dim, 4 * cfg.embed_dim, 3, 1, 1) for _ in range(stages))
        self.conv_last = nn.Conv2d(cfg.embed_dim, cfg.in_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.stages:
            x = depth_to_space(conv(x), 2)
        return self.conv_last(x)


class SparseUpsampler(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_first = nn.Conv2d(cfg.in_channels, cfg.embed_dim, 3, 1, 1)
        self.blocks = nn.ModuleList(ResidualSwinBlock(cfg) for _ in range(cfg.rstb_count))
        self.conv_after_body = nn.Conv2d(cfg.embed_dim, cfg.embed_dim, 3, 1, 1)
        self.upsample = Upsampler(cfg)
        self.apply(_init_weights)
        self.check_finite = True

    def shallow(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv_first(x)

    def deep(self, f0: torch.Tensor) -> torch.Tensor:
        counter = iter(range(1, 1 + len(self.blocks) * self.cfg.stl_per_rstb))

        def check(h):
            idx = next(counter)
            if self.check_finite and not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after Swin layer {idx}")

        x = f0
        for block in self.blocks:
            x = block(x, check)
        return self.conv_after_body(x)

    def reconstruct(self, f_sum: torch.Tensor) -> torch.Tensor:
        return self.upsample(f_sum)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, h, w) -> (B, 1, sigma*h, sigma*w), unclamped.

        Inputs are reflect-padded to a window multiple and the output is
        cropped back.
        """
        h, w = x.shape[-2:]
        ws = self.cfg.window_size
        ph, pw = (-h) % ws, (-w) % ws
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        f0 = self.shallow(x)
        y = self.reconstruct(f0 + self.deep(f0))
        s = self.cfg.sigma
        return y[..., : s * h, : s * w]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig, seed: int = 0) -> SparseUpsampler:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SparseUpsampler(cfg)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes implied by ``cfg``, derived without building the network."""
    C, ws, nh = cfg.embed_dim, cfg.window_size, cfg.num_heads
    hidden = int(C * cfg.mlp_ratio)
    shapes: dict[str, tuple[int, ...]] = {
        "conv_first.weight": (C, cfg.in_channels, 3, 3),
        "conv_first.bias": (C,),
    }
    for b in range(cfg.rstb_count):
        for i in range(cfg.stl_per_rstb):
            p = f"blocks.{b}.layers.{i}."
            shapes.update({
                p + "norm1.weight": (C,),
                p + "norm1.bias": (C,),
                p + "attn.relative_position_bias_table": ((2 * ws - 1) ** 2, nh),
                p + "attn.qkv.weight": (3 * C, C),
                p + "attn.qkv.bias": (3 * C,),
                p + "attn.proj.weight": (C, C),
                p + "attn.proj.bias": (C,),
                p + "norm2.weight": (C,),
                p + "norm2.bias": (C,),
                p + "mlp.0.weight": (hidden, C),
                p + "mlp.0.bias": (hidden,),
                p + "mlp.2.weight": (C, hidden),
                p + "mlp.2.bias": (C,),
            })
        shapes[f"blocks.{b}.conv.weight"] = (C, C, 3, 3)
        shapes[f"blocks.{b}.conv.bias"] = (C,)
    shapes["conv_after_body.weight"] = (C, C, 3, 3)
    shapes["conv_after_body.bias"] = (C,)
    for s in range(int(math.log2(cfg.sigma))):
        shapes[f"upsample.stages.{s}.weight"] = (4 * C, C, 3, 3)
        shapes[f"upsample.stages.{s}.bias"] = (4 * C,)
    shapes["upsample.conv_last.weight"] = (cfg.in_channels, C, 3, 3)
    shapes["upsample.conv_last.bias"] = (cfg.in_channels,)
    return shapes


# ---------------------------------------------------------------------------
# ScanField-level API


def _as_input(x: ScanField, cfg: ModelConfig) -> torch.Tensor:
    if x.norm_state is not NormState.NORMALIZED:
        raise NormStateError("model input must be a normalized field")
    return torch.from_numpy(np.array(x.data, dtype=np.float32))[None, None]


def shallow_extract(x: ScanField, model: SparseUpsampler) -> torch.Tensor:
    """F0 for a single normalized field, shape (C, h, w)."""
    with torch.no_grad():
        return model.shallow(_as_input(x, model.cfg))[0]


@torch.no_grad()
def predict(model: SparseUpsampler, x: ScanField, target_shape: tuple[int, int] | None = None) -> ScanField:
    """Inference on one normalized sparse field; returns a normalized field clamped to [0, 1]."""
    s = model.cfg.sigma
    expected = (x.shape[0] * s, x.shape[1] * s)
    if target_shape is not None and tuple(target_shape) != expected:
        raise DimensionError(f"sigma={s} maps {x.shape} to {expected}, but {tuple(target_shape)} was requested")
    model.eval()
    y = model(_as_input(x, model.cfg)).clamp_(0.0, 1.0)[0, 0].numpy()
    return x.replace(data=y)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
