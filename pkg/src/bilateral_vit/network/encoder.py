"""Hybrid CNN-transformer encoder (main branch)."""

import torch
import torch.nn as nn

from .blocks import ConvBNReLU


class ResidualBlock(nn.Module):
    """Basic pre-activation-free residual block; downsamples when ``stride == 2``."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = ConvBNReLU(in_ch, out_ch, stride=stride)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.bn2(self.conv2(self.conv1(x)))
        return self.relu(out + identity)


class CNNStem(nn.Module):
    """Three stride-2 stages giving skip features at strides 2, 4 and 8."""

    def __init__(self, in_ch, channels):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = nn.Sequential(ConvBNReLU(in_ch, c1, stride=2), ResidualBlock(c1, c1))
        self.stage2 = ResidualBlock(c1, c2, stride=2)
        self.stage3 = ResidualBlock(c2, c3, stride=2)

    def forward(self, x):
        s2 = self.stage1(x)
        s4 = self.stage2(s2)
        s8 = self.stage3(s4)
        return [s2, s4, s8]


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TransformerEncoder(nn.Module):
    """Patch-embeds the stride-8 CNN feature (stride-2 conv) and runs ``depth`` blocks."""

    def __init__(self, in_ch, dim, depth, heads, grid, mlp_ratio=4):
        super().__init__()
        self.grid = grid
        self.patch_embed = nn.Conv2d(in_ch, dim, kernel_size=2, stride=2)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid, dim))
        self.blocks = nn.ModuleList([TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.patch_embed(x)
        n, d, h, w = x.shape
        if (h, w) != (self.grid, self.grid):
            raise ValueError(f"patch grid {h}x{w} does not match configured {self.grid}x{self.grid}")
        tokens = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(n, d, h, w)
