import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvBNReLU(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, dilation=1):
        super().__init__()
        padding = dilation * (kernel_size // 2)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding,
                              dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


def upsample_like(src, target):
    return F.interpolate(src, size=target.shape[2:], mode="bilinear", align_corners=False)


class RSU(nn.Module):
    """Residual U-block of depth ``depth``.

    Same layout as U^2-Net's RSU-L: ``depth - 1`` encoder convolutions with
    max-pooling between them, a dilated bottom convolution, a mirrored
    decoder, and a residual add onto the input projection. Pooling is
    skipped once a map is smaller than ``min_pool_size`` so tiny inputs
    never collapse to 1x1 (which batch norm cannot handle at batch size 1).
    """

    def __init__(self, in_ch, mid_ch, out_ch, depth=4, min_pool_size=4):
        super().__init__()
        if depth < 3:
            raise ValueError("RSU depth must be >= 3")
        self.depth = depth
        self.min_pool_size = min_pool_size
        self.conv_in = ConvBNReLU(in_ch, out_ch)
        self.enc = nn.ModuleList(
            [ConvBNReLU(out_ch, mid_ch)] + [ConvBNReLU(mid_ch, mid_ch) for _ in range(depth - 2)]
        )
        self.bottom = ConvBNReLU(mid_ch, mid_ch, dilation=2)
        self.dec = nn.ModuleList(
            [ConvBNReLU(2 * mid_ch, mid_ch) for _ in range(depth - 2)] + [ConvBNReLU(2 * mid_ch, out_ch)]
        )

    def _pool(self, x):
        if min(x.shape[2:]) < self.min_pool_size:
            return x
        return F.max_pool2d(x, 2, stride=2, ceil_mode=True)

    def forward(self, x):
        hx_in = self.conv_in(x)
        skips = []
        h = hx_in
        for i, conv in enumerate(self.enc):
            h = conv(h)
            skips.append(h)
            if i < len(self.enc) - 1:
                h = self._pool(h)
        h = self.bottom(h)
        for conv, skip in zip(self.dec, reversed(skips)):
            if h.shape[2:] != skip.shape[2:]:
                h = upsample_like(h, skip)
            h = conv(torch.cat((h, skip), dim=1))
        return h + hx_in


class SIGBlock(nn.Module):
    """Spatial information guidance: an RSU applied to the vessel input rescaled to ``stride``."""

    def __init__(self, in_ch, mid_ch, out_ch, stride, depth=4):
        super().__init__()
        self.stride = stride
        self.rsu = RSU(in_ch, mid_ch, out_ch, depth=depth)

    def forward(self, vessel):
        if self.stride > 1:
            h, w = vessel.shape[2:]
            vessel = F.interpolate(vessel, size=(h // self.stride, w // self.stride),
                                   mode="bilinear", align_corners=False, antialias=True)
        return self.rsu(vessel)


class MFFBlock(nn.Module):
    """Multi-scale feature fusion decoder stage.

    Upsamples the hidden state 2x, concatenates it with the encoder skip
    and the SIG features of the same resolution, and fuses the stack with
    an RSU.
    """

    def __init__(self, hidden_ch, skip_ch, sig_ch, mid_ch, out_ch, depth):
        super().__init__()
        self.in_channels = hidden_ch + skip_ch + sig_ch
        self.mid_channels = mid_ch
        self.rsu = RSU(self.in_channels, mid_ch, out_ch, depth=depth)

    def forward(self, hidden, skip, sig):
        hidden = F.interpolate(hidden, scale_factor=2, mode="bilinear", align_corners=False)
        parts = [hidden, skip] + ([sig] if sig is not None else [])
        for t in parts[1:]:
            if t.shape[2:] != hidden.shape[2:]:
                raise ValueError(
                    f"MFF input misaligned: hidden {tuple(hidden.shape[2:])} vs {tuple(t.shape[2:])}"
                )
        return self.rsu(torch.cat(parts, dim=1))


class PlainDecoderBlock(nn.Module):
    """TransUNet-style cup: 2x upsample, concat skip (and optional SIG), two conv layers."""

    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv1 = ConvBNReLU(in_ch + skip_ch, out_ch)
        self.conv2 = ConvBNReLU(out_ch, out_ch)

    def forward(self, hidden, skip, sig=None):
        hidden = F.interpolate(hidden, scale_factor=2, mode="bilinear", align_corners=False)
        parts = [hidden, skip] + ([sig] if sig is not None else [])
        for t in parts[1:]:
            if t.shape[2:] != hidden.shape[2:]:
                raise ValueError(
                    f"decoder input misaligned: hidden {tuple(hidden.shape[2:])} vs {tuple(t.shape[2:])}"
                )
        return self.conv2(self.conv1(torch.cat(parts, dim=1)))


class OutputHead(nn.Module):
    """Two convolutions producing the score map: fuse at stride 2, upsample, project to logits."""

    def __init__(self, in_ch, mid_ch, out_ch=1):
        super().__init__()
        self.fuse = ConvBNReLU(in_ch, mid_ch)
        self.proj = nn.Conv2d(mid_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x, size):
        x = self.fuse(x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.proj(x)
