"""Bilateral-ViT and its ablation siblings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from ..types import ConfigError, NetworkConfig, Variant, parse_variant
from .blocks import ConvBNReLU, MFFBlock, OutputHead, PlainDecoderBlock, SIGBlock
from .encoder import CNNStem, TransformerEncoder

# Working strides of the four SIG blocks, coarse to fine.
SIG_STRIDES = (16, 8, 4, 2)
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class FeaturePyramid:
    skips: list  # strides 2, 4, 8
    bottleneck: torch.Tensor  # stride 16


class BilateralViT(nn.Module):
    """Main branch (CNN stem + transformer), optional vessel branch, and decoder.

    Decoder wiring, coarse to fine: SIG block 1 is fused with the
    bottleneck; decoder stage ``k`` (strides 8, 4, 2) receives the stride-
    matched skip and SIG block ``k + 1``; the head sees the last decoder
    output concatenated with SIG block 4.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        v = config.variant
        c = config
        self.stem = CNNStem(3, c.cnn_stage_channels)
        self.transformer = TransformerEncoder(
            c.cnn_stage_channels[2], c.transformer_hidden_dim, c.transformer_blocks,
            c.attention_heads, c.patch_grid, c.mlp_ratio,
        )
        self.bottleneck_conv = ConvBNReLU(c.transformer_hidden_dim, c.bottleneck_channels)

        sig_ch = c.sig_channels if v.has_vessel_branch else 0
        if v.has_vessel_branch:
            self.sig_blocks = nn.ModuleList(
                [SIGBlock(c.vessel_in_channels, c.sig_mid_channels, c.sig_channels, stride=s,
                          depth=c.sig_depth) for s in SIG_STRIDES]
            )
        else:
            self.sig_blocks = None

        skip_chs = list(reversed(c.cnn_stage_channels))  # strides 8, 4, 2
        hidden = c.bottleneck_channels + sig_ch
        stages = []
        for k in range(3):
            if v.has_mff:
                stages.append(MFFBlock(hidden, skip_chs[k], sig_ch, c.mff_mid_channels[k],
                                       c.decoder_channels[k], depth=c.mff_depths[k]))
            else:
                stages.append(PlainDecoderBlock(hidden, skip_chs[k] + sig_ch, c.decoder_channels[k]))
            hidden = c.decoder_channels[k]
        if v.has_mff:
            self.mff_blocks = nn.ModuleList(stages)
            self.plain_blocks = None
        else:
            self.plain_blocks = nn.ModuleList(stages)
            self.mff_blocks = None
        self.head = OutputHead(hidden + sig_ch, c.head_channels, c.out_channels)

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def decoder_stages(self):
        return self.mff_blocks if self.mff_blocks is not None else self.plain_blocks

    @property
    def mff_mid_channels(self) -> Optional[tuple]:
        if self.mff_blocks is None:
            return None
        return tuple(b.mid_channels for b in self.mff_blocks)

    def _check_image(self, image):
        s = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != (s, s):
            raise ValueError(f"expected image of shape Nx3x{s}x{s}, got {tuple(image.shape)}")

    def encoder_forward(self, image) -> FeaturePyramid:
        self._check_image(image)
        skips = self.stem(image)
        bottleneck = self.bottleneck_conv(self.transformer(skips[2]))
        return FeaturePyramid(skips=skips, bottleneck=bottleneck)

    def vessel_branch_forward(self, vessel_input) -> list:
        if self.sig_blocks is None:
            raise ValueError(f"variant {self.variant.value} has no vessel branch")
        s = self.config.input_size
        want = self.config.vessel_in_channels
        if vessel_input.ndim != 4 or vessel_input.shape[1] != want or tuple(vessel_input.shape[2:]) != (s, s):
            raise ValueError(
                f"expected vessel input of shape Nx{want}x{s}x{s}, got {tuple(vessel_input.shape)}"
            )
        return [blk(vessel_input) for blk in self.sig_blocks]

    def decoder_forward(self, pyramid: FeaturePyramid, sig: Optional[list] = None):
        s = self.config.input_size
        if sig is None and self.sig_blocks is not None:
            raise ValueError("this variant needs SIG features")
        hidden = pyramid.bottleneck
        if sig is not None:
            if len(sig) != len(SIG_STRIDES):
                raise ValueError(f"expected {len(SIG_STRIDES)} SIG feature maps, got {len(sig)}")
            for k, (feat, stride) in enumerate(zip(sig, SIG_STRIDES), start=1):
                if tuple(feat.shape[2:]) != (s // stride, s // stride):
                    raise ValueError(
                        f"SIG block {k} output {tuple(feat.shape[2:])} misaligned with stride {stride}"
                    )
            hidden = torch.cat((hidden, sig[0]), dim=1)
        skips = list(reversed(pyramid.skips))
        for k, stage in enumerate(self.decoder_stages):
            stage_sig = sig[k + 1] if sig is not None else None
            if self.mff_blocks is not None:
                hidden = stage(hidden, skips[k], stage_sig)
            elif stage_sig is not None:
                hidden = stage(hidden, torch.cat((skips[k], stage_sig), dim=1))
            else:
                hidden = stage(hidden, skips[k])
        if sig is not None:
            hidden = torch.cat((hidden, sig[3]), dim=1)
        return self.head(hidden, (s, s))

    def forward(self, image, vessel=None):
        """Return raw scores of shape Nx1xSxS (no sigmoid)."""
        v = self.variant
        if vessel is not None and not v.needs_vessel_map:
            raise ValueError(f"variant {v.value} does not accept a vessel map")
        if v.needs_vessel_map and vessel is None:
            raise ValueError(f"variant {v.value} requires a vessel map")
        pyramid = self.encoder_forward(image)
        sig = None
        if v is Variant.VIT_VBFUNDUS_MFF:
            sig = self.vessel_branch_forward(image)
        elif v.needs_vessel_map:
            sig = self.vessel_branch_forward(vessel)
        return self.decoder_forward(pyramid, sig)


def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Kaiming-normal conv/linear weights, zero biases, unit norm scales.

    Uses a private generator so the global RNG is left untouched.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.MultiheadAttention):
                fan_in = m.in_proj_weight.shape[1]
                m.in_proj_weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                nn.init.zeros_(m.in_proj_bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, TransformerEncoder):
                m.pos_embed.normal_(0.0, 0.02, generator=gen)
    return model


def build_model(config, seed: int = 0) -> BilateralViT:
    if isinstance(config, dict):
        config = NetworkConfig.from_dict(config)
    if not isinstance(config, NetworkConfig):
        raise ConfigError(f"expected NetworkConfig, got {type(config).__name__}")
    parse_variant(config.variant)
    return init_weights(BilateralViT(config), seed)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path, model: BilateralViT, **extra) -> Path:
    """Write a self-describing checkpoint (weights + config) atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r} in {path}")
    return payload


def load_model(path) -> BilateralViT:
    payload = read_checkpoint(path)
    model = BilateralViT(NetworkConfig.from_dict(payload["network_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
