"""Shared domain types.

Coordinates are ``(x, y)`` with x to the right, y downward and the origin at
the centre of the top-left pixel.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DiseaseStatus(str, enum.Enum):
    NORMAL = "normal"
    DISEASED = "diseased"


class Variant(str, enum.Enum):
    """Architectural variants, one per ablation row."""

    VIT_PLAIN = "vit_plain"
    VIT_VB_PLAIN = "vit_vb_plain"
    VIT_VB_MFF = "vit_vb_mff"
    VIT_VBFUNDUS_MFF = "vit_vbfundus_mff"

    @property
    def has_vessel_branch(self) -> bool:
        return self is not Variant.VIT_PLAIN

    @property
    def has_mff(self) -> bool:
        return self in (Variant.VIT_VB_MFF, Variant.VIT_VBFUNDUS_MFF)

    @property
    def needs_vessel_map(self) -> bool:
        return self in (Variant.VIT_VB_PLAIN, Variant.VIT_VB_MFF)

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self]


VARIANT_LABELS = {
    Variant.VIT_PLAIN: "ViT+plain decoder (TransUNet)",
    Variant.VIT_VB_PLAIN: "ViT+VB+plain decoder",
    Variant.VIT_VB_MFF: "ViT+VB+MFF (Proposed)",
    Variant.VIT_VBFUNDUS_MFF: "ViT+VB (fundus as the input)+MFF",
}


class ConfigError(ValueError):
    """Raised for invalid or mutually incompatible configuration values."""


def parse_variant(value) -> Variant:
    if isinstance(value, Variant):
        return value
    try:
        return Variant(value)
    except ValueError:
        valid = ", ".join(v.value for v in Variant)
        raise ConfigError(f"unknown variant {value!r}; valid variants: {valid}") from None


@dataclass(frozen=True)
class FundusSample:
    """One annotated fundus photograph in original pixel space.

    ``image`` may be left as ``None`` when ``image_path`` is given; the
    pixels are then read on demand by :meth:`load_image`.
    """

    id: str
    image: Optional[np.ndarray]
    fovea_xy: tuple[float, float]
    disc_radius_R: float
    disease_status: DiseaseStatus = DiseaseStatus.NORMAL
    dataset_tag: str = ""
    image_path: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "disease_status", DiseaseStatus(self.disease_status))
        object.__setattr__(self, "fovea_xy", (float(self.fovea_xy[0]), float(self.fovea_xy[1])))
        object.__setattr__(self, "disc_radius_R", float(self.disc_radius_R))

    @property
    def shape(self) -> tuple[int, int]:
        """(H, W) without decoding the full image when it lives on disk."""
        if self.image is not None:
            return int(self.image.shape[0]), int(self.image.shape[1])
        if self.image_path is None:
            raise ValueError(f"sample {self.id!r} has neither image nor image_path")
        from PIL import Image

        with Image.open(self.image_path) as im:
            w, h = im.size
        return h, w

    def load_image(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ValueError(f"sample {self.id!r} has neither image nor image_path")
        from PIL import Image

        with Image.open(self.image_path) as im:
            return np.asarray(im.convert("RGB"))


def validate_sample(s: FundusSample) -> list[str]:
    """Return human-readable invariant violations; empty when the sample is valid."""
    problems = []
    try:
        h, w = s.shape
    except (OSError, ValueError) as exc:
        return [f"image unreadable: {exc}"]
    if s.image is not None and (s.image.ndim != 3 or s.image.shape[2] != 3):
        problems.append(f"image must be HxWx3, got shape {tuple(s.image.shape)}")
    x, y = s.fovea_xy
    if not np.isfinite(x) or not 0 <= x < w:
        problems.append("fovea_x out of bounds")
    if not np.isfinite(y) or not 0 <= y < h:
        problems.append("fovea_y out of bounds")
    if not np.isfinite(s.disc_radius_R) or s.disc_radius_R <= 0:
        problems.append("R must be positive")
    return problems


@dataclass(frozen=True)
class PreprocessTransform:
    """Crop, then symmetric zero-pad, then isotropic resize.

    A point maps forward as ``(p - crop_origin + pad_origin) * scale``.
    """

    crop_box: tuple[int, int, int, int]
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    scale: float = 1.0
    target_size: int = 512

    def __post_init__(self):
        x0, y0, x1, y1 = self.crop_box
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate crop box {self.crop_box}")
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls, size: int) -> "PreprocessTransform":
        return cls(crop_box=(0, 0, size, size), scale=1.0, target_size=size)

    @property
    def padded_size(self) -> int:
        x0, y0, x1, y1 = self.crop_box
        left, top, right, bottom = self.pad
        return max(x1 - x0 + left + right, y1 - y0 + top + bottom)

    def forward(self, p: Sequence[float]) -> tuple[float, float]:
        x0, y0 = self.crop_box[:2]
        left, top = self.pad[:2]
        return ((p[0] - x0 + left) * self.scale, (p[1] - y0 + top) * self.scale)

    def inverse(self, p: Sequence[float]) -> tuple[float, float]:
        x0, y0 = self.crop_box[:2]
        left, top = self.pad[:2]
        return (p[0] / self.scale - left + x0, p[1] / self.scale - top + y0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessTransform":
        return cls(
            crop_box=tuple(d["crop_box"]),
            pad=tuple(d["pad"]),
            scale=float(d["scale"]),
            target_size=int(d["target_size"]),
        )


def _check_unit_range(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a 2-D array, got shape {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class VesselMap:
    map: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "map", _check_unit_range(self.map, "vessel map"))

    @property
    def size(self) -> tuple[int, int]:
        return self.map.shape


@dataclass(frozen=True)
class ProbabilityMap:
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", _check_unit_range(self.scores, "probability map"))


# Total encoder downsampling: three stride-2 CNN stages plus a stride-2 patch embedding.
ENCODER_STRIDE = 16


@dataclass(frozen=True)
class NetworkConfig:
    """Architectural hyperparameters.

    Defaults describe the full-size model; :meth:`toy` returns a
    CPU-friendly configuration with the same topology.
    """

    variant: Variant = Variant.VIT_VB_MFF
    input_size: int = 512
    transformer_blocks: int = 12
    transformer_hidden_dim: int = 768
    attention_heads: int = 12
    patch_grid: Optional[int] = None
    cnn_stage_channels: tuple[int, int, int] = (64, 128, 256)
    mff_mid_channels: tuple[int, int, int] = (128, 64, 32)
    sig_block_count: int = 4
    toy_mode: bool = False
    mlp_ratio: int = 4
    bottleneck_channels: int = 512
    decoder_channels: tuple[int, int, int] = (256, 128, 64)
    sig_channels: int = 64
    sig_mid_channels: int = 32
    sig_depth: int = 4
    mff_depths: tuple[int, int, int] = (4, 5, 6)
    head_channels: int = 32
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variant(self.variant))
        for name in ("cnn_stage_channels", "mff_mid_channels", "decoder_channels", "mff_depths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.patch_grid is None and self.input_size > 0:
            object.__setattr__(self, "patch_grid", self.input_size // ENCODER_STRIDE)
        self._validate()

    def _validate(self):
        if self.input_size <= 0 or self.input_size % ENCODER_STRIDE:
            raise ConfigError(
                f"input_size {self.input_size} must be a positive multiple of the "
                f"encoder downsampling factor {ENCODER_STRIDE}"
            )
        if self.patch_grid != self.input_size // ENCODER_STRIDE:
            raise ConfigError(
                f"patch_grid {self.patch_grid} inconsistent with input_size {self.input_size}"
            )
        if self.sig_block_count != 4:
            raise ConfigError("sig_block_count must be 4 (one SIG block per decoder scale)")
        if self.transformer_blocks < 1:
            raise ConfigError("transformer_blocks must be >= 1")
        if self.transformer_hidden_dim % self.attention_heads:
            raise ConfigError("transformer_hidden_dim must be divisible by attention_heads")
        for name in ("cnn_stage_channels", "mff_mid_channels", "decoder_channels", "mff_depths"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs exactly 3 entries")
        if min(self.mff_depths) < 3 or self.sig_depth < 3:
            raise ConfigError("RSU depths must be >= 3")

    @classmethod
    def toy(cls, variant=Variant.VIT_VB_MFF, input_size: int = 64, **overrides) -> "NetworkConfig":
        params = dict(
            variant=variant,
            input_size=input_size,
            transformer_blocks=2,
            transformer_hidden_dim=64,
            attention_heads=4,
            cnn_stage_channels=(16, 32, 64),
            bottleneck_channels=64,
            decoder_channels=(64, 32, 32),
            sig_channels=16,
            sig_mid_channels=8,
            head_channels=32,
            toy_mode=True,
        )
        params.update(overrides)
        return cls(**params)

    @property
    def vessel_in_channels(self) -> int:
        return 3 if self.variant is Variant.VIT_VBFUNDUS_MFF else 1

    def replace(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["variant"] = self.variant.value
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def _multiplier_label(m: float) -> str:
    frac = Fraction(m).limit_denominator(64)
    return f"{frac}R"


@dataclass(frozen=True)
class EvalThresholds:
    """Distance thresholds expressed as multiples of the optic-disc radius."""

    multipliers: tuple[float, ...]
    name: str = "custom"

    def __post_init__(self):
        ms = tuple(float(m) for m in self.multipliers)
        if not ms:
            raise ValueError("at least one multiplier is required")
        if any(m <= 0 for m in ms):
            raise ValueError("multipliers must be positive")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("multipliers must be strictly increasing")
        object.__setattr__(self, "multipliers", ms)

    @classmethod
    def messidor(cls) -> "EvalThresholds":
        return cls((1 / 8, 1 / 4, 1 / 2, 1.0, 2.0), name="messidor")

    @classmethod
    def palm(cls) -> "EvalThresholds":
        return cls((1 / 8, 1 / 4, 1 / 2, 2 / 3, 1.0), name="palm")

    @classmethod
    def preset(cls, name: str) -> "EvalThresholds":
        presets = {"messidor": cls.messidor, "palm": cls.palm}
        try:
            return presets[name.lower()]()
        except KeyError:
            raise ValueError(f"unknown threshold preset {name!r}; choose from {sorted(presets)}") from None

    @property
    def labels(self) -> list[str]:
        return [_multiplier_label(m) for m in self.multipliers]


STRATA = ("overall", "normal", "diseased")


@dataclass(frozen=True)
class EvalReport:
    """Accuracy per threshold multiplier and stratum.

    ``hits[m][stratum]`` and ``n_samples[stratum]`` are the raw counts;
    accuracies are derived from them so the two can never disagree.
    """

    thresholds: EvalThresholds
    hits: dict[float, dict[str, int]]
    n_samples: dict[str, int]
    mean_pixel_error: float
    train_dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    per_sample_error: dict[str, float] = field(default_factory=dict, compare=False)

    def accuracy(self, multiplier: float, stratum: str = "overall") -> Optional[float]:
        n = self.n_samples[stratum]
        if n == 0:
            return None
        return 100.0 * self.hits[multiplier][stratum] / n

    @property
    def per_threshold_accuracy(self) -> dict[float, dict[str, Optional[float]]]:
        return {
            m: {s: self.accuracy(m, s) for s in STRATA} for m in self.thresholds.multipliers
        }


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
