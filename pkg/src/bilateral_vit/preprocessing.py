"""Geometric normalisation, target masks and train-time augmentation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .types import PreprocessTransform

# Max-channel intensity at or below this (on a [0, 1] scale) counts as background.
DARKNESS_THRESHOLD = 10 / 255
DEFAULT_MASK_RADIUS_PX = 32.0
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)


class FoveaOutsideImageWarning(UserWarning):
    pass


def to_unit_float(image: np.ndarray) -> np.ndarray:
    """Return ``image`` as float32 in [0, 1].

    Integer images are divided by 255; float images whose maximum exceeds
    1 are assumed to be on the 0..255 scale.
    """
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float32) / 255.0
    image = image.astype(np.float32, copy=False)
    if image.size and image.max() > 1.0:
        return image / 255.0
    return image


def crop_black_background(image: np.ndarray, threshold: float = DARKNESS_THRESHOLD):
    """Crop to the tight bounding box of non-background pixels.

    Returns ``(cropped, (x0, y0, x1, y1))`` with exclusive upper bounds.
    An image with no foreground comes back whole with the identity box.
    """
    unit = to_unit_float(image)
    h, w = unit.shape[:2]
    bright = unit.max(axis=2) > threshold if unit.ndim == 3 else unit > threshold
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        return image, (0, 0, w, h)
    box = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
    x0, y0, x1, y1 = box
    return image[y0:y1, x0:x1], box


def resample(arr: np.ndarray, scale: float, out_size: int, order: int = 1) -> np.ndarray:
    """Resample so that output pixel ``i`` samples input position ``i / scale``.

    This keeps the affine map ``x_out = scale * x_in`` exact between pixel
    centres, which the coordinate transforms rely on. Downsampling is
    low-pass filtered first when interpolating (``order > 0``).
    """
    squeeze = arr.ndim == 2
    a = arr[..., None] if squeeze else arr
    a = a.astype(np.float32, copy=False)
    if order > 0 and scale < 1.0:
        sigma = 0.5 * (1.0 / scale - 1.0)
        a = ndimage.gaussian_filter(a, sigma=(sigma, sigma, 0), mode="nearest")
    out = np.empty((out_size, out_size, a.shape[2]), dtype=np.float32)
    for c in range(a.shape[2]):
        ndimage.affine_transform(
            a[..., c],
            matrix=np.diag([1.0 / scale, 1.0 / scale]),
            output_shape=(out_size, out_size),
            output=out[..., c],
            order=order,
            mode="nearest",
            prefilter=False,
        )
    return out[..., 0] if squeeze else out


def pad_and_resize(cropped: np.ndarray, target_size: int = 512, crop_box=None, order: int = 1):
    """Zero-pad the shorter side symmetrically to a square, then resize.

    ``crop_box`` is the box the crop came from (defaults to the crop's own
    extent) and is folded into the returned :class:`PreprocessTransform`.
    """
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    h, w = cropped.shape[:2]
    if crop_box is None:
        crop_box = (0, 0, w, h)
    x0, y0, x1, y1 = crop_box
    if x1 <= x0 or y1 <= y0 or h == 0 or w == 0:
        raise ValueError(f"degenerate crop box {tuple(crop_box)}")
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    pad = (left, top, side - w - left, side - h - top)
    transform = PreprocessTransform(
        crop_box=tuple(int(v) for v in crop_box),
        pad=pad,
        scale=target_size / side,
        target_size=target_size,
    )
    unit = cropped.astype(np.float32, copy=False)
    pad_width = [(top, pad[3]), (left, pad[2])] + [(0, 0)] * (unit.ndim - 2)
    squared = np.pad(unit, pad_width, mode="constant")
    if side == target_size:
        return squared, transform
    return resample(squared, transform.scale, target_size, order=order), transform


def preprocess_image(image: np.ndarray, target_size: int = 512):
    """Background crop, pad and resize. Returns a float image in [0, 1] and the transform."""
    cropped, box = crop_black_background(image)
    out, transform = pad_and_resize(to_unit_float(cropped), target_size, crop_box=box)
    return np.clip(out, 0.0, 1.0), transform


def apply_transform(arr: np.ndarray, t: PreprocessTransform, order: int = 1) -> np.ndarray:
    """Push any image-aligned array (vessel map, mask) through ``t``."""
    x0, y0, x1, y1 = t.crop_box
    cropped = arr[y0:y1, x0:x1]
    out, _ = pad_and_resize(cropped, t.target_size, crop_box=t.crop_box, order=order)
    return out


def transform_point(t: PreprocessTransform, p: Sequence[float], direction: str = "forward"):
    if direction == "forward":
        return t.forward(p)
    if direction == "inverse":
        return t.inverse(p)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def make_fovea_mask(center_xy: Sequence[float], mask_radius_px: float, size) -> np.ndarray:
    """Binary disc: pixel (x, y) is set iff its centre lies within the radius."""
    if mask_radius_px <= 0:
        raise ValueError("mask_radius_px must be positive")
    h, w = (size, size) if np.isscalar(size) else size
    cx, cy = float(center_xy[0]), float(center_xy[1])
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        warnings.warn(
            f"fovea centre ({cx:.1f}, {cy:.1f}) outside {w}x{h} image; mask is clipped",
            FoveaOutsideImageWarning,
            stacklevel=2,
        )
    yy, xx = np.ogrid[:h, :w]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= mask_radius_px**2).astype(np.uint8)


def mask_radius_for(disc_radius_R: Optional[float], scale: float = 1.0, fraction: float = 0.25) -> float:
    """Mask radius in network pixels: ``fraction * R`` when R is known."""
    if disc_radius_R is None or disc_radius_R <= 0:
        return DEFAULT_MASK_RADIUS_PX
    return fraction * disc_radius_R * scale


def channel_stats(images) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over an iterable of images (on the [0, 1] scale)."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        unit = to_unit_float(img).reshape(-1, 3).astype(np.float64)
        total += unit.sum(axis=0)
        total_sq += (unit**2).sum(axis=0)
        count += unit.shape[0]
    if count == 0:
        raise ValueError("no images given")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 1e-12))
    return tuple(mean.tolist()), tuple(std.tolist())


def normalize_intensity(image: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    unit = to_unit_float(image)
    out = (unit - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.nan_to_num(out, nan=0.0, posinf=0.0, neginf=0.0)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    brightness: float = 1.0
    contrast: float = 1.0

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()

    @classmethod
    def sample(
        cls,
        rng_seed,
        flip_p: float = 0.5,
        max_rotation_deg: float = 15.0,
        scale_jitter: float = 0.10,
        photometric_jitter: float = 0.20,
    ) -> "AugmentParams":
        rng = np.random.default_rng(rng_seed)
        return cls(
            flip=bool(rng.random() < flip_p),
            angle_deg=float(rng.uniform(-max_rotation_deg, max_rotation_deg)),
            scale=float(rng.uniform(1 - scale_jitter, 1 + scale_jitter)),
            brightness=float(rng.uniform(1 - photometric_jitter, 1 + photometric_jitter)),
            contrast=float(rng.uniform(1 - photometric_jitter, 1 + photometric_jitter)),
        )

    @property
    def is_geometric_identity(self) -> bool:
        return not self.flip and self.angle_deg == 0.0 and self.scale == 1.0

    def matrix(self, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Forward affine ``p' = A @ p + b`` on (x, y) points.

        Flip first (``x -> W - 1 - x``), then rotate and scale about the
        image centre.
        """
        h, w = size
        flip = np.array([[-1.0, 0.0], [0.0, 1.0]]) if self.flip else np.eye(2)
        flip_b = np.array([w - 1.0, 0.0]) if self.flip else np.zeros(2)
        theta = math.radians(self.angle_deg)
        rot = self.scale * np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        a = rot @ flip
        b = rot @ (flip_b - c) + c
        return a, b

    def map_point(self, p: Sequence[float], size: tuple[int, int]) -> tuple[float, float]:
        a, b = self.matrix(size)
        q = a @ np.asarray(p, dtype=float) + b
        return float(q[0]), float(q[1])


def _warp(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    h, w = arr.shape[:2]
    a, b = params.matrix((h, w))
    inv = np.linalg.inv(a)
    # ndimage works in (row, col) = (y, x); swap axes of the inverse map.
    swap = np.array([[0, 1], [1, 0]])
    m = swap @ inv @ swap
    offset = swap @ (-inv @ b)
    channels = [arr] if arr.ndim == 2 else [arr[..., c] for c in range(arr.shape[2])]
    warped = [
        ndimage.affine_transform(ch, m, offset=offset, order=order, mode="constant", cval=0.0)
        for ch in channels
    ]
    return warped[0] if arr.ndim == 2 else np.stack(warped, axis=-1)


def apply_augmentation(params: AugmentParams, image, mask=None, vessel_map=None):
    """Apply one geometric transform to all inputs and photometric jitter to the image only."""
    image = np.asarray(image, dtype=np.float32)
    outs = []
    if params.is_geometric_identity:
        geo = [image, mask, vessel_map]
    else:
        geo = [
            _warp(image, params, order=1),
            None if mask is None else _warp(np.asarray(mask), params, order=0),
            None if vessel_map is None else _warp(np.asarray(vessel_map, dtype=np.float32), params, order=1),
        ]
    img = geo[0]
    if params.brightness != 1.0 or params.contrast != 1.0:
        mean = img.mean()
        img = np.clip((img - mean) * params.contrast + mean * params.brightness, 0.0, 1.0)
    outs.append(img.astype(np.float32))
    outs.append(geo[1])
    outs.append(None if geo[2] is None else np.clip(geo[2], 0.0, 1.0))
    return tuple(outs)


def augment(image, mask, vessel_map, rng_seed, **kwargs):
    """Randomly flip, rotate, scale and jitter; deterministic for a given seed."""
    params = AugmentParams.sample(rng_seed, **kwargs)
    return apply_augmentation(params, image, mask, vessel_map)
