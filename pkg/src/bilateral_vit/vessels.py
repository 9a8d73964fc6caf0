"""Vessel maps for the vessel branch: from a trained model, a disk cache, or a synthetic generator."""

from __future__ import annotations

import logging
import math
import os
import re
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .preprocessing import normalize_intensity, resample, to_unit_float
from .types import NetworkConfig, Variant, VesselMap

logger = logging.getLogger(__name__)

CACHE_ENV = "BILATERAL_CACHE"
SOURCES = ("model", "cache", "synthetic")
FOREGROUND_BAND = (0.02, 0.20)


class VesselCacheMiss(KeyError):
    pass


class VesselModelUnavailable(RuntimeError):
    pass


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "bilateral_vit" / "vessels"))


class VesselCache:
    """Maps stored as ``<root>/<dataset>/<sample_id>.png`` (8-bit, 255 == probability 1)."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_cache_dir()

    def path(self, dataset: str, sample_id: str) -> Path:
        return self.root / (dataset or "default") / f"{sample_id}.png"

    def __contains__(self, key) -> bool:
        return self.path(*key).is_file()

    def get(self, dataset: str, sample_id: str) -> VesselMap:
        p = self.path(dataset, sample_id)
        if not p.is_file():
            raise VesselCacheMiss(f"no cached vessel map for sample {sample_id!r} (looked in {p})")
        with Image.open(p) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        return VesselMap(arr)

    def put(self, dataset: str, sample_id: str, vmap) -> Path:
        arr = vmap.map if isinstance(vmap, VesselMap) else np.asarray(vmap, dtype=np.float32)
        p = self.path(dataset, sample_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        img = Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L")
        fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".png.tmp")
        os.close(fd)
        try:
            img.save(tmp, format="PNG")
            os.replace(tmp, p)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return p


def _stamp(canvas: np.ndarray, x: float, y: float, r: float):
    h, w = canvas.shape
    x0, x1 = max(int(math.floor(x - r)), 0), min(int(math.ceil(x + r)) + 1, w)
    y0, y1 = max(int(math.floor(y - r)), 0), min(int(math.ceil(y + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.ogrid[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] |= (xx - x) ** 2 + (yy - y) ** 2 <= r * r


def _grow(canvas, rng, x, y, heading, width, length, depth, size, bend=0.0):
    step = max(size / 256.0, 0.5)
    travelled = 0.0
    next_branch = rng.uniform(0.15, 0.35) * length
    curvature = (bend + rng.normal(0.0, 0.6)) / size
    while travelled < length:
        _stamp(canvas, x, y, max(width / 2.0, 0.5))
        heading += curvature * step + rng.normal(0.0, 0.04)
        x += step * math.cos(heading)
        y += step * math.sin(heading)
        travelled += step
        if not (-0.1 * size <= x <= 1.1 * size and -0.1 * size <= y <= 1.1 * size):
            return
        if depth > 0 and travelled >= next_branch:
            side = rng.choice((-1.0, 1.0))
            _grow(canvas, rng, x, y, heading + side * rng.uniform(0.4, 0.9), width * 0.7,
                  (length - travelled) * rng.uniform(0.4, 0.7), depth - 1, size)
            width *= 0.85
            next_branch = travelled + rng.uniform(0.2, 0.4) * length


def synth_vessels(size: int, seed: int, disc_xy: Optional[Sequence[float]] = None) -> VesselMap:
    """Binary branching vessel tree radiating from a (simulated) optic disc.

    Arcades leave the disc above and below toward the macula side plus a
    shorter nasal pair; branches thin as they split. Trees are added or
    thinned until the foreground fraction lies inside ``FOREGROUND_BAND``.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    rng = np.random.default_rng(seed)
    if disc_xy is None:
        side = rng.choice((-1.0, 1.0))
        disc_xy = (size / 2 + side * rng.uniform(0.15, 0.25) * size, size / 2 + rng.uniform(-0.05, 0.05) * size)
    dx, dy = float(disc_xy[0]), float(disc_xy[1])
    # Macula lies on the side of the disc facing the image centre.
    toward = 0.0 if dx < size / 2 else math.pi
    base_width = max(size / 64.0, 1.0)
    for attempt in range(6):
        canvas = np.zeros((size, size), dtype=bool)
        width = base_width * (0.8 ** attempt)
        # (heading, relative length, bend); temporal arcades curve around the macula.
        arcades = [
            (toward - 1.2, 1.1, 1.6), (toward + 1.2, 1.1, -1.6),
            (toward + math.pi - 0.6, 0.5, 0.0), (toward + math.pi + 0.6, 0.5, 0.0),
        ]
        if toward:
            arcades = [(h, rl, -b) for h, rl, b in arcades]
        for heading, rel_len, bend in arcades:
            _grow(canvas, rng, dx, dy, heading + rng.normal(0, 0.1), width,
                  rel_len * size * rng.uniform(0.8, 1.0), depth=3, size=size, bend=bend)
        frac = canvas.mean()
        extra = 0
        while frac < FOREGROUND_BAND[0] and extra < 8:
            _grow(canvas, rng, dx, dy, rng.uniform(0, 2 * math.pi), width, 0.6 * size, 3, size)
            frac = canvas.mean()
            extra += 1
        if frac <= FOREGROUND_BAND[1]:
            break
    return VesselMap(canvas.astype(np.float32))


@torch.no_grad()
def vessel_map_from_model(model, image: np.ndarray, mean=None, std=None) -> VesselMap:
    """Run a single-output vessel network on a preprocessed [0, 1] image."""
    size = model.config.input_size
    h, w = image.shape[:2]
    if h != w:
        raise ValueError("vessel model expects a square preprocessed image")
    work = image if h == size else resample(to_unit_float(image), size / h, size)
    kwargs = {} if mean is None else dict(mean=mean, std=std)
    x = torch.from_numpy(normalize_intensity(work, **kwargs)).permute(2, 0, 1)[None].float()
    model.eval()
    prob = torch.sigmoid(model(x))[0, 0].numpy()
    if h != size:
        prob = resample(prob, h / size, h)
    return VesselMap(np.clip(prob, 0.0, 1.0))


def get_vessel_map(
    image: np.ndarray,
    source: str,
    *,
    sample_id: Optional[str] = None,
    dataset: str = "",
    cache=None,
    model=None,
    seed: int = 0,
    binarize: bool = False,
) -> VesselMap:
    """Vessel map aligned with a preprocessed (network-resolution) image."""
    size = image.shape[0]
    if source == "synthetic":
        vmap = synth_vessels(size, seed)
    elif source == "cache":
        cache = cache if isinstance(cache, VesselCache) else VesselCache(cache)
        if sample_id is None:
            raise ValueError("source='cache' needs a sample_id")
        vmap = cache.get(dataset, sample_id)
    elif source == "model":
        if model is None:
            raise VesselModelUnavailable("source='model' but no vessel model was provided")
        vmap = vessel_map_from_model(model, image)
    else:
        raise ValueError(f"unknown vessel source {source!r}; choose from {SOURCES}")
    if vmap.map.shape != image.shape[:2]:
        raise ValueError(
            f"vessel map for {sample_id or 'image'} has size {vmap.map.shape}, "
            f"expected {image.shape[:2]}"
        )
    if binarize:
        vmap = VesselMap((vmap.map >= 0.5).astype(np.float32))
    return vmap


def load_drive_pairs(root) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read DRIVE-layout ``images/`` and ``1st_manual/`` pairs, matched on the leading number."""
    root = Path(root)
    img_dir, gt_dir = root / "images", root / "1st_manual"
    if not img_dir.is_dir() or not gt_dir.is_dir():
        raise FileNotFoundError(f"{root} needs images/ and 1st_manual/ subdirectories")

    def key(p):
        m = re.match(r"(\d+)", p.name)
        return m.group(1) if m else p.stem

    gts = {key(p): p for p in gt_dir.iterdir() if p.is_file()}
    pairs = []
    for p in sorted(img_dir.iterdir()):
        if not p.is_file() or key(p) not in gts:
            continue
        with Image.open(p) as im:
            img = np.asarray(im.convert("RGB"))
        with Image.open(gts[key(p)]) as im:
            gt = (np.asarray(im.convert("L")) > 127).astype(np.float32)
        pairs.append((img, gt))
    return pairs


class VesselTrainingSet(torch.utils.data.Dataset):
    def __init__(self, pairs, size: int):
        from .preprocessing import apply_transform, preprocess_image

        self.items = []
        for i, (img, gt) in enumerate(pairs):
            image, t = preprocess_image(img, size)
            target = apply_transform(np.asarray(gt, dtype=np.float32), t, order=0)
            self.items.append({
                "id": str(i),
                "image": torch.from_numpy(normalize_intensity(image)).permute(2, 0, 1).float(),
                "target": torch.from_numpy((target > 0.5).astype(np.float32))[None],
            })

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def train_vessel_model(pairs, config: Optional[NetworkConfig] = None, train_config=None, out_dir=None,
                       resume: bool = False, seed: int = 0):
    """Train a vit_plain network with one output channel on (fundus, vessel mask) pairs.

    Returns ``(model, TrainResult)``; the checkpoint under ``out_dir`` is
    loadable with :func:`bilateral_vit.network.load_model`.
    """
    from .network import build_model
    from .training import TrainConfig, train

    pairs = list(pairs)
    if not pairs:
        raise ValueError("vessel training set is empty")
    config = (config or NetworkConfig.toy(Variant.VIT_PLAIN)).replace(variant=Variant.VIT_PLAIN, out_channels=1)
    train_config = train_config or TrainConfig()
    dataset = VesselTrainingSet(pairs, config.input_size)
    model = build_model(config, seed=seed)
    result = train(model, dataset, train_config, out_dir=out_dir, resume=resume,
                   extra_checkpoint={"role": "vessel"})
    return model, result
