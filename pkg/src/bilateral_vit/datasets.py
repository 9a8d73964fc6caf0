"""Manifest-driven dataset loading, splitting, and a synthetic fundus generator."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .preprocessing import (
    DEFAULT_MEAN,
    DEFAULT_STD,
    AugmentParams,
    apply_augmentation,
    apply_transform,
    make_fovea_mask,
    mask_radius_for,
    normalize_intensity,
    preprocess_image,
)
from .types import DiseaseStatus, FundusSample, PreprocessTransform, validate_sample
from .vessels import VesselCache, synth_vessels

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "image_path", "fovea_x", "fovea_y", "disc_radius_R", "disease_status", "split")


class DatasetError(ValueError):
    pass


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: list = field(default_factory=list)  # (row number, id, reason)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def load_dataset(root_dir, manifest_csv="manifest.csv", split: Optional[str] = None,
                 dataset_tag: Optional[str] = None):
    """Read a manifest into validated samples.

    Returns ``(samples, LoadReport)``. Bad rows are skipped and listed in
    the report; an empty result raises :class:`DatasetError`.
    """
    root = Path(root_dir)
    manifest = Path(manifest_csv)
    if not manifest.is_absolute():
        manifest = root / manifest
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    tag = dataset_tag or root.name
    report = LoadReport()
    samples = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        missing_cols = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing_cols:
            raise DatasetError(f"manifest {manifest} lacks columns: {sorted(missing_cols)}")
        for rowno, row in enumerate(reader, start=2):
            sid = (row.get("id") or "").strip()
            try:
                if not sid:
                    raise ValueError("empty id")
                image_path = root / row["image_path"]
                if not image_path.is_file():
                    raise ValueError(f"missing image file {image_path}")
                sample = FundusSample(
                    id=sid,
                    image=None,
                    image_path=str(image_path),
                    fovea_xy=(float(row["fovea_x"]), float(row["fovea_y"])),
                    disc_radius_R=float(row["disc_radius_R"]),
                    disease_status=DiseaseStatus(row["disease_status"].strip().lower()),
                    dataset_tag=tag,
                    split=(row.get("split") or "").strip() or None,
                )
            except (ValueError, KeyError, TypeError) as exc:
                report.skipped.append((rowno, sid, f"malformed row: {exc}"))
                continue
            problems = validate_sample(sample)
            if problems:
                report.skipped.append((rowno, sid, "; ".join(problems)))
                continue
            if split is not None and sample.split != split:
                continue
            samples.append(sample)
    for rowno, sid, reason in report.skipped:
        logger.warning("manifest row %d (%s) skipped: %s", rowno, sid or "?", reason)
    report.loaded = len(samples)
    if not samples:
        raise DatasetError(f"no usable samples in {manifest} (split={split!r}, skipped={report.n_skipped})")
    return samples, report


def write_manifest(samples: Sequence[FundusSample], path, root=None) -> Path:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            if s.image_path is None:
                raise DatasetError(f"sample {s.id!r} has no image_path to record")
            rel = Path(os.path.relpath(s.image_path, root))
            writer.writerow([s.id, rel.as_posix(), repr(s.fovea_xy[0]), repr(s.fovea_xy[1]),
                             repr(s.disc_radius_R), s.disease_status.value, s.split or ""])
    return path


def make_split(samples: Sequence[FundusSample], scheme="manifest", seed: int = 0, frac: float = 0.8):
    """Split into ``(train, test)``.

    ``scheme="manifest"`` trusts each sample's ``split`` field;
    ``scheme="ratio"`` shuffles each disease stratum with ``seed`` and
    puts ``round(frac * n_stratum)`` of it in train.
    """
    if scheme == "manifest":
        train = [s for s in samples if s.split == "train"]
        test = [s for s in samples if s.split in ("test", "val", "valid", "validation")]
    elif scheme == "ratio":
        if not 0 < frac < 1:
            raise ValueError("frac must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        n_train_total = int(round(frac * len(samples)))
        strata = [[s for s in samples if s.disease_status is st] for st in DiseaseStatus]
        # Largest-remainder allocation keeps the overall count exact and each stratum within one.
        quotas = [frac * len(g) for g in strata]
        alloc = [int(math.floor(q)) for q in quotas]
        order = sorted(range(len(strata)), key=lambda i: quotas[i] - alloc[i], reverse=True)
        for i in order[: n_train_total - sum(alloc)]:
            alloc[i] += 1
        train, test = [], []
        for group, k in zip(strata, alloc):
            perm = rng.permutation(len(group))
            train += [group[i] for i in perm[:k]]
            test += [group[i] for i in perm[k:]]
        ids = {s.id: i for i, s in enumerate(samples)}
        train.sort(key=lambda s: ids[s.id])
        test.sort(key=lambda s: ids[s.id])
    else:
        raise ValueError(f"unknown split scheme {scheme!r}")
    if not train or not test:
        raise DatasetError(f"split produced an empty partition (train={len(train)}, test={len(test)})")
    return train, test


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthDataset:
    samples: list
    vessel_maps: dict
    manifest_path: Optional[Path]
    meta: dict


def _soft_disc(xx, yy, cx, cy, r, edge):
    d = np.hypot(xx - cx, yy - cy)
    return np.clip((r - d) / edge + 0.5, 0.0, 1.0)


def synth_fundus(size: int, seed: int, diseased: bool):
    """Render one synthetic fundus image.

    Returns ``(image uint8 HxWx3, vessel map HxW, info dict)`` where
    ``info`` has the exact fovea position, disc radius and lesion facts.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    c = (size - 1) / 2.0
    radius_field = size / 2.0
    fov = np.hypot(xx - c, yy - c) <= radius_field

    R = rng.uniform(0.085, 0.11) * size
    side = rng.choice((-1.0, 1.0))
    disc = (c + side * rng.uniform(0.17, 0.23) * size, c + rng.uniform(-0.05, 0.05) * size)
    fovea = (disc[0] - side * rng.uniform(0.32, 0.38) * size, disc[1] + rng.uniform(0.0, 0.06) * size)

    base = np.array([rng.uniform(0.6, 0.72), rng.uniform(0.26, 0.34), rng.uniform(0.1, 0.15)])
    vignette = 1.0 - 0.35 * (np.hypot(xx - c, yy - c) / radius_field) ** 2
    img = base[None, None, :] * vignette[..., None]

    macula = np.exp(-((xx - fovea[0]) ** 2 + (yy - fovea[1]) ** 2) / (2 * (1.3 * R) ** 2))
    img *= (1.0 - 0.35 * macula)[..., None]
    pit = _soft_disc(xx, yy, fovea[0], fovea[1], 0.35 * R, max(0.15 * R, 0.5))
    img *= (1.0 - 0.3 * pit)[..., None]

    vessels = synth_vessels(size, seed + 7919, disc_xy=disc).map
    avascular = np.hypot(xx - fovea[0], yy - fovea[1]) > 0.6 * R
    vessels = vessels * avascular
    img *= (1.0 - 0.45 * vessels)[..., None]

    disc_mask = _soft_disc(xx, yy, disc[0], disc[1], R, max(0.1 * R, 0.5))
    disc_colour = np.array([0.97, 0.88, 0.62])
    img = img * (1 - disc_mask[..., None]) + disc_colour * disc_mask[..., None]

    lesion_over_fovea = False
    lesions = []
    if diseased:
        if rng.random() < 0.7:
            ang = rng.uniform(0, 2 * math.pi)
            off = rng.uniform(0.0, 0.5) * R
            lesions.append((fovea[0] + off * math.cos(ang), fovea[1] + off * math.sin(ang),
                            rng.uniform(0.6, 1.0) * R))
        for _ in range(rng.integers(1, 4)):
            lesions.append((rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size,
                            rng.uniform(0.2, 0.5) * R))
        for lx, ly, lr in lesions:
            blob = _soft_disc(xx, yy, lx, ly, lr, max(0.3 * lr, 0.5))
            colour = np.array([0.92, 0.8, 0.62]) if rng.random() < 0.6 else np.array([0.35, 0.05, 0.03])
            img = img * (1 - 0.85 * blob[..., None]) + 0.85 * colour * blob[..., None]
            if math.hypot(lx - fovea[0], ly - fovea[1]) < lr:
                lesion_over_fovea = True

    img = img + rng.normal(0.0, 0.015, img.shape)
    img = np.clip(img, 0.0, 1.0) * fov[..., None]
    vessels = vessels * fov
    image = np.round(img * 255).astype(np.uint8)
    info = {
        "fovea_xy": (float(fovea[0]), float(fovea[1])),
        "disc_xy": (float(disc[0]), float(disc[1])),
        "disc_radius_R": float(R),
        "lesion_over_fovea": lesion_over_fovea,
        "n_lesions": len(lesions),
    }
    return image, vessels.astype(np.float32), info


def synth_dataset(n: int, size: int, seed: int, out_dir=None, test_fraction: float = 0.0,
                  dataset_tag: str = "synthetic", cache_dir=None) -> SynthDataset:
    """Generate ``n`` synthetic samples with exact fovea/disc ground truth.

    When ``out_dir`` is given, writes ``images/``, ground-truth ``vessels/``
    (original coordinates), ``manifest.csv``, and a vessel cache of
    preprocessed maps under ``vessel_cache/<dataset_tag>/`` (or
    ``cache_dir``).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if size <= 0 or size % 16:
        raise ValueError("size must be a positive multiple of 16")
    rng = np.random.default_rng(seed)
    statuses = [DiseaseStatus.DISEASED if rng.random() < 0.5 else DiseaseStatus.NORMAL for _ in range(n)]
    sample_seeds = rng.integers(0, 2**31 - 1, size=n)
    n_test = int(round(test_fraction * n))
    test_idx = set(rng.permutation(n)[:n_test].tolist()) if n_test else set()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "vessels").mkdir(parents=True, exist_ok=True)
    cache = None
    if out is not None:
        cache = VesselCache(cache_dir if cache_dir is not None else out / "vessel_cache")

    samples, vmaps, meta = [], {}, {}
    for i in range(n):
        sid = f"synth_{i:04d}"
        diseased = statuses[i] is DiseaseStatus.DISEASED
        image, vessels, info = synth_fundus(size, int(sample_seeds[i]), diseased)
        image_path = None
        if out is not None:
            image_path = out / "images" / f"{sid}.png"
            Image.fromarray(image).save(image_path)
            Image.fromarray(np.round(vessels * 255).astype(np.uint8), mode="L").save(out / "vessels" / f"{sid}.png")
            _, t = preprocess_image(image, size)
            cache.put(dataset_tag, sid, np.clip(apply_transform(vessels, t), 0, 1))
        samples.append(FundusSample(
            id=sid,
            image=image,
            image_path=str(image_path) if image_path else None,
            fovea_xy=info["fovea_xy"],
            disc_radius_R=info["disc_radius_R"],
            disease_status=statuses[i],
            dataset_tag=dataset_tag,
            split="test" if i in test_idx else "train",
        ))
        vmaps[sid] = vessels
        meta[sid] = info
    manifest = None
    if out is not None:
        manifest = write_manifest(samples, out / "manifest.csv", root=out)
    return SynthDataset(samples=samples, vessel_maps=vmaps, manifest_path=manifest, meta=meta)


# ---------------------------------------------------------------------------
# network-ready samples


@dataclass
class PreparedSample:
    id: str
    image: np.ndarray  # SxSx3 in [0, 1]
    mask: np.ndarray  # SxS uint8
    vessel: Optional[np.ndarray]  # SxS in [0, 1]
    transform: PreprocessTransform
    fovea_net: tuple
    radius_net: float


def prepare_sample(sample: FundusSample, size: int,
                   vessel_provider: Optional[Callable] = None,
                   mask_fraction: float = 0.25,
                   mask_radius_px: Optional[float] = None) -> PreparedSample:
    """Preprocess one sample and build its circular target mask in network coordinates.

    ``vessel_provider(image01, sample)`` returns a :class:`VesselMap` or
    ``None``.
    """
    image01, t = preprocess_image(sample.load_image(), size)
    fovea_net = t.forward(sample.fovea_xy)
    radius = mask_radius_px if mask_radius_px is not None else mask_radius_for(
        sample.disc_radius_R, t.scale, mask_fraction)
    mask = make_fovea_mask(fovea_net, radius, size)
    vessel = None
    if vessel_provider is not None:
        vmap = vessel_provider(image01, sample)
        vessel = None if vmap is None else vmap.map
    return PreparedSample(sample.id, image01, mask, vessel, t, fovea_net, sample.disc_radius_R * t.scale)


class FoveaDataset(torch.utils.data.Dataset):
    """Tensors for training; optional seeded augmentation that changes with :meth:`set_epoch`."""

    def __init__(self, prepared: Sequence[PreparedSample], augment: bool = False, seed: int = 0,
                 mean=DEFAULT_MEAN, std=DEFAULT_STD):
        self.prepared = list(prepared)
        self.augment = augment
        self.seed = seed
        self.mean, self.std = mean, std
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.prepared)

    def __getitem__(self, i):
        p = self.prepared[i]
        image, mask, vessel = p.image, p.mask, p.vessel
        if self.augment:
            params = AugmentParams.sample([self.seed, self.epoch, i])
            image, mask, vessel = apply_augmentation(params, image, mask, vessel)
        item = {
            "id": p.id,
            "image": torch.from_numpy(normalize_intensity(image, self.mean, self.std)).permute(2, 0, 1).float(),
            "target": torch.from_numpy(np.asarray(mask, dtype=np.float32))[None],
        }
        if vessel is not None:
            item["vessel"] = torch.from_numpy(np.asarray(vessel, dtype=np.float32))[None]
        return item
