"""End-to-end training and evaluation runs shared by the CLI commands."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .datasets import FoveaDataset, prepare_sample
from .evaluation import cross_dataset_eval, emit_report
from .inference import write_predictions
from .network import build_model, load_model, read_checkpoint
from .preprocessing import DEFAULT_MEAN, DEFAULT_STD, channel_stats, preprocess_image
from .training import TrainConfig, train
from .types import ConfigError, EvalThresholds, NetworkConfig, Variant
from .vessels import CACHE_ENV, VesselCache, get_vessel_map

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    vessel_source: str = "cache"
    vessel_checkpoint: Optional[str] = None
    cache_dir: Optional[str] = None
    binarize_vessels: bool = False
    mask_fraction: float = 0.25
    augment: bool = True
    # "dataset" computes channel statistics on the training split; "imagenet" uses fixed constants.
    normalization: str = "dataset"
    split_scheme: str = "manifest"
    split_frac: float = 0.8

    def __post_init__(self):
        if self.vessel_source not in ("cache", "model", "synthetic"):
            raise ConfigError(f"vessel_source must be cache, model or synthetic, not {self.vessel_source!r}")
        if self.normalization not in ("dataset", "imagenet"):
            raise ConfigError("normalization must be 'dataset' or 'imagenet'")
        if self.mask_fraction <= 0:
            raise ConfigError("mask_fraction must be positive")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "training": self.training.to_dict(), "data": asdict(self.data)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:8]


def _section(d, name, cls):
    raw = dict(d.get(name) or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return raw


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a YAML run config and apply flag overrides (flags win).

    ``network.toy: true`` starts from the toy preset instead of the
    full-size defaults.
    """
    d = {}
    if path is not None:
        text = Path(path).read_text()
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a mapping")
    unknown = set(d) - {"network", "training", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    overrides = overrides or {}
    net_raw = dict(d.get("network") or {})
    toy = bool(net_raw.pop("toy", False))
    net_raw.update(overrides.get("network", {}))
    known = {f.name for f in fields(NetworkConfig)}
    if set(net_raw) - known:
        raise ConfigError(f"unknown keys in [network]: {sorted(set(net_raw) - known)}")
    network = NetworkConfig.toy(**net_raw) if toy else NetworkConfig(**net_raw)
    tr_raw = _section(d, "training", TrainConfig)
    tr_raw.update(overrides.get("training", {}))
    data_raw = _section(d, "data", DataConfig)
    data_raw.update(overrides.get("data", {}))
    return RunConfig(network=network, training=TrainConfig(**tr_raw), data=DataConfig(**data_raw))


def new_run_dir(root, config: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{config.digest()}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def resolve_cache_dir(data_cfg: DataConfig, data_root=None, explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    if data_cfg.cache_dir:
        return Path(data_cfg.cache_dir)
    if data_root is not None:
        return Path(data_root) / "vessel_cache"
    return VesselCache().root


def make_vessel_provider(variant: Variant, data_cfg: DataConfig, cache_dir=None):
    """Return ``fn(image01, sample) -> VesselMap`` for vessel-map variants, else ``None``."""
    if not variant.needs_vessel_map:
        return None
    source = data_cfg.vessel_source
    vessel_model = None
    cache = VesselCache(cache_dir) if source == "cache" else None
    if source == "model":
        if not data_cfg.vessel_checkpoint:
            raise ConfigError("vessel_source=model needs data.vessel_checkpoint")
        vessel_model = load_model(data_cfg.vessel_checkpoint)

    def provider(image01, sample):
        seed = int(hashlib.sha1(sample.id.encode()).hexdigest()[:8], 16)
        return get_vessel_map(image01, source, sample_id=sample.id, dataset=sample.dataset_tag,
                              cache=cache, model=vessel_model, seed=seed,
                              binarize=data_cfg.binarize_vessels)

    return provider


def normalization_for(samples, data_cfg: DataConfig, size: int):
    if data_cfg.normalization == "imagenet":
        return DEFAULT_MEAN, DEFAULT_STD
    return channel_stats(preprocess_image(s.load_image(), size)[0] for s in samples)


def train_run(train_samples: Sequence, config: RunConfig, run_dir, val_samples: Sequence = (),
              cache_dir=None, resume: bool = False):
    """Prepare samples, train, and leave ``best.pt``/``last.pt``/``metrics.jsonl`` in ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    net = config.network
    size = net.input_size
    provider = make_vessel_provider(net.variant, config.data, cache_dir)
    mean, std = normalization_for(train_samples, config.data, size)

    def dataset(samples, augment):
        prepared = [prepare_sample(s, size, provider, config.data.mask_fraction) for s in samples]
        return FoveaDataset(prepared, augment=augment, seed=config.training.seed, mean=mean, std=std)

    train_set = dataset(train_samples, config.data.augment)
    val_set = dataset(val_samples, False) if val_samples else None
    model = build_model(net, seed=config.training.seed)
    tags = sorted({s.dataset_tag for s in train_samples})
    extra = {
        "dataset_tag": "+".join(tags),
        "normalization": {"mean": list(mean), "std": list(std)},
        "data_config": asdict(config.data),
        "cache_dir": str(cache_dir) if cache_dir else None,
    }
    result = train(model, train_set, config.training, out_dir=run_dir, val_dataset=val_set,
                   resume=resume, extra_checkpoint=extra)
    return model, result


def run_is_complete(run_dir, epochs: int) -> bool:
    last = Path(run_dir) / "last.pt"
    if not last.is_file():
        return False
    return read_checkpoint(last)["epoch"] + 1 >= epochs


def evaluate_checkpoint(checkpoint, samples: Sequence, thresholds: EvalThresholds, report_dir,
                        cache_dir=None, data_overrides: Optional[dict] = None, stem: str = "report"):
    """Predict, score and emit text/CSV/plot reports plus ``predictions.jsonl``."""
    payload = read_checkpoint(checkpoint)
    variant = Variant(payload["network_config"]["variant"])
    data_cfg = DataConfig(**{**payload.get("data_config", {}), **(data_overrides or {})})
    if cache_dir is None and payload.get("cache_dir") and data_cfg.vessel_source == "cache":
        cache_dir = payload["cache_dir"]
    provider = make_vessel_provider(variant, data_cfg, cache_dir)
    report, preds = cross_dataset_eval(checkpoint, samples, thresholds, vessel_provider=provider)
    report_dir = Path(report_dir)
    files = emit_report(report, report_dir, stem=stem)
    write_predictions(preds.values(), report_dir / f"{stem}_predictions.jsonl")
    return report, files
