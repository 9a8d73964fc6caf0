"""From network scores to a fovea coordinate in original image space."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .preprocessing import DEFAULT_MEAN, DEFAULT_STD, normalize_intensity, preprocess_image
from .types import FundusSample, ProbabilityMap

SIGNIFICANCE_THRESHOLD = 0.5


def scores_to_probmap(logits) -> ProbabilityMap:
    """Elementwise sigmoid of a 2-D score map (tensor or array)."""
    t = torch.as_tensor(logits, dtype=torch.float64)
    while t.ndim > 2:
        t = t[0]
    return ProbabilityMap(torch.sigmoid(t).numpy())


@dataclass(frozen=True)
class FoveaEstimate:
    x: float
    y: float
    confidence: float
    empty_set: bool = False
    n_candidates: int = 0


def extract_fovea(prob, threshold: float = SIGNIFICANCE_THRESHOLD) -> FoveaEstimate:
    """Per-axis median of the pixels scoring above ``threshold``.

    Falls back to the arg-max pixel (``empty_set=True``) when nothing
    clears the threshold.
    """
    scores = prob.scores if isinstance(prob, ProbabilityMap) else np.asarray(prob)
    ys, xs = np.nonzero(scores > threshold)
    if xs.size == 0:
        flat = int(np.argmax(scores))
        y, x = divmod(flat, scores.shape[1])
        return FoveaEstimate(float(x), float(y), float(scores[y, x]), empty_set=True, n_candidates=0)
    return FoveaEstimate(
        x=float(np.median(xs)),
        y=float(np.median(ys)),
        confidence=float(scores[ys, xs].mean()),
        empty_set=False,
        n_candidates=int(xs.size),
    )


@dataclass
class Prediction:
    id: str
    x: float
    y: float
    confidence: float
    empty_set_flag: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def to_record(self) -> dict:
        return {"id": self.id, "x": self.x, "y": self.y, "confidence": self.confidence,
                "empty_set_flag": self.empty_set_flag}


class PredictionError(RuntimeError):
    pass


def write_predictions(predictions, path) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_record()) + "\n")


def read_predictions(path) -> dict[str, Prediction]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[r["id"]] = Prediction(r["id"], r["x"], r["y"], r["confidence"], r["empty_set_flag"])
    return out


def _to_tensor_image(image01: np.ndarray, mean, std) -> torch.Tensor:
    return torch.from_numpy(normalize_intensity(image01, mean, std)).permute(2, 0, 1)[None].float()


@torch.no_grad()
def predict(
    model,
    sample: FundusSample,
    vessel_source: Optional[str] = None,
    *,
    vessel_provider=None,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
    threshold: float = SIGNIFICANCE_THRESHOLD,
) -> Prediction:
    """Preprocess, forward, extract in network space, map back to original pixels.

    ``vessel_provider(image01, sample)`` returns a :class:`VesselMap` for
    vessel-map variants; when omitted it is built from ``vessel_source``
    via :func:`bilateral_vit.vessels.get_vessel_map`.
    """
    try:
        size = model.config.input_size
        image01, transform = preprocess_image(sample.load_image(), size)
        x = _to_tensor_image(image01, mean, std)
        vessel = None
        if model.config.variant.needs_vessel_map:
            if vessel_provider is None:
                if vessel_source is None:
                    raise ValueError(f"variant {model.config.variant.value} needs a vessel source")
                from .vessels import get_vessel_map

                def vessel_provider(img, s):
                    return get_vessel_map(img, vessel_source, sample_id=s.id, dataset=s.dataset_tag)

            vmap = vessel_provider(image01, sample)
            vessel = torch.from_numpy(vmap.map)[None, None].float()
        model.eval()
        logits = model(x, vessel)
        est = extract_fovea(scores_to_probmap(logits), threshold)
        ox, oy = transform.inverse((est.x, est.y))
    except Exception as exc:
        raise PredictionError(f"sample {sample.id!r}: {exc}") from exc
    return Prediction(
        id=sample.id,
        x=float(ox),
        y=float(oy),
        confidence=est.confidence,
        empty_set_flag=est.empty_set,
        diagnostics={"network_xy": (est.x, est.y), "n_candidates": est.n_candidates,
                     "transform": transform.to_dict()},
    )
