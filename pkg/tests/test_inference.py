import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from bilateral_vit.inference import (
    PredictionError,
    extract_fovea,
    predict,
    read_predictions,
    scores_to_probmap,
    write_predictions,
)
from bilateral_vit.types import FundusSample, NetworkConfig, Variant


class HotPixelModel(nn.Module):
    """Scores every pixel low except one, regardless of input."""

    def __init__(self, size, xy, variant=Variant.VIT_PLAIN):
        super().__init__()
        self.config = NetworkConfig.toy(variant, input_size=size)
        self.xy = xy

    def forward(self, image, vessel=None):
        out = torch.full((image.shape[0], 1) + image.shape[2:], -10.0)
        out[:, :, self.xy[1], self.xy[0]] = 10.0
        return out


class TestExtract:
    def test_single_pixel(self):
        p = np.zeros((8, 8))
        p[2, 5] = 0.9
        est = extract_fovea(p)
        assert (est.x, est.y, est.empty_set) == (5.0, 2.0, False)

    def test_median_of_even_set(self):
        p = np.zeros((10, 10))
        p[1, 1] = p[7, 3] = 0.8
        est = extract_fovea(p)
        assert (est.x, est.y) == (2.0, 4.0)
        assert est.n_candidates == 2

    def test_threshold_is_strict(self):
        p = np.full((4, 4), 0.5)
        p[3, 0] = 0.6
        est = extract_fovea(p)
        assert est.n_candidates == 1

    def test_empty_falls_back_to_argmax(self):
        p = np.full((6, 6), 0.1)
        p[4, 1] = 0.3
        est = extract_fovea(p)
        assert est.empty_set and (est.x, est.y) == (1.0, 4.0)
        assert est.confidence == pytest.approx(0.3)

    def test_sigmoid(self):
        pm = scores_to_probmap(torch.zeros(1, 1, 3, 3))
        assert pm.scores.shape == (3, 3)
        assert np.allclose(pm.scores, 0.5)


class TestPredict:
    def test_maps_back_to_original(self):
        img = np.full((256, 256, 3), 120, np.uint8)
        s = FundusSample(id="a", image=img, fovea_xy=(0, 0), disc_radius_R=10)
        pred = predict(HotPixelModel(512, (256, 256)), s)
        assert pred.xy == pytest.approx((128.0, 128.0))
        assert not pred.empty_set_flag

    def test_crop_and_pad_are_inverted(self):
        img = np.zeros((100, 140, 3), np.uint8)
        img[10:90, 20:100] = 100  # an 80x80 foreground block at x 20..99, y 10..89
        s = FundusSample(id="b", image=img, fovea_xy=(0, 0), disc_radius_R=10)
        pred = predict(HotPixelModel(64, (32, 16)), s)
        # scale 64/80, no padding: network (32, 16) -> crop (40, 20) -> original (60, 30)
        assert pred.xy == pytest.approx((60.0, 30.0))

    def test_missing_vessel_source_names_sample(self):
        s = FundusSample(id="needs-vessel", image=np.full((64, 64, 3), 90, np.uint8), fovea_xy=(1, 1),
                         disc_radius_R=5)
        with pytest.raises(PredictionError, match="needs-vessel"):
            predict(HotPixelModel(64, (1, 1), Variant.VIT_VB_MFF), s)

    def test_jsonl_round_trip(self, tmp_path):
        s = FundusSample(id="c", image=np.full((64, 64, 3), 90, np.uint8), fovea_xy=(1, 1), disc_radius_R=5)
        pred = predict(HotPixelModel(64, (10, 20)), s)
        write_predictions([pred], tmp_path / "p.jsonl")
        back = read_predictions(tmp_path / "p.jsonl")["c"]
        assert back.xy == pred.xy and back.empty_set_flag == pred.empty_set_flag


class TestSpecExamples:
    def test_sigmoid_formula(self, rng):
        x = rng.normal(0, 5, (6, 6))
        assert np.allclose(scores_to_probmap(x).scores, 1 / (1 + np.exp(-x)), atol=1e-7)

    def test_saturated(self):
        s = scores_to_probmap(np.array([[-1e4, 0.0]])).scores
        assert s[0, 0] <= np.finfo(np.float32).eps and s[0, 1] == 0.5

    def test_three_candidates(self):
        p = np.zeros((5, 5))
        for x, y in [(1, 1), (1, 3), (3, 1)]:
            p[y, x] = 0.9
        est = extract_fovea(p)
        assert (est.x, est.y) == (1.0, 1.0)

    def test_hot_pixel_far(self):
        p = np.zeros((256, 256))
        p[200, 100] = 0.99
        assert (extract_fovea(p).x, extract_fovea(p).y) == (100.0, 200.0)

    def test_fallback_example(self):
        p = np.full((12, 12), 0.2)
        p[9, 7] = 0.4
        est = extract_fovea(p)
        assert (est.x, est.y, est.empty_set) == (7.0, 9.0, True)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_within_bounds(self, seed):
        p = np.random.default_rng(seed).random((17, 23))
        est = extract_fovea(p)
        assert 0 <= est.x <= 22 and 0 <= est.y <= 16

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_flip_equivariance(self, seed):
        p = np.random.default_rng(seed).random((16, 20))
        a, b = extract_fovea(p), extract_fovea(p[:, ::-1])
        assert b.x == pytest.approx(19 - a.x) and b.y == a.y

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_corner_outliers_move_median_one_order_statistic(self, seed):
        rng = np.random.default_rng(seed)
        p = np.zeros((40, 40))
        pts = rng.integers(10, 30, (30, 2))
        p[pts[:, 1], pts[:, 0]] = 0.9
        base = extract_fovea(p)
        xs = np.sort(np.nonzero(p > 0.5)[1])
        k = max(1, len(xs) // 10)
        p2 = p.copy()
        p2[0, :k] = 0.9  # outliers in the top-left corner row
        moved = extract_fovea(p2)
        # k low outliers shift the median down by at most k/2 order statistics.
        lo = xs[max(0, (len(xs) - 1) // 2 - k)]
        assert lo <= moved.x <= base.x

    def test_predict_deterministic(self):
        s = FundusSample(id="d", image=np.full((64, 64, 3), 90, np.uint8), fovea_xy=(1, 1), disc_radius_R=5)
        from bilateral_vit.network import build_model

        model = build_model(NetworkConfig.toy(Variant.VIT_PLAIN), seed=0)
        assert predict(model, s).xy == predict(model, s).xy
