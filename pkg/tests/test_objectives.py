import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transdepth import diffcore as dc
from transdepth import objectives
from transdepth.geometry import Intrinsics
from transdepth.objectives import (LossWeights, MetricReport, aggregate, evaluate, masked_l1,
                                   normal_loss, total_loss)

K = Intrinsics(40, 40, 11.5, 11.5, 24, 24)


def scalar_metrics(pred, gt, mask):
    """Pixel-by-pixel reference with plain float arithmetic."""
    n = sq = rel = ab = 0.0
    hits = [0, 0, 0]
    excluded = 0
    for p, g, m in zip(pred.ravel().tolist(), gt.ravel().tolist(), mask.ravel().tolist()):
        if m <= 0:
            continue
        if g <= 0:
            excluded += 1
            continue
        n += 1
        e = p - g
        sq += e * e
        ab += abs(e)
        rel += abs(e) / g
        ratio = max(p / g, g / p) if p > 0 else math.inf
        for k, t in enumerate((1.05, 1.10, 1.25)):
            hits[k] += ratio < t
    return dict(rmse=math.sqrt(sq / n), rel=rel / n, mae=ab / n, delta_105=100 * hits[0] / n,
                delta_110=100 * hits[1] / n, delta_125=100 * hits[2] / n, pixels=int(n),
                excluded=excluded)


def fake_output(**depths):
    return SimpleNamespace(**depths)


class TestMaskedL1:
    def test_exact(self, rng):
        gt = rng.uniform(0.5, 1.0, (4, 4))
        assert masked_l1(gt, gt, np.ones((4, 4))).item() == 0.0

    def test_constant_offset(self, rng):
        gt = rng.uniform(0.5, 1.0, (4, 4))
        mask = rng.random((4, 4)) > 0.4
        assert masked_l1(gt + 0.1, gt, mask).item() == pytest.approx(0.1, abs=1e-12)

    def test_two_pixels(self):
        gt = np.ones((2, 2))
        pred = np.array([[1.1, 5.0], [5.0, 0.7]])
        mask = np.eye(2)
        assert masked_l1(pred, gt, mask).item() == pytest.approx(0.2, abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty mask"):
            masked_l1(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_l1(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)))


class TestNormalLoss:
    def test_exact(self, rng):
        gt = rng.uniform(0.5, 1.0, (24, 24))
        assert normal_loss(gt, gt, np.ones((24, 24)), K).item() == 0.0

    def test_offset_invariant_on_planes(self):
        gt = np.full((24, 24), 0.9)
        assert normal_loss(gt + 0.25, gt, np.ones((24, 24)), K).item() < 1e-10

    def test_tilted_against_fronto_parallel(self):
        # plane z = 1 + x has unit normal (1, 0, -1)/sqrt(2); its L1 distance to (0, 0, -1)
        # is 1/sqrt(2) + (1 - 1/sqrt(2)) = 1
        rx, _ = K.rays()
        tilted = 1.0 / (1.0 - rx)
        mask = np.zeros((24, 24))
        mask[:-1, :-1] = 1  # the replicated last row and column carry no slope
        expected = abs(1 / math.sqrt(2)) + abs(-1 / math.sqrt(2) + 1)
        loss = normal_loss(tilted, np.ones((24, 24)), mask, K).item()
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty mask"):
            normal_loss(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4)), K)


class TestTotalLoss:
    def test_perfect_prediction(self, rng):
        gt = rng.uniform(0.5, 1.0, (24, 24))
        out = fake_output(depth_restored=gt, depth_multi=gt, depth_single=gt)
        assert total_loss(out, gt, np.ones((24, 24)), LossWeights(), K).total.item() == 0.0

    def test_weighted_sum(self, monkeypatch):
        values = {"restored": 0.1, "multi": 0.2, "single": 0.2}
        monkeypatch.setattr(objectives, "masked_l1", lambda pred, gt, mask: dc.Tensor(values[pred]))
        monkeypatch.setattr(objectives, "normal_loss", lambda *a: dc.Tensor(1.0))
        out = fake_output(depth_restored="restored", depth_multi="multi", depth_single="single")
        terms = total_loss(out, None, None, LossWeights(), K)
        assert terms.total.item() == pytest.approx(0.3605, abs=1e-12)

    def test_zero_weights_leave_restored(self, rng):
        gt = rng.uniform(0.5, 1.0, (24, 24))
        mask = rng.random((24, 24)) > 0.5
        out = fake_output(depth_restored=gt + 0.05, depth_multi=gt - 0.3, depth_single=gt * 2)
        total = total_loss(out, gt, mask, LossWeights(0, 0, 0), K).total.item()
        assert total == pytest.approx(masked_l1(gt + 0.05, gt, mask).item(), abs=1e-15)

    def test_unmasked_pixels_are_ignored(self, rng):
        gt = rng.uniform(0.5, 1.0, (24, 24))
        mask = np.zeros((24, 24))
        mask[6:14, 6:14] = 1
        preds = {k: gt + rng.normal(0, 0.05, gt.shape) for k in ("r", "m", "s")}
        base = total_loss(fake_output(depth_restored=preds["r"], depth_multi=preds["m"],
                                      depth_single=preds["s"]), gt, mask, LossWeights(), K)
        # normals look one pixel ahead, so leave a one-pixel ring around the mask untouched
        far = np.ones((24, 24), dtype=bool)
        far[5:15, 5:15] = False
        noisy = {k: np.where(far, v + rng.normal(0, 0.3, gt.shape), v) for k, v in preds.items()}
        moved = total_loss(fake_output(depth_restored=noisy["r"], depth_multi=noisy["m"],
                                       depth_single=noisy["s"]), gt, mask, LossWeights(), K)
        for key in ("restored", "multi", "single", "normal"):
            assert getattr(moved, key) == getattr(base, key)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)


class TestEvaluate:
    def test_perfect(self, rng):
        gt = rng.uniform(0.5, 1.0, (5, 5))
        r = evaluate(gt, gt, np.ones((5, 5)))
        assert (r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125) == (0, 0, 0, 100, 100, 100)

    def test_uniform_ratio(self, rng):
        gt = rng.uniform(0.5, 1.0, (5, 5))
        r = evaluate(1.2 * gt, gt, np.ones((5, 5)))
        assert (r.delta_105, r.delta_110, r.delta_125) == (0, 0, 100)
        assert r.rel == pytest.approx(0.2, abs=1e-12)

    def test_two_pixels(self):
        r = evaluate(np.array([[1.04, 1.30]]), np.ones((1, 2)), np.ones((1, 2)))
        assert r.mae == pytest.approx(0.17, abs=1e-12)
        assert r.rmse == pytest.approx(math.sqrt((0.04 ** 2 + 0.30 ** 2) / 2), abs=1e-12)
        assert r.rmse == pytest.approx(0.21401, abs=1e-5)  # sqrt(0.0458)
        assert (r.delta_105, r.delta_110, r.delta_125) == (50, 50, 50)

    def test_symmetric_ratio(self):
        # 0.8 / 1.0 under-estimates by the same ratio 1.25 that 1.25 / 1.0 over-estimates
        r = evaluate(np.array([[0.8, 1.22]]), np.ones((1, 2)), np.ones((1, 2)))
        assert r.delta_125 == 50

    def test_excluded_pixels_are_tallied(self):
        gt = np.array([[1.0, 0.0, -2.0, 1.0]])
        r = evaluate(np.ones((1, 4)), gt, np.array([[1, 1, 1, 0]]))
        assert (r.pixels, r.excluded, r.mae) == (1, 2, 0.0)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty mask"):
            evaluate(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            evaluate(np.ones((1, 2)), np.zeros((1, 2)), np.ones((1, 2)))

    @given(st.integers(0, 100_000))
    def test_matches_scalar_oracle(self, seed):
        r = np.random.default_rng(seed)
        gt = r.uniform(0.2, 2.0, (9, 11))
        gt[r.random(gt.shape) < 0.05] = 0.0
        pred = gt * r.uniform(0.7, 1.4, gt.shape)
        pred[r.random(gt.shape) < 0.05] = 0.0
        mask = r.random(gt.shape) < 0.7
        mask[0, 0], gt[0, 0] = True, 1.0
        report = evaluate(pred, gt, mask).to_dict()
        oracle = scalar_metrics(pred, gt, mask)
        for k, v in oracle.items():
            assert report[k] == pytest.approx(v, abs=1e-9), k

    @given(st.integers(0, 100_000))
    def test_invariants(self, seed):
        r = np.random.default_rng(seed)
        gt = r.uniform(0.2, 2.0, (6, 6))
        rep = evaluate(gt * r.uniform(0.6, 1.5, gt.shape), gt, np.ones((6, 6)))
        assert rep.rmse >= rep.mae >= 0
        assert 0 <= rep.delta_105 <= rep.delta_110 <= rep.delta_125 <= 100


class TestAggregate:
    def test_pixel_weighted(self, rng):
        reports = []
        for n in (3, 10, 40):
            gt = rng.uniform(0.5, 1.0, (1, n))
            reports.append(evaluate(gt * rng.uniform(0.8, 1.2, gt.shape), gt, np.ones((1, n))))
        agg = aggregate(reports)
        w = np.array([3, 10, 40]) / 53
        for key in ("rmse", "rel", "mae", "delta_105", "delta_110", "delta_125"):
            expected = sum(wi * getattr(r, key) for wi, r in zip(w, reports))
            assert abs(getattr(agg, key) - expected) <= 1e-9
        assert agg.pixels == 53

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_json_keys(self):
        rep = MetricReport(0.1, 0.2, 0.05, 50.0, 60.0, 70.0, pixels=4, excluded=1)
        d = json.loads(json.dumps(rep.to_dict()))
        assert set(d) == {"rmse", "rel", "mae", "delta_105", "delta_110", "delta_125",
                          "pixels", "excluded"}
        assert MetricReport.from_dict(d) == rep
