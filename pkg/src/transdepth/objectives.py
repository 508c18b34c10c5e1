"""Masked training objective and the masked evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import Intrinsics, normals_from_depth


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.8     # multi-view depth
    lambda2: float = 0.5     # single-view depth
    lambda3: float = 0.0005  # single-view normals

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class LossTerms:
    total: Tensor
    restored: float
    multi: float
    single: float
    normal: float


def _mask_array(mask) -> np.ndarray:
    m = np.asarray(dc.as_tensor(mask).data) > 0
    if not m.any():
        raise ValueError("empty mask")
    return m


def masked_l1(pred, gt, mask) -> Tensor:
    """Mean absolute error over pixels where ``mask`` is positive."""
    m = _mask_array(mask)
    pred = dc.as_tensor(pred)
    gt = np.asarray(dc.as_tensor(gt).data)
    if pred.shape != gt.shape or pred.shape != m.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    weights = m / m.sum()
    return dc.sum(dc.mul(dc.abs(dc.sub(pred, gt)), weights))


def normal_loss(pred_depth, gt_depth, mask, intrinsics: Intrinsics) -> Tensor:
    """Mean over masked pixels of the L1 distance between predicted and true normals."""
    m = _mask_array(mask)
    n_pred = normals_from_depth(pred_depth, intrinsics)
    n_gt = normals_from_depth(np.asarray(dc.as_tensor(gt_depth).data), intrinsics).data
    per_pixel = dc.sum(dc.abs(dc.sub(n_pred, n_gt)), axis=0)
    return dc.sum(dc.mul(per_pixel, m / m.sum()))


def total_loss(out, gt, mask, weights: LossWeights, intrinsics: Intrinsics) -> LossTerms:
    """Restored + weighted multi, single and single-view normal terms, all inside the mask."""
    restored = masked_l1(out.depth_restored, gt, mask)
    multi = masked_l1(out.depth_multi, gt, mask)
    single = masked_l1(out.depth_single, gt, mask)
    normal = normal_loss(out.depth_single, gt, mask, intrinsics)
    total = dc.add(dc.add(restored, dc.mul(multi, weights.lambda1)),
                   dc.add(dc.mul(single, weights.lambda2), dc.mul(normal, weights.lambda3)))
    return LossTerms(total, restored.item(), multi.item(), single.item(), normal.item())


# --------------------------------------------------------------------------
# evaluation

THRESHOLDS = (1.05, 1.10, 1.25)


@dataclass
class MetricReport:
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float
    pixels: int = 0
    excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate(pred, gt, mask) -> MetricReport:
    """RMSE, REL, MAE (meters) and threshold accuracies (percent) inside the mask.

    Masked pixels with non-positive ground truth are skipped and counted in
    ``excluded``.
    """
    pred = np.asarray(dc.as_tensor(pred).data, dtype=np.float64)
    gt = np.asarray(dc.as_tensor(gt).data, dtype=np.float64)
    m = _mask_array(mask)
    if pred.shape != gt.shape or gt.shape != m.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    valid = m & (gt > 0)
    excluded = int(m.sum() - valid.sum())
    if not valid.any():
        raise ValueError("empty mask after excluding non-positive ground truth")
    p, g = pred[valid], gt[valid]
    err = p - g
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    deltas = [100.0 * float(np.mean(ratio < t)) for t in THRESHOLDS]
    return MetricReport(rmse=float(np.sqrt(np.mean(err ** 2))),
                        rel=float(np.mean(np.abs(err) / g)),
                        mae=float(np.mean(np.abs(err))),
                        delta_105=deltas[0], delta_110=deltas[1], delta_125=deltas[2],
                        pixels=int(valid.sum()), excluded=excluded)


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Pixel-count-weighted mean of per-sample reports (RMSE included)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    w = np.array([r.pixels for r in reports], dtype=np.float64)
    w = w / w.sum()
    keys = ("rmse", "rel", "mae", "delta_105", "delta_110", "delta_125")
    vals = {k: float(sum(wi * getattr(r, k) for wi, r in zip(w, reports))) for k in keys}
    return MetricReport(**vals, pixels=int(sum(r.pixels for r in reports)),
                        excluded=int(sum(r.excluded for r in reports)))
