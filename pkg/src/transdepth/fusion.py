"""Plane-sweep cost volumes, soft depth regression, injection and confidence fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import DepthPlanes, warp_feature_volume
from .networks import DepthModel


@dataclass
class PipelineOutput:
    depth_single: Tensor
    depth_multi: Tensor
    depth_restored: Tensor
    conf_multi: Tensor
    conf_single: Tensor
    prob_single: Tensor
    prob_multi: Tensor


def depth_regression(prob, planes: DepthPlanes) -> Tensor:
    """Expected plane depth per pixel: ``sum_i d_i * P(i)`` over ``prob[N,h,w]``."""
    prob = dc.as_tensor(prob)
    if prob.shape[0] != planes.count:
        raise ValueError(f"probability volume has {prob.shape[0]} planes, "
                         f"depth planes define {planes.count}")
    return dc.sum(dc.mul(prob, planes.depths[:, None, None]), axis=0)


def build_cost_volume(f_ref, f_src_warped) -> Tensor:
    """Two-view variance ``((f_ref - f_src)/2)^2``, reference features broadcast over planes."""
    f_ref, f_src_warped = dc.as_tensor(f_ref), dc.as_tensor(f_src_warped)
    if f_src_warped.ndim != 4 or f_ref.shape != (f_src_warped.shape[0],) + f_src_warped.shape[2:]:
        raise ValueError(f"reference features {f_ref.shape} do not match warped volume "
                         f"{f_src_warped.shape}")
    ref = dc.reshape(f_ref, (f_ref.shape[0], 1) + f_ref.shape[1:])
    return dc.square(dc.mul(dc.sub(ref, f_src_warped), 0.5))


def refine_depth(d_multi, d_single, c_multi, c_single) -> Tensor:
    """Confidence-weighted fusion ``c_multi * d_multi + c_single * d_single`` (elementwise)."""
    tensors = [dc.as_tensor(t) for t in (d_multi, d_single, c_multi, c_single)]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"refine_depth needs equal shapes, got {[t.shape for t in tensors]}")
    d_multi, d_single, c_multi, c_single = tensors
    return dc.add(dc.mul(c_multi, d_multi), dc.mul(c_single, d_single))


def normalize_raw_depth(raw_depth: np.ndarray, planes: DepthPlanes) -> np.ndarray:
    """Map raw depth to [0, 1] over the plane range; invalid (non-positive) pixels become 0."""
    raw = np.asarray(raw_depth, dtype=np.float64)
    norm = np.clip((raw - planes.d_min) / (planes.d_max - planes.d_min), 0.0, 1.0)
    return np.where(raw > 0, norm, 0.0)


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite values produced by {stage}")
    return t


def forward_pipeline(sample, model: DepthModel, planes: DepthPlanes) -> PipelineOutput:
    """Run the full two-branch network on one sample.

    Branch depths and confidences are computed on the feature grid, upsampled
    bilinearly to the image size, and fused there so the restored depth is a
    per-pixel convex combination of the two branch depths.
    """
    cfg = model.cfg
    if planes.count != cfg.plane_count:
        raise ValueError(f"model expects {cfg.plane_count} planes, got {planes.count}")
    h_img, w_img = sample.gt_depth.shape
    cfg.check_image(h_img, w_img)
    raw = normalize_raw_depth(sample.raw_depth, planes)[None]
    mask = np.asarray(sample.mask, dtype=np.float64)[None]

    prob_single = _finite(model.single_view(sample.rgb_ref, raw, mask), "single_view_net")
    depth_single = depth_regression(prob_single, planes)

    f_ref = _finite(model.spp(sample.rgb_ref), "spp_extractor(reference)")
    f_src = _finite(model.spp(sample.rgb_src), "spp_extractor(source)")
    warped = warp_feature_volume(f_src, sample.rig, planes, cfg.feature_stride)
    cost = _finite(build_cost_volume(f_ref, warped), "build_cost_volume")
    enhanced = _finite(model.injection(cost, prob_single), "injection_net")
    scores = _finite(model.regularizer(enhanced), "cost_regularizer")
    prob_multi = dc.softmax_over_axis(scores, axis=0)
    depth_multi = depth_regression(prob_multi, planes)

    conf_multi, conf_single = model.confidence(f_ref, prob_multi)
    _finite(conf_multi, "confidence_head")

    size = (h_img, w_img)
    lowres = dc.stack([depth_single, depth_multi, conf_multi, conf_single])
    full = dc.resize_bilinear(lowres, size)
    d_single, d_multi, c_multi, c_single = full[0], full[1], full[2], full[3]
    restored = _finite(refine_depth(d_multi, d_single, c_multi, c_single), "refine_depth")
    return PipelineOutput(d_single, d_multi, restored, c_multi, c_single, prob_single, prob_multi)
