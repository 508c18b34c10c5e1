"""Finite-difference gradient suite over every differentiable piece of the package.

Each check builds a scalar probe ``sum(f(inputs) * W)`` with a fixed random
``W`` (so no gradient is trivially symmetric) and compares tape gradients
with central differences at step 1e-4.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .data import SceneSample
from .diffcore.check import GradcheckResult, check_gradients
from .fusion import build_cost_volume, depth_regression, forward_pipeline, refine_depth
from .geometry import (CameraRig, DepthPlanes, Intrinsics, RelativePose, normals_from_depth,
                       warp_coords, warp_feature_volume)
from .networks import DepthModel, NetworkConfig
from .objectives import LossWeights, masked_l1, normal_loss, total_loss

STEP = 1e-4
OP_TOL = 1e-5
PIPELINE_TOL = 1e-4
GROUPS = ("ops", "geometry", "fusion", "objectives", "networks", "end_to_end")


@dataclass
class Check:
    group: str
    name: str
    loss_fn: Callable[[], dc.Tensor]
    tensors: list
    tol: float = OP_TOL
    max_elements: int | None = None
    labels: list | None = None


@dataclass
class CheckOutcome:
    group: str
    result: GradcheckResult
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passed(self.tol)

    def line(self) -> str:
        r = self.result
        status = "PASS" if self.passed else "FAIL"
        skipped = f", {r.skipped} at kinks" if r.skipped else ""
        return (f"{status} {self.group}/{r.name}: max rel err {r.max_rel_error:.2e} "
                f"(tol {self.tol:.0e}) over {r.checked} entries{skipped}, {self.seconds:.2f}s")


class _Inputs:
    """Random leaves and probe weights from one generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def leaf(self, *shape, low=-1.0, high=1.0) -> dc.Tensor:
        return dc.Tensor(self.rng.uniform(low, high, shape), requires_grad=True)

    def probe(self, fn: Callable[[], dc.Tensor]) -> Callable[[], dc.Tensor]:
        """Wrap ``fn`` into ``sum(fn() * W)`` with ``W`` drawn once, on first call."""
        weights = {}

        def loss():
            out = fn()
            if "w" not in weights:
                scale = self.rng.uniform(0.5, 1.5, out.shape)
                weights["w"] = scale * self.rng.choice([-1, 1], out.shape)
            return dc.sum(dc.mul(out, weights["w"]))

        return loss


def _op_checks(x: _Inputs) -> list[Check]:
    checks = []

    def add(name, fn, *tensors, **kw):
        checks.append(Check("ops", name, x.probe(lambda: fn(*tensors)), list(tensors), **kw))

    add("add (broadcast)", dc.add, x.leaf(3, 4), x.leaf(4))
    add("sub (broadcast)", dc.sub, x.leaf(2, 3, 4), x.leaf(3, 1))
    add("mul (broadcast)", dc.mul, x.leaf(3, 4), x.leaf(3, 1))
    add("div", dc.div, x.leaf(3, 4), x.leaf(4, low=0.5, high=2.0))
    add("relu", dc.relu, x.leaf(4, 5))
    add("abs", dc.abs, x.leaf(4, 5))
    add("square", dc.square, x.leaf(3, 4))
    add("sqrt", dc.sqrt, x.leaf(3, 4, low=0.5, high=2.0))
    add("exp", dc.exp, x.leaf(3, 4))
    cond = x.rng.random((3, 4)) > 0.5
    add("where", lambda a, b: dc.where(cond, a, b), x.leaf(3, 4), x.leaf(3, 4))
    add("sum (axis, keepdims)", lambda t: dc.sum(t, axis=1, keepdims=True), x.leaf(2, 3, 4))
    add("mean (axes)", lambda t: dc.mean(t, axis=(0, 2)), x.leaf(2, 3, 4))
    add("reshape", lambda t: dc.reshape(t, (4, 6)), x.leaf(2, 3, 4))
    add("getitem (slices)", lambda t: dc.getitem(t, (slice(1, None), slice(None, None, 2))),
        x.leaf(4, 5))
    add("getitem (repeated index)", lambda t: dc.getitem(t, [0, 2, 2, 3]), x.leaf(4, 5))
    add("concat", lambda a, b: dc.concat([a, b], axis=0), x.leaf(2, 3, 3), x.leaf(1, 3, 3))
    add("stack", lambda a, b: dc.stack([a, b], axis=-1), x.leaf(3, 4), x.leaf(3, 4))
    add("softmax_over_axis", lambda t: dc.softmax_over_axis(t, axis=1),
        x.leaf(3, 4, 2, low=-2, high=2))

    # the 3x3 squared-error case is held to 1e-6
    target = x.rng.uniform(-1, 1, (1, 3, 3))
    xi, w = x.leaf(1, 3, 3), x.leaf(1, 1, 3, 3)
    checks.append(Check("ops", "conv2d (3x3 squared error)",
                        lambda: dc.mean(dc.square(dc.sub(dc.conv2d(xi, w, padding=1), target))),
                        [xi, w], tol=1e-6))
    add("conv2d (stride 2, bias)", lambda t, k, b: dc.conv2d(t, k, stride=2, padding=1, bias=b),
        x.leaf(2, 5, 5), x.leaf(3, 2, 3, 3), x.leaf(3))
    add("conv3d", lambda t, k, b: dc.conv3d(t, k, padding=1, bias=b),
        x.leaf(2, 4, 4, 4), x.leaf(2, 2, 3, 3, 3), x.leaf(2))
    add("maxpool3d", lambda t: dc.maxpool3d(t, 2), x.leaf(2, 4, 4, 4))
    add("avg_pool2d", lambda t: dc.avg_pool2d(t, 2), x.leaf(2, 4, 4))
    add("upsample2d", lambda t: dc.upsample2d(t, 2), x.leaf(2, 3, 3))
    add("upsample3d", lambda t: dc.upsample3d(t, 2), x.leaf(2, 2, 2, 2))
    add("resize_bilinear", lambda t: dc.resize_bilinear(t, (5, 5)), x.leaf(2, 3, 4))
    uv = np.stack([x.rng.uniform(-0.5, 4.5, (3, 3)), x.rng.uniform(-0.5, 3.5, (3, 3))], axis=-1)
    add("bilinear_sample", dc.bilinear_sample, x.leaf(2, 4, 5), dc.Tensor(uv, requires_grad=True))
    return checks


def _tiny_rig(size: int = 5) -> CameraRig:
    k = Intrinsics(fx=0.9 * size, fy=0.9 * size, cx=(size - 1) / 2, cy=(size - 1) / 2,
                   width=size, height=size)
    angle = np.deg2rad(-4.0)
    rot = np.array([[np.cos(angle), 0, np.sin(angle)], [0, 1, 0],
                    [-np.sin(angle), 0, np.cos(angle)]])
    return CameraRig(k, k, RelativePose(rot, np.array([-0.08, 0.01, 0.02])))


def _geometry_checks(x: _Inputs) -> list[Check]:
    rig = _tiny_rig()
    depth = dc.Tensor(np.array(0.9), requires_grad=True)
    feat = x.leaf(2, 5, 5)
    planes = DepthPlanes(0.6, 1.4, 4)
    d = x.leaf(5, 5, low=0.8, high=1.2)
    return [
        Check("geometry", "warp_coords (plane depth)", x.probe(lambda: warp_coords(rig, depth)),
              [depth]),
        Check("geometry", "warp_feature_volume (features)",
              x.probe(lambda: warp_feature_volume(feat, rig, planes, 1)), [feat]),
        Check("geometry", "normals_from_depth",
              x.probe(lambda: normals_from_depth(d, rig.ref_intrinsics)), [d]),
    ]


def _fusion_checks(x: _Inputs) -> list[Check]:
    planes = DepthPlanes(0.3, 1.5, 4)
    prob = x.leaf(4, 3, 3, low=0.0, high=1.0)
    f_ref, warped = x.leaf(2, 3, 3), x.leaf(2, 4, 3, 3)
    dm, ds = x.leaf(3, 3, low=0.3, high=1.5), x.leaf(3, 3, low=0.3, high=1.5)
    cm, cs = x.leaf(3, 3, low=0.0, high=1.0), x.leaf(3, 3, low=0.0, high=1.0)
    return [
        Check("fusion", "depth_regression", x.probe(lambda: depth_regression(prob, planes)),
              [prob]),
        Check("fusion", "build_cost_volume", x.probe(lambda: build_cost_volume(f_ref, warped)),
              [f_ref, warped]),
        Check("fusion", "refine_depth", x.probe(lambda: refine_depth(dm, ds, cm, cs)),
              [dm, ds, cm, cs]),
    ]


def _objective_checks(x: _Inputs) -> list[Check]:
    k = _tiny_rig().ref_intrinsics
    gt = x.rng.uniform(0.5, 1.2, (5, 5))
    mask = (x.rng.random((5, 5)) > 0.4).astype(float)
    mask[2, 2] = 1.0
    pred = dc.Tensor(gt + x.rng.choice([-1, 1], gt.shape) * x.rng.uniform(0.01, 0.1, gt.shape),
                     requires_grad=True)
    pred_n = x.leaf(5, 5, low=0.5, high=1.2)
    return [
        Check("objectives", "masked_l1", lambda: masked_l1(pred, gt, mask), [pred]),
        Check("objectives", "normal_loss", lambda: normal_loss(pred_n, gt, mask, k), [pred_n]),
    ]


# Tiny networks: stride 2 on 16x16 images gives an 8x8 feature grid; N = 4.
TINY_NETWORK = NetworkConfig(base_channels=2, feature_stride=2, feature_channels=2,
                             injection_scales=3, plane_count=4, seed=3)
TINY_IMAGE = 16


def _network_checks(x: _Inputs) -> list[Check]:
    cfg = TINY_NETWORK
    model = DepthModel(cfg)
    s, h, n, c = TINY_IMAGE, TINY_IMAGE // cfg.feature_stride, cfg.plane_count, cfg.feature_channels
    rgb = x.rng.random((3, s, s))
    raw = x.rng.random((1, s, s))
    mask = (x.rng.random((1, s, s)) > 0.5).astype(float)
    cost = x.rng.uniform(0, 1, (c, n, h, h))
    prob = x.rng.dirichlet(np.ones(n), (h, h)).transpose(2, 0, 1)
    feat = x.rng.uniform(-1, 1, (c, h, h))

    def net(name, network, fn):
        return Check("networks", name, x.probe(fn), network.parameters(),
                     labels=[p.name for p in network.parameters()])

    return [
        net("single_view_net", model.single_view, lambda: model.single_view(rgb, raw, mask)),
        net("spp_extractor", model.spp, lambda: model.spp(rgb)),
        net("injection_net", model.injection, lambda: model.injection(cost, prob)),
        net("cost_regularizer", model.regularizer, lambda: model.regularizer(cost)),
        net("confidence_head", model.confidence,
            lambda: dc.stack(list(model.confidence(feat, prob)))),
    ]


def tiny_sample(rng: np.random.Generator, size: int = TINY_IMAGE) -> SceneSample:
    """Random (not rendered) two-view sample with a plausible rig."""
    rig = _tiny_rig(size)
    gt = rng.uniform(0.5, 1.3, (size, size))
    mask = (rng.random((size, size)) > 0.5).astype(float)
    raw = np.where(rng.random((size, size)) < 0.2, 0.0, gt + rng.normal(0, 0.02, gt.shape))
    return SceneSample(rng.random((3, size, size)), rng.random((3, size, size)), raw, gt, mask,
                       rig, "tiny")


def _end_to_end_checks(x: _Inputs) -> list[Check]:
    model = DepthModel(TINY_NETWORK)
    planes = DepthPlanes(0.3, 1.5, TINY_NETWORK.plane_count)
    sample = tiny_sample(x.rng)
    weights = LossWeights()

    def loss():
        out = forward_pipeline(sample, model, planes)
        return total_loss(out, sample.gt_depth, sample.mask, weights,
                          sample.rig.ref_intrinsics).total

    # ten parameter tensors, two from each network, one random entry each
    chosen = []
    for network in model.networks.values():
        params = network.parameters()
        for i in x.rng.choice(len(params), size=2, replace=False):
            chosen.append(params[i])
    return [Check("end_to_end", "total_loss (10 random parameters)", loss, chosen,
                  tol=PIPELINE_TOL, max_elements=1, labels=[p.name for p in chosen])]


_BUILDERS = {
    "ops": _op_checks,
    "geometry": _geometry_checks,
    "fusion": _fusion_checks,
    "objectives": _objective_checks,
    "networks": _network_checks,
    "end_to_end": _end_to_end_checks,
}


def build_checks(groups=GROUPS, seed: int = 0) -> list[Check]:
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown gradcheck groups {sorted(unknown)}; choose from {GROUPS}")
    out = []
    for g in groups:
        out.extend(_BUILDERS[g](_Inputs(np.random.default_rng([seed, GROUPS.index(g)]))))
    return out


def run_suite(groups=GROUPS, seed: int = 0, report: Callable[[str], None] | None = None
              ) -> list[CheckOutcome]:
    """Run every check in ``groups``; ``report`` receives one line per check."""
    outcomes = []
    for chk in build_checks(groups, seed):
        start = time.perf_counter()
        result = check_gradients(chk.loss_fn, chk.tensors, name=chk.name, step=STEP,
                                 max_elements=chk.max_elements, labels=chk.labels,
                                 rng=np.random.default_rng(seed))
        outcome = CheckOutcome(chk.group, result, chk.tol, time.perf_counter() - start)
        outcomes.append(outcome)
        if report is not None:
            report(outcome.line())
    return outcomes
