"""Pinhole cameras, plane-sweep warping between two views, and normals from depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# Written for reference pixels whose plane point falls behind the source camera.
OUT_OF_VIEW = -1.0e6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "Intrinsics":
        """Intrinsics of the grid obtained by downsampling the image by ``stride``."""
        if self.width % stride or self.height % stride:
            raise ValueError(f"image {self.width}x{self.height} not divisible by stride {stride}")
        return Intrinsics(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
                          self.width // stride, self.height // stride)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel ``((u - cx)/fx, (v - cy)/fy)``, each of shape (height, width)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        return (np.broadcast_to((u - self.cx) / self.fx, (self.height, self.width)),
                np.broadcast_to(((v - self.cy) / self.fy)[:, None], (self.height, self.width)))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class RelativePose:
    """Maps reference-camera coordinates into source-camera coordinates: ``R @ X + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    tol: float = 1e-10

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        ortho = np.abs(r.T @ r - np.eye(3)).max()
        det = np.linalg.det(r)
        if ortho > self.tol or abs(det - 1.0) > self.tol:
            raise ValueError(f"rotation is not a proper rotation "
                             f"(|R^T R - I| = {ortho:.2e}, det = {det:.12f})")

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points with trailing dimension 3."""
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}


@dataclass(frozen=True)
class CameraRig:
    ref_intrinsics: Intrinsics
    src_intrinsics: Intrinsics
    ref_to_src: RelativePose

    def is_identity(self) -> bool:
        """True when every reference pixel maps onto itself at any depth."""
        return (self.ref_intrinsics == self.src_intrinsics
                and np.array_equal(self.ref_to_src.rotation, np.eye(3))
                and not self.ref_to_src.translation.any())

    def scaled(self, stride: int) -> "CameraRig":
        return CameraRig(self.ref_intrinsics.scaled(stride), self.src_intrinsics.scaled(stride),
                         self.ref_to_src)

    @classmethod
    def identity(cls, intrinsics: Intrinsics) -> "CameraRig":
        return cls(intrinsics, intrinsics, RelativePose.identity())


@dataclass(frozen=True)
class DepthPlanes:
    """``count`` fronto-parallel hypothesis depths equally spaced over [d_min, d_max]."""

    d_min: float
    d_max: float
    count: int

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.count < 2:
            raise ValueError(f"need at least 2 planes, got {self.count}")

    @property
    def spacing(self) -> float:
        return (self.d_max - self.d_min) / (self.count - 1)

    @property
    def depths(self) -> np.ndarray:
        return self.d_min + np.arange(self.count) * self.spacing


def project(points: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    """Perspective projection of camera-frame points ``[..., 3]`` to pixels ``[..., 2]``."""
    z = points[..., 2]
    return np.stack([intrinsics.fx * points[..., 0] / z + intrinsics.cx,
                     intrinsics.fy * points[..., 1] / z + intrinsics.cy], axis=-1)


def backproject(u, v, depth, intrinsics: Intrinsics) -> np.ndarray:
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float),
                                      np.asarray(depth, float))
    return np.stack([(u - intrinsics.cx) / intrinsics.fx * depth,
                     (v - intrinsics.cy) / intrinsics.fy * depth, depth], axis=-1)


def warp_coords(rig: CameraRig, plane_depth) -> Tensor:
    """Source-view pixel positions ``[H, W, 2]`` of every reference pixel lifted to ``plane_depth``.

    ``plane_depth`` may be a float or a scalar Tensor (the result is then
    differentiable in it). The grid is the reference image grid of ``rig``.
    """
    depth_value = float(np.asarray(dc.as_tensor(plane_depth).data).reshape(-1)[0])
    if not depth_value > 0:
        raise ValueError(f"plane depth must be positive, got {depth_value}")
    ref, src = rig.ref_intrinsics, rig.src_intrinsics
    if rig.is_identity():
        u, v = np.meshgrid(np.arange(ref.width, dtype=float), np.arange(ref.height, dtype=float))
        return dc.Tensor(np.stack([u, v], axis=-1))
    rx, ry = ref.rays()
    rays = np.stack([rx, ry, np.ones_like(rx)])  # 3,H,W
    rot = rig.ref_to_src.rotation
    t = rig.ref_to_src.translation
    direction = np.einsum("ij,jhw->ihw", rot, rays)
    # X' = d * (R ray) + t, kept in diffcore so the depth can be tracked.
    xs = [dc.add(dc.mul(plane_depth, direction[i]), t[i]) for i in range(3)]
    z_src = depth_value * direction[2] + t[2]
    in_front = z_src > 0
    safe_z = dc.where(in_front, xs[2], 1.0)
    u = dc.add(dc.mul(dc.div(xs[0], safe_z), src.fx), src.cx)
    v = dc.add(dc.mul(dc.div(xs[1], safe_z), src.fy), src.cy)
    u = dc.where(in_front, u, OUT_OF_VIEW)
    v = dc.where(in_front, v, OUT_OF_VIEW)
    return dc.stack([u, v], axis=-1)


def warp_feature_volume(src_features, rig: CameraRig, planes: DepthPlanes,
                        feature_stride: int) -> Tensor:
    """Sweep source features over every hypothesis plane: ``[C,h,w] -> [C,N,h,w]``.

    ``rig`` describes the full-resolution images; its intrinsics are divided
    by ``feature_stride`` to address the feature grid.
    """
    src_features = dc.as_tensor(src_features)
    grid_rig = rig.scaled(feature_stride)
    c, h, w = src_features.shape
    if (h, w) != (grid_rig.ref_intrinsics.height, grid_rig.ref_intrinsics.width):
        raise ValueError(f"features {src_features.shape} do not match the stride-{feature_stride} "
                         f"grid {grid_rig.ref_intrinsics.height}x{grid_rig.ref_intrinsics.width}")
    coords = np.concatenate([warp_coords(grid_rig, d).data for d in planes.depths], axis=0)
    sampled = dc.bilinear_sample(src_features, coords)  # C, N*h, w
    return dc.reshape(sampled, (c, planes.count, h, w))


def normals_from_depth(depth, intrinsics: Intrinsics) -> Tensor:
    """Unit surface normals ``[3,H,W]`` from forward differences of back-projected points.

    Normals are oriented to face the camera (z <= 0). The last row and
    column reuse the difference of their inward neighbour. Pixels whose two
    tangents are parallel get ``(0, 0, -1)`` and no gradient.
    """
    depth = dc.as_tensor(depth)
    rx, ry = intrinsics.rays()
    if depth.shape != rx.shape:
        raise ValueError(f"depth {depth.shape} does not match intrinsics "
                         f"{intrinsics.height}x{intrinsics.width}")
    points = [dc.mul(depth, rx), dc.mul(depth, ry), depth]

    def along_u(p):
        d = dc.sub(p[:, 1:], p[:, :-1])
        return dc.concat([d, d[:, -1:]], axis=1)

    def along_v(p):
        d = dc.sub(p[1:, :], p[:-1, :])
        return dc.concat([d, d[-1:, :]], axis=0)

    du = [along_u(p) for p in points]
    dv = [along_v(p) for p in points]
    # n = dv x du faces the camera on smooth surfaces; rough depth can fold it
    # away, so flip where z > 0
    n = [dc.sub(dc.mul(dv[1], du[2]), dc.mul(dv[2], du[1])),
         dc.sub(dc.mul(dv[2], du[0]), dc.mul(dv[0], du[2])),
         dc.sub(dc.mul(dv[0], du[1]), dc.mul(dv[1], du[0]))]
    sign = np.where(n[2].data > 0, -1.0, 1.0)
    n = [dc.mul(c, sign) for c in n]
    sq = dc.add(dc.add(dc.square(n[0]), dc.square(n[1])), dc.square(n[2]))
    degenerate = sq.data <= 1e-30
    norm = dc.sqrt(dc.where(degenerate, 1.0, sq))
    fallback = (0.0, 0.0, -1.0)
    return dc.stack([dc.where(degenerate, fallback[i], dc.div(n[i], norm)) for i in range(3)])
