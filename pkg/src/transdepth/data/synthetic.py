"""Analytic ray-cast scenes with transparent objects, and the raw-depth corruption model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import CameraRig, Intrinsics, RelativePose

ALPHA = 0.35  # opacity of a transparent surface over what lies behind it
LIGHT = np.array([-0.4, -0.6, -1.0]) / np.linalg.norm([-0.4, -0.6, -1.0])  # towards the light
AMBIENT = 0.35
EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    """Plane, sphere or oriented box in reference-camera coordinates (meters).

    ``center`` is a point on the plane for planes. ``size`` is the radius of
    a sphere or the half extents of a box; ``normal`` is used by planes and
    ``rotation`` (box-to-reference, row-major 3x3) by boxes. The albedo is a
    checkerboard of ``colors`` with cells of ``checker`` meters.
    """

    shape: str
    center: tuple
    size: tuple = (0.1,)
    normal: tuple = (0.0, 0.0, -1.0)
    rotation: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    colors: tuple = ((0.9, 0.9, 0.9), (0.2, 0.2, 0.2))
    checker: float = 0.05
    transparent: bool = False

    def __post_init__(self):
        if self.shape not in ("plane", "sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        d = dict(d)
        for key in ("center", "size", "normal", "rotation"):
            if key in d:
                d[key] = tuple(float(x) for x in np.ravel(d[key]))
        if "colors" in d:
            d["colors"] = tuple(tuple(float(x) for x in c) for c in d["colors"])
        return cls(**d)


@dataclass(frozen=True)
class CorruptionSpec:
    hole_fraction: float = 0.3
    background_bleed_fraction: float = 0.3
    noise_sigma: float = 0.003

    def __post_init__(self):
        for name in ("hole_fraction", "background_bleed_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.hole_fraction + self.background_bleed_fraction > 1.0 + 1e-12:
            raise ValueError("hole_fraction + background_bleed_fraction exceeds 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    rig: CameraRig
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    seed: int = 0

    def __post_init__(self):
        if not any(p.transparent for p in self.primitives):
            raise ValueError("scene needs at least one transparent primitive")
        if all(p.transparent for p in self.primitives):
            raise ValueError("scene needs an opaque background surface")


@dataclass
class Rendering:
    rgb: np.ndarray               # 3,H,W in [0,1]
    depth: np.ndarray             # H,W camera-frame z of the first hit
    mask: np.ndarray              # H,W, 1 where the first hit is transparent
    background_depth: np.ndarray  # H,W z of the nearest opaque surface

    def __iter__(self):
        return iter((self.rgb, self.depth, self.mask))


# --------------------------------------------------------------------------
# intersections; every function returns ray parameter t (inf on miss) and unit normals


def intersect_plane(origin, dirs, point, normal):
    n = np.asarray(normal, float) / np.linalg.norm(normal)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((np.asarray(point, float) - origin) @ n) / denom
    t = np.where((np.abs(denom) > 1e-15) & (t > EPS), t, np.inf)
    return t, np.broadcast_to(n, dirs.shape)


def intersect_sphere(origin, dirs, center, radius):
    oc = origin - np.asarray(center, float)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius ** 2
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - root) / (2 * a)
    t2 = (-b + root) / (2 * a)
    t = np.where(t1 > EPS, t1, np.where(t2 > EPS, t2, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    hit = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    return t, (hit - np.asarray(center, float)) / radius


def intersect_box(origin, dirs, center, half_extents, rotation):
    rot = np.asarray(rotation, float).reshape(3, 3)
    h = np.asarray(half_extents, float)
    o = (origin - np.asarray(center, float)) @ rot
    d = dirs @ rot
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    t1 = (-h - o) / d
    t2 = (h - o) / d
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    t_enter = tnear.max(axis=1)
    t_exit = tfar.min(axis=1)
    t = np.where((t_exit >= t_enter) & (t_enter > EPS), t_enter, np.inf)
    axis = tnear.argmax(axis=1)
    local = np.zeros_like(d)
    rows = np.arange(len(d))
    local[rows, axis] = -np.sign(d[rows, axis])
    return t, local @ rot.T


def _intersect(prim: Primitive, origin, dirs):
    if prim.shape == "plane":
        return intersect_plane(origin, dirs, prim.center, prim.normal)
    if prim.shape == "sphere":
        return intersect_sphere(origin, dirs, prim.center, prim.size[0])
    return intersect_box(origin, dirs, prim.center, prim.size, prim.rotation)


def _albedo(prim: Primitive, points: np.ndarray) -> np.ndarray:
    rel = points - np.asarray(prim.center, float)
    s = prim.checker
    if prim.shape == "plane":
        n = np.asarray(prim.normal, float) / np.linalg.norm(prim.normal)
        e1 = np.cross(n, [0.0, 1.0, 0.0] if abs(n[1]) < 0.9 else [1.0, 0.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        cells = np.floor(rel @ e1 / s) + np.floor(rel @ e2 / s)
    elif prim.shape == "sphere":
        r = prim.size[0]
        lat = np.arcsin(np.clip(rel[:, 1] / r, -1, 1))
        lon = np.arctan2(rel[:, 0], -rel[:, 2])
        cells = np.floor(lat * r / s) + np.floor(lon * r / s)
    else:
        local = rel @ np.asarray(prim.rotation, float).reshape(3, 3)
        cells = np.floor(local / s + 0.25).sum(axis=1)
    colors = np.asarray(prim.colors, float)
    return colors[(cells.astype(np.int64) % 2)]


def _view_rays(rig: CameraRig, view: str, u: np.ndarray, v: np.ndarray):
    """Ray origin and directions in reference coordinates; direction z in the view frame is 1."""
    if view == "ref":
        k = rig.ref_intrinsics
        rot_view_to_ref, origin = np.eye(3), np.zeros(3)
    elif view == "src":
        k = rig.src_intrinsics
        rot_view_to_ref = rig.ref_to_src.rotation.T
        origin = -rot_view_to_ref @ rig.ref_to_src.translation
    else:
        raise ValueError(f"view must be 'ref' or 'src', got {view!r}")
    local = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return origin, local.reshape(-1, 3) @ rot_view_to_ref.T


def cast_rays(spec: SceneSpec, view: str, u, v):
    """Closest-hit view-frame depth at (possibly fractional) pixel positions."""
    u, v = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float))
    origin, dirs = _view_rays(spec.rig, view, u, v)
    ts = np.stack([_intersect(p, origin, dirs)[0] for p in spec.primitives])
    return ts.min(axis=0).reshape(u.shape)


def render_scene(spec: SceneSpec, view: str = "ref") -> Rendering:
    """Ray-cast one view of ``spec``.

    Opaque surfaces get Lambertian-shaded checkerboard albedo. Each
    transparent surface in front of the nearest opaque one is composited over
    it with opacity ``ALPHA``, far to near.
    """
    k = spec.rig.ref_intrinsics if view == "ref" else spec.rig.src_intrinsics
    vv, uu = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    origin, dirs = _view_rays(spec.rig, view, uu, vv)
    hits = [_intersect(p, origin, dirs) for p in spec.primitives]
    ts = np.stack([h[0] for h in hits])  # P, M
    nearest = ts.min(axis=0)
    if not np.isfinite(nearest).all():
        raise ValueError(f"{int((~np.isfinite(nearest)).sum())} rays of the {view} view "
                         f"miss every primitive; add a backdrop")
    opaque = np.array([not p.transparent for p in spec.primitives])
    ts_opaque = np.where(opaque[:, None], ts, np.inf)
    back_t = ts_opaque.min(axis=0)
    if not np.isfinite(back_t).all():
        raise ValueError(f"some {view}-view rays see no opaque surface behind transparent ones")
    back_idx = ts_opaque.argmin(axis=0)

    def shade(i, t):
        prim = spec.primitives[i]
        pts = origin + t[:, None] * dirs
        normals = hits[i][1]
        normals = normals if normals.shape[0] == len(t) else np.broadcast_to(normals, dirs.shape)
        facing = np.where((np.einsum("ij,ij->i", normals, dirs) < 0)[:, None], normals, -normals)
        lambert = AMBIENT + (1 - AMBIENT) * np.clip(facing @ LIGHT, 0.0, None)
        return _albedo(prim, pts) * lambert[:, None]

    color = np.zeros(dirs.shape)
    for i in range(len(spec.primitives)):
        sel = back_idx == i
        if sel.any():
            color[sel] = shade(i, back_t)[sel]
    transparent = [i for i, p in enumerate(spec.primitives) if p.transparent]
    # composite far to near: order layers by hit distance per ray
    if transparent:
        tt = ts[transparent]
        order = np.argsort(-tt, axis=0, kind="stable")
        layer_colors = [shade(i, np.where(np.isfinite(ts[i]), ts[i], 1.0)) for i in transparent]
        for rank in range(len(transparent)):
            pick = order[rank]
            t_pick = np.take_along_axis(tt, pick[None], 0)[0]
            in_front = np.isfinite(t_pick) & (t_pick < back_t)
            layer = np.stack(layer_colors)[pick, np.arange(len(pick))]
            color = np.where(in_front[:, None], ALPHA * layer + (1 - ALPHA) * color, color)
    first = ts.argmin(axis=0)
    mask = np.array([spec.primitives[i].transparent for i in first])
    shape = (k.height, k.width)
    return Rendering(rgb=np.clip(color, 0.0, 1.0).T.reshape(3, *shape),
                     depth=nearest.reshape(shape),
                     mask=mask.reshape(shape).astype(np.float64),
                     background_depth=back_t.reshape(shape))


def corrupt_depth(gt_depth, mask, background_depth, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Sensor-style raw depth: holes and background bleed-through inside the mask, noise everywhere.

    Draw order is fixed (gaussian noise, then one uniform per pixel) so a
    seed reproduces the same corruption.
    """
    gt = np.asarray(gt_depth, float)
    m = np.asarray(mask) > 0
    bg = np.asarray(background_depth, float)
    if not gt.shape == m.shape == bg.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape}, mask {m.shape}, background {bg.shape}")
    if spec.hole_fraction + spec.background_bleed_fraction > 1.0 + 1e-12:
        raise ValueError("hole_fraction + background_bleed_fraction exceeds 1")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, spec.noise_sigma, gt.shape) if spec.noise_sigma > 0 else np.zeros(gt.shape)
    draw = rng.random(gt.shape)
    raw = gt + noise
    hole = m & (draw < spec.hole_fraction)
    bleed = m & ~hole & (draw < spec.hole_fraction + spec.background_bleed_fraction)
    raw = np.where(bleed, bg, raw)
    return np.where(hole, 0.0, raw)


# --------------------------------------------------------------------------
# random scene generation


@dataclass(frozen=True)
class GeneratorConfig:
    """Distribution of synthetic scenes (what ``synth`` reads from a scene-spec file)."""

    width: int = 96
    height: int = 96
    fov_deg: float = 60.0
    baseline: float = 0.12
    convergence: float = 1.0
    backdrop_depth: tuple = (1.25, 1.4)
    backdrop_tilt_deg: float = 15.0
    object_depth: tuple = (0.65, 0.95)
    object_size: tuple = (0.09, 0.14)
    transparent_count: tuple = (1, 2)
    opaque_count: tuple = (0, 1)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene-spec keys: {sorted(unknown)}")
        d = dict(d)
        if "corruption" in d and isinstance(d["corruption"], dict):
            d["corruption"] = CorruptionSpec(**d["corruption"])
        for key in ("backdrop_depth", "object_depth", "object_size", "transparent_count",
                    "opaque_count"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def make_rig(cfg: GeneratorConfig) -> CameraRig:
    """Reference camera at the origin; source camera shifted by ``baseline`` along +x, toed in."""
    f = 0.5 * cfg.width / np.tan(np.radians(cfg.fov_deg) / 2)
    k = Intrinsics(f, f, (cfg.width - 1) / 2, (cfg.height - 1) / 2, cfg.width, cfg.height)
    cam_to_ref = _rot_y(-np.arctan2(cfg.baseline, cfg.convergence))
    center = np.array([cfg.baseline, 0.0, 0.0])
    rot = cam_to_ref.T
    return CameraRig(k, k, RelativePose(rot, -rot @ center))


def _random_colors(rng, bright):
    base = rng.uniform(0.55, 0.95, 3) if bright else rng.uniform(0.05, 0.4, 3)
    other = np.clip(base + rng.choice([-1, 1]) * rng.uniform(0.25, 0.45, 3), 0.02, 0.98)
    return (tuple(base), tuple(other))


def random_scene(cfg: GeneratorConfig, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    rig = make_rig(cfg)
    prims = []
    depth = rng.uniform(*cfg.backdrop_depth)
    tilt = np.radians(cfg.backdrop_tilt_deg)
    normal = _rot_x(rng.uniform(-tilt, tilt)) @ _rot_y(rng.uniform(-tilt, tilt)) @ np.array([0, 0, -1.0])
    prims.append(Primitive("plane", (0.0, 0.0, depth), normal=tuple(normal),
                           colors=_random_colors(rng, True), checker=rng.uniform(0.03, 0.06)))
    n_transparent = int(rng.integers(cfg.transparent_count[0], cfg.transparent_count[1] + 1))
    n_opaque = int(rng.integers(cfg.opaque_count[0], cfg.opaque_count[1] + 1))
    half_fov = np.tan(np.radians(cfg.fov_deg) / 2)
    for n in range(n_transparent + n_opaque):
        transparent = n < n_transparent
        z = rng.uniform(*cfg.object_depth)
        reach = 0.45 * z * half_fov
        center = (rng.uniform(-reach, reach), rng.uniform(-reach, reach), z)
        size = rng.uniform(*cfg.object_size)
        colors = _random_colors(rng, transparent)
        if rng.random() < 0.5:
            prims.append(Primitive("sphere", center, (size,), colors=colors,
                                   checker=rng.uniform(0.02, 0.04), transparent=transparent))
        else:
            rot = _rot_y(rng.uniform(-0.6, 0.6)) @ _rot_x(rng.uniform(-0.4, 0.4))
            half = tuple(size * rng.uniform(0.6, 1.0, 3))
            prims.append(Primitive("box", center, half, rotation=tuple(rot.reshape(-1)),
                                   colors=colors, checker=rng.uniform(0.02, 0.04),
                                   transparent=transparent))
    return SceneSpec(tuple(prims), rig, cfg.corruption, seed)
