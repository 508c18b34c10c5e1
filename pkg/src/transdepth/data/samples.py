"""SceneSample and its on-disk form: PNG images plus a JSON manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import CameraRig, Intrinsics, RelativePose
from .synthetic import GeneratorConfig, SceneSpec, corrupt_depth, random_scene, render_scene

logger = logging.getLogger(__name__)

MAX_DEPTH_M = 65.535
ROTATION_TOL = 1e-6


@dataclass
class SceneSample:
    rgb_ref: np.ndarray    # 3,H,W in [0,1]
    rgb_src: np.ndarray    # 3,H,W in [0,1]
    raw_depth: np.ndarray  # H,W meters, 0 = invalid
    gt_depth: np.ndarray   # H,W meters
    mask: np.ndarray       # H,W in {0,1}
    rig: CameraRig
    id: str

    def __post_init__(self):
        h, w = self.gt_depth.shape
        for name in ("rgb_ref", "rgb_src"):
            if getattr(self, name).shape != (3, h, w):
                raise ValueError(f"{self.id}: {name} shape {getattr(self, name).shape} "
                                 f"does not match depth {h}x{w}")
        for name in ("raw_depth", "mask"):
            if getattr(self, name).shape != (h, w):
                raise ValueError(f"{self.id}: {name} shape {getattr(self, name).shape} "
                                 f"does not match depth {h}x{w}")
        k = self.rig.ref_intrinsics
        if (k.height, k.width) != (h, w):
            raise ValueError(f"{self.id}: reference intrinsics are {k.width}x{k.height}, "
                             f"images are {w}x{h}")

    @property
    def masked_pixels(self) -> int:
        return int((self.mask > 0).sum())


class ManifestError(ValueError):
    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


def sample_from_spec(spec: SceneSpec, sample_id: str) -> SceneSample:
    """Render both views of ``spec`` and corrupt the reference depth with its own seed."""
    ref = render_scene(spec, "ref")
    src = render_scene(spec, "src")
    if not ref.mask.any():
        raise ValueError(f"{sample_id}: no transparent pixel visible in the reference view")
    raw = corrupt_depth(ref.depth, ref.mask, ref.background_depth, spec.corruption, spec.seed)
    return SceneSample(ref.rgb, src.rgb, raw, ref.depth, ref.mask, spec.rig, sample_id)


# --------------------------------------------------------------------------
# PNG codecs


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def encode_depth(depth: np.ndarray) -> np.ndarray:
    """Meters to 16-bit millimeters. Negative or NaN depth counts as invalid (0)."""
    d = np.asarray(depth, dtype=np.float64)
    if np.isinf(d).any() or (d > MAX_DEPTH_M).any():
        raise ValueError(f"depth exceeds the {MAX_DEPTH_M} m representable in 16-bit millimeters")
    d = np.clip(np.nan_to_num(d, nan=0.0), 0.0, MAX_DEPTH_M)
    return np.round(d * 1000.0).astype(np.uint16)


def decode_depth(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float64) / 1000.0


def write_depth_png(path, depth) -> None:
    _write_png(Path(path), encode_depth(depth))


def write_gray_png(path, values) -> None:
    """Values in [0,1] as an 8-bit image."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    _write_png(Path(path), np.round(v * 255).astype(np.uint8))


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img)


def save_sample(sample: SceneSample, directory) -> dict:
    """Write the sample's images under ``directory``; return its manifest entry.

    File paths in the entry are relative to ``directory``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {key: f"{sample.id}_{key}.png"
             for key in ("rgb_ref", "rgb_src", "raw_depth", "gt_depth", "mask")}
    for key in ("rgb_ref", "rgb_src"):
        rgb = np.clip(getattr(sample, key), 0.0, 1.0).transpose(1, 2, 0)
        _write_png(directory / names[key], np.round(rgb * 255).astype(np.uint8))
    write_depth_png(directory / names["raw_depth"], sample.raw_depth)
    write_depth_png(directory / names["gt_depth"], sample.gt_depth)
    _write_png(directory / names["mask"], np.where(sample.mask > 0, 255, 0).astype(np.uint8))
    return {"id": sample.id, **names,
            "ref_intrinsics": sample.rig.ref_intrinsics.to_dict(),
            "src_intrinsics": sample.rig.src_intrinsics.to_dict(),
            "ref_to_src": sample.rig.ref_to_src.to_dict()}


def write_manifest(path, entries: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"samples": entries}, indent=1) + "\n")
    return path


# --------------------------------------------------------------------------
# loading

_IMAGE_KEYS = ("rgb_ref", "rgb_src", "raw_depth", "gt_depth", "mask")
_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def _intrinsics(sid: str, d) -> Intrinsics:
    if not isinstance(d, dict):
        raise ManifestError(sid, "intrinsics must be an object")
    missing = [k for k in _INTRINSIC_KEYS if k not in d]
    if missing:
        raise ManifestError(sid, f"intrinsics missing {missing}")
    try:
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]))
    except (TypeError, ValueError) as exc:
        raise ManifestError(sid, f"bad intrinsics: {exc}") from None


def _pose(sid: str, d) -> RelativePose:
    if not isinstance(d, dict) or "rotation" not in d or "translation" not in d:
        raise ManifestError(sid, "ref_to_src needs 'rotation' and 'translation'")
    try:
        rot = np.asarray(d["rotation"], dtype=np.float64)
        trans = np.asarray(d["translation"], dtype=np.float64)
    except (TypeError, ValueError):
        raise ManifestError(sid, "ref_to_src values must be numbers") from None
    if rot.size != 9 or trans.size != 3:
        raise ManifestError(sid, f"rotation needs 9 numbers and translation 3, "
                                 f"got {rot.size} and {trans.size}")
    if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
        raise ManifestError(sid, "ref_to_src contains non-finite values")
    rot = rot.reshape(3, 3)
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    det = np.linalg.det(rot)
    if err > ROTATION_TOL or abs(det - 1.0) > ROTATION_TOL:
        raise ManifestError(sid, f"rotation not orthonormal (|R^T R - I| = {err:.2e}, det = {det:.8f})")
    # snap to the nearest rotation so downstream geometry sees an exact one
    u, _, vt = np.linalg.svd(rot)
    return RelativePose(u @ vt, trans)


def _load_entry(entry, root: Path) -> SceneSample:
    if not isinstance(entry, dict):
        raise ManifestError("?", "sample entry must be an object")
    sid = str(entry.get("id", "?"))
    missing = [k for k in ("id",) + _IMAGE_KEYS + ("ref_intrinsics", "src_intrinsics", "ref_to_src")
               if k not in entry]
    if missing:
        raise ManifestError(sid, f"missing fields {missing}")
    arrays = {}
    for key in _IMAGE_KEYS:
        path = root / str(entry[key])
        if not path.is_file():
            raise ManifestError(sid, f"missing file {path}")
        try:
            arrays[key] = _read_png(path)
        except OSError as exc:
            raise ManifestError(sid, f"unreadable image {path}: {exc}") from None
    for key in ("rgb_ref", "rgb_src"):
        a = arrays[key]
        if a.ndim != 3 or a.shape[2] < 3:
            raise ManifestError(sid, f"{key} must be an RGB image, got shape {a.shape}")
        arrays[key] = a[..., :3].astype(np.float64).transpose(2, 0, 1) / 255.0
    for key in ("raw_depth", "gt_depth", "mask"):
        if arrays[key].ndim != 2:
            raise ManifestError(sid, f"{key} must be single-channel, got shape {arrays[key].shape}")
    h, w = arrays["gt_depth"].shape
    for key in _IMAGE_KEYS:
        if arrays[key].shape[-2:] != (h, w):
            raise ManifestError(sid, f"{key} is {arrays[key].shape[-2:]}, gt_depth is {(h, w)}")
    ref_k = _intrinsics(sid, entry["ref_intrinsics"])
    src_k = _intrinsics(sid, entry["src_intrinsics"])
    if (ref_k.height, ref_k.width) != (h, w):
        raise ManifestError(sid, f"ref_intrinsics size {ref_k.width}x{ref_k.height} "
                                 f"differs from images {w}x{h}")
    if (src_k.height, src_k.width) != (h, w):
        raise ManifestError(sid, f"src_intrinsics size {src_k.width}x{src_k.height} "
                                 f"differs from images {w}x{h}")
    rig = CameraRig(ref_k, src_k, _pose(sid, entry["ref_to_src"]))
    mask = (arrays["mask"] > 127).astype(np.float64)
    if not mask.any():
        raise ManifestError(sid, "mask is empty")
    return SceneSample(arrays["rgb_ref"], arrays["rgb_src"], decode_depth(arrays["raw_depth"]),
                       decode_depth(arrays["gt_depth"]), mask, rig, sid)


def load_manifest(path, strict: bool = True) -> list[SceneSample]:
    """Read every sample listed in a JSON manifest.

    Image paths resolve relative to the manifest's directory. A bad sample
    raises :class:`ManifestError` when ``strict``; otherwise it is logged and
    skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ValueError(f"manifest {path} must be an object with a 'samples' list")
    samples, seen = [], set()
    for entry in doc["samples"]:
        try:
            sample = _load_entry(entry, path.parent)
            if sample.id in seen:
                raise ManifestError(sample.id, "duplicate sample id")
        except ManifestError as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            continue
        seen.add(sample.id)
        samples.append(sample)
    return samples


# --------------------------------------------------------------------------
# corpora


def scene_seed(seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def generate_samples(cfg: GeneratorConfig, count: int, seed: int,
                     max_attempts: int = 20) -> list[SceneSample]:
    """``count`` random scenes; scene ``i`` depends only on ``(seed, i)``.

    Draws whose reference view shows no transparent pixel are redrawn with
    the next attempt number.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    samples = []
    for i in range(count):
        for attempt in range(max_attempts):
            spec = random_scene(cfg, scene_seed(seed, i, attempt))
            try:
                samples.append(sample_from_spec(spec, f"scene_{i:04d}"))
                break
            except ValueError:
                continue
        else:
            raise RuntimeError(f"scene {i}: no transparent pixel in {max_attempts} draws")
    return samples


def write_corpus(samples: list[SceneSample], directory, extra: dict | None = None) -> Path:
    """Save every sample under ``directory`` and write ``manifest.json`` there."""
    directory = Path(directory)
    entries = [save_sample(s, directory) for s in samples]
    path = write_manifest(directory / "manifest.json", entries)
    if extra:
        doc = json.loads(path.read_text())
        doc.update(extra)
        path.write_text(json.dumps(doc, indent=1) + "\n")
    return path
