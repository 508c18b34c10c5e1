"""Synthetic scenes with analytic ground truth, and manifest-driven dataset I/O."""

from .samples import (
    ManifestError,
    SceneSample,
    decode_depth,
    encode_depth,
    generate_samples,
    load_manifest,
    sample_from_spec,
    save_sample,
    scene_seed,
    write_depth_png,
    write_gray_png,
    write_corpus,
    write_manifest,
)
from .synthetic import (
    ALPHA,
    CorruptionSpec,
    GeneratorConfig,
    Primitive,
    Rendering,
    SceneSpec,
    cast_rays,
    corrupt_depth,
    make_rig,
    random_scene,
    render_scene,
)

__all__ = [
    "ALPHA", "CorruptionSpec", "GeneratorConfig", "ManifestError", "Primitive", "Rendering",
    "SceneSample", "SceneSpec", "cast_rays", "corrupt_depth", "decode_depth", "encode_depth",
    "generate_samples",
    "load_manifest", "make_rig", "random_scene", "render_scene", "sample_from_spec",
    "save_sample", "scene_seed", "write_depth_png", "write_corpus", "write_gray_png", "write_manifest",
]
