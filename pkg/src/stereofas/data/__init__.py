from .io import (
    DataError,
    HeaderError,
    ManifestError,
    ManifestRecord,
    ShapeMismatchError,
    TruncationError,
    read_dsp,
    read_manifest,
    read_pgm,
    read_pgm_bytes,
    write_dsp,
    write_manifest,
    write_pgm,
)
from .synth import (
    SceneParams,
    StereoDataset,
    StereoSample,
    generate_dataset,
    generate_scene,
    load_split,
    make_teacher_depth,
    sample_rel_pairs,
    scene_for_index,
)

__all__ = [
    "DataError",
    "HeaderError",
    "ManifestError",
    "ManifestRecord",
    "SceneParams",
    "ShapeMismatchError",
    "StereoDataset",
    "StereoSample",
    "TruncationError",
    "generate_dataset",
    "generate_scene",
    "load_split",
    "make_teacher_depth",
    "read_dsp",
    "read_manifest",
    "read_pgm",
    "read_pgm_bytes",
    "sample_rel_pairs",
    "scene_for_index",
    "write_dsp",
    "write_manifest",
    "write_pgm",
]
