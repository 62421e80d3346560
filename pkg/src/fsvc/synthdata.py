"""Synthetic class-structured, temporally warped feature sequences.

Each class is a smooth random trajectory; each video samples T frames from it
at monotone, randomly warped positions and adds Gaussian noise.  Warping
creates exactly the temporal misalignment that alignment-based similarity is
meant to undo, so alignment and adaptation methods can be compared end to end
at desk scale with a known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    FeatureSequence,
    Manifest,
    RngStream,
    ValidationError,
    VideoEntry,
    as_generator,
    save_manifest,
    write_feature_file,
)

# stream_id offsets; keeps every prototype / video on its own substream
STREAM_PROTO = 1 << 32
STREAM_VIDEO = 2 << 32

MANIFEST_NAME = "manifest.json"
PRETRAIN_MANIFEST_NAME = "pretrain_manifest.json"


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for one synthetic benchmark.

    ``videos_per_class`` reproduces the scarce-vs-abundant base-data contrast;
    ``pretrain_classes`` adds a disjoint extra class set for transfer
    experiments.
    """

    n_train_classes: int
    n_val_classes: int
    n_test_classes: int
    videos_per_class: int
    feature_dim: int = 32
    frame_count: int = 8
    prototype_len: int = 32
    noise_sigma: float = 0.1
    warp_strength: float = 0.0
    seed: int = 0
    pretrain_classes: int = 0
    feature_corr: float = 0.0

    def __post_init__(self) -> None:
        if min(self.n_train_classes, self.n_val_classes, self.n_test_classes) < 0:
            raise ValidationError("class counts must be >= 0")
        if self.videos_per_class < 1:
            raise ValidationError("videos_per_class must be >= 1")
        if self.feature_dim < 1 or self.frame_count < 1:
            raise ValidationError("feature_dim and frame_count must be >= 1")
        if self.prototype_len < self.frame_count:
            raise ValidationError(
                f"prototype_len ({self.prototype_len}) must be >= frame_count "
                f"({self.frame_count})"
            )
        if not 0.0 <= self.warp_strength <= 1.0:
            raise ValidationError("warp_strength must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.pretrain_classes < 0:
            raise ValidationError("pretrain_classes must be >= 0")
        if self.feature_corr < 0.0:
            raise ValidationError("feature_corr must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorSpec":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**known)


def _correlation_kernel(feature_dim: int, width: float) -> np.ndarray:
    """Circulant Gaussian kernel correlating neighboring feature columns.

    Every class uses the same kernel, so the correlation structure is shared
    across classes: class signal concentrates in a common low-dimensional
    subspace while additive noise stays isotropic, which is what makes the
    quality of a learned representation depend on base-data volume.
    """
    offsets = np.arange(feature_dim)
    dist = np.minimum(offsets, feature_dim - offsets)
    kernel = np.exp(-0.5 * (dist / width) ** 2)
    kernel /= np.linalg.norm(kernel)
    idx = (offsets[:, None] - offsets[None, :]) % feature_dim
    return kernel[idx]


def gen_class_prototype(
    rng: RngStream | np.random.Generator,
    feature_dim: int,
    length: int,
    corr_width: float = 0.0,
) -> np.ndarray:
    """Smooth random trajectory: cumulative sum of unit-variance steps,
    then standardized per column (mean 0, std 1).

    ``corr_width`` > 0 correlates the step components of neighboring feature
    columns through a kernel shared by all classes; 0 keeps columns
    independent.
    """
    if feature_dim < 1 or length < 1:
        raise ValidationError("feature_dim and length must be >= 1")
    gen = as_generator(rng)
    steps = gen.standard_normal((length, feature_dim))
    if corr_width > 0.0:
        steps = steps @ _correlation_kernel(feature_dim, corr_width)
    traj = np.cumsum(steps, axis=0)
    mean = traj.mean(axis=0)
    std = traj.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (traj - mean) / std


def _warp_positions(
    gen: np.random.Generator, t: int, length: int, strength: float
) -> np.ndarray:
    """Monotone frame positions in [0, length-1].

    Blends the uniform grid with a sorted-uniform random warp; the blend
    weight is the warp strength, so 0 gives exactly the uniform grid.  For
    strength < 1 positions are repaired to be strictly increasing (always
    possible since length >= t).
    """
    uniform = np.linspace(0.0, length - 1, t)
    random_pos = np.sort(gen.random(t)) * (length - 1)
    blended = (1.0 - strength) * uniform + strength * random_pos
    pos = np.rint(blended).astype(np.int64)
    if strength < 1.0:
        idx = np.arange(t)
        pos = np.maximum.accumulate(pos - idx) + idx  # gaps >= 1
        pos = np.minimum(pos, length - t + idx)  # stay within range
    return pos


def gen_video(
    proto: np.ndarray,
    spec: GeneratorSpec,
    rng: RngStream | np.random.Generator,
    video_id: str = "",
    class_id: int = 0,
) -> FeatureSequence:
    """Sample one video from a class prototype: warped positions plus noise."""
    if proto.shape[0] != spec.prototype_len:
        raise ValidationError(
            f"prototype has {proto.shape[0]} rows, spec says {spec.prototype_len}"
        )
    gen = as_generator(rng)
    pos = _warp_positions(gen, spec.frame_count, spec.prototype_len, spec.warp_strength)
    frames = proto[pos].copy()
    if spec.noise_sigma > 0.0:
        frames += spec.noise_sigma * gen.standard_normal(frames.shape)
    return FeatureSequence(video_id=video_id, class_id=class_id, frames=frames)


def _write_class_videos(
    spec: GeneratorSpec,
    class_id: int,
    class_name: str,
    split: str,
    subdir: str,
    out_dir: Path,
    video_counter: int,
) -> tuple[list[VideoEntry], int]:
    proto = gen_class_prototype(
        RngStream(spec.seed, STREAM_PROTO + class_id),
        spec.feature_dim,
        spec.prototype_len,
        corr_width=spec.feature_corr,
    )
    class_dir = out_dir / subdir / class_name
    class_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for j in range(spec.videos_per_class):
        vid = f"{class_name}_v{j:03d}"
        seq = gen_video(
            proto,
            spec,
            RngStream(spec.seed, STREAM_VIDEO + video_counter),
            video_id=vid,
            class_id=class_id,
        )
        rel = f"{subdir}/{class_name}/{vid}.fsvf"
        write_feature_file(seq, out_dir / rel)
        entries.append(VideoEntry(vid, class_id, rel, split))
        video_counter += 1
    return entries, video_counter


def gen_benchmark(spec: GeneratorSpec, out_dir: str | Path) -> Manifest:
    """Write a full benchmark under ``out_dir`` and return its manifest.

    Class ids are assigned train, then val, then test, then pretrain, so all
    four sets are disjoint by construction.  When ``pretrain_classes`` > 0 a
    second manifest (pretrain_manifest.json) is written next to the main one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    plan = (
        [("train", spec.n_train_classes)]
        + [("val", spec.n_val_classes)]
        + [("test", spec.n_test_classes)]
    )
    classes: list[tuple[int, str]] = []
    videos: list[VideoEntry] = []
    class_id = 0
    video_counter = 0
    for split, count in plan:
        for _ in range(count):
            name = f"cls{class_id:03d}"
            entries, video_counter = _write_class_videos(
                spec, class_id, name, split, "features", out_dir, video_counter
            )
            classes.append((class_id, name))
            videos.extend(entries)
            class_id += 1

    manifest = Manifest(
        classes=tuple(classes),
        videos=tuple(videos),
        frame_count=spec.frame_count,
        feature_dim=spec.feature_dim,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)

    if spec.pretrain_classes > 0:
        pre_classes: list[tuple[int, str]] = []
        pre_videos: list[VideoEntry] = []
        for _ in range(spec.pretrain_classes):
            name = f"cls{class_id:03d}"
            entries, video_counter = _write_class_videos(
                spec,
                class_id,
                name,
                "train",
                "features_pretrain",
                out_dir,
                video_counter,
            )
            pre_classes.append((class_id, name))
            pre_videos.extend(entries)
            class_id += 1
        pretrain = Manifest(
            classes=tuple(pre_classes),
            videos=tuple(pre_videos),
            frame_count=spec.frame_count,
            feature_dim=spec.feature_dim,
            root=out_dir,
        )
        save_manifest(pretrain, out_dir / PRETRAIN_MANIFEST_NAME)

    return manifest
