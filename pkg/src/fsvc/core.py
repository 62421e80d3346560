"""Domain types, deterministic RNG streams, and binary feature / manifest I/O.

Everything downstream (generation, alignment, training, evaluation) rests on
three contracts defined here: feature sequences are finite (T, C_in) float64
matrices, manifests keep train/val/test class sets disjoint, and randomness
comes from counter-keyed streams so any unit of work can be reproduced in
isolation, independent of evaluation order.

Disk layout is single precision; all in-memory computation is double.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FSVF_MAGIC = b"FSVF"
FSVF_VERSION = 1
SPLITS = ("train", "val", "test")

_FSVF_HEADER = struct.Struct("<III")  # version, frame count, feature dim


class FsvcError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FsvcError):
    """A value violates a documented invariant."""


class FormatError(FsvcError):
    """A binary or text artifact does not match its documented layout."""


class LengthError(FormatError):
    """A binary payload is shorter or longer than its header promises."""


class DegenerateInputError(FsvcError):
    """An input is structurally valid but numerically unusable (zero norm)."""


class ShapeError(FsvcError):
    """Array shapes do not match the operation contract."""


class CapacityError(FsvcError):
    """A split cannot supply the requested episode structure."""


class CoverageError(FsvcError):
    """A per-class operation is missing samples for some class."""


class LeakageError(FsvcError):
    """Class sets that must stay disjoint overlap."""


# ---------------------------------------------------------------------------
# deterministic randomness


@dataclass(frozen=True)
class RngStream:
    """A named, counter-keyed random stream.

    Identical (seed, stream_id) pairs produce identical draw sequences on any
    platform, and distinct stream_ids are statistically independent.  Built on
    the Philox counter-based generator, keyed directly by the pair, so stream
    derivation never depends on how many draws earlier streams consumed.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise ValidationError(
                f"seed and stream_id must be non-negative, got "
                f"({self.seed}, {self.stream_id})"
            )

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed % (1 << 64), self.stream_id % (1 << 64)], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
    """Accept either a stream descriptor or a live generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


# ---------------------------------------------------------------------------
# feature sequences


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """One video, reduced to a (T, C_in) matrix of per-frame feature vectors.

    Frames are stored as a read-only float64 array; row t is frame t.
    """

    video_id: str
    class_id: int
    frames: np.ndarray

    def __post_init__(self) -> None:
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValidationError(
                f"sequence {self.video_id!r}: frames must be a (T>=1, C_in>=1) "
                f"matrix, got shape {frames.shape}"
            )
        if not np.all(np.isfinite(frames)):
            raise ValidationError(
                f"sequence {self.video_id!r} contains non-finite entries"
            )
        if self.class_id < 0:
            raise ValidationError(
                f"sequence {self.video_id!r}: class_id must be >= 0, "
                f"got {self.class_id}"
            )
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


def write_feature_file(seq: FeatureSequence, path: str | Path) -> None:
    """Write one sequence in the FSVF binary layout.

    Layout, bit-exact: 4 magic bytes "FSVF", then u32-LE version, u32-LE T,
    u32-LE C_in, then T*C_in IEEE-754 float32 little-endian values in
    frame-major order.
    """
    if not np.all(np.isfinite(seq.frames)):  # re-check; constructor guards too
        raise ValidationError(
            f"sequence {seq.video_id!r} contains non-finite entries"
        )
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    header = FSVF_MAGIC + _FSVF_HEADER.pack(
        FSVF_VERSION, seq.frame_count, seq.feature_dim
    )
    Path(path).write_bytes(header + payload)


def read_feature_file(
    path: str | Path, video_id: str | None = None, class_id: int = 0
) -> FeatureSequence:
    """Read an FSVF file back into a float64 sequence.

    Identity fields are not part of the on-disk layout; callers loading
    through a manifest supply them, otherwise the file stem is used.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != FSVF_MAGIC:
        raise FormatError(
            f"{path}: bad magic {data[:4]!r}, expected {FSVF_MAGIC!r}"
        )
    if len(data) < 4 + _FSVF_HEADER.size:
        raise LengthError(
            f"{path}: truncated header, {len(data)} bytes total"
        )
    version, t, c_in = _FSVF_HEADER.unpack_from(data, 4)
    if version != FSVF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = t * c_in * 4
    payload = data[4 + _FSVF_HEADER.size :]
    if len(payload) != expected:
        raise LengthError(
            f"{path}: expected {expected} payload bytes for T={t}, "
            f"C_in={c_in}, got {len(payload)}"
        )
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, c_in)
    return FeatureSequence(
        video_id=video_id if video_id is not None else path.stem,
        class_id=class_id,
        frames=frames.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    class_id: int
    file_path: str  # relative to the manifest's directory
    split: str


@dataclass(frozen=True, eq=False)
class Manifest:
    """Index of a benchmark: class registry plus per-video file references.

    The train/val/test class sets must be pairwise disjoint; violations are
    rejected at load time, never repaired.
    """

    classes: tuple[tuple[int, str], ...]
    videos: tuple[VideoEntry, ...]
    frame_count: int
    feature_dim: int
    root: Path | None = None

    def __post_init__(self) -> None:
        if self.frame_count < 1 or self.feature_dim < 1:
            raise ValidationError(
                f"frame_count and feature_dim must be >= 1, got "
                f"({self.frame_count}, {self.feature_dim})"
            )
        known = {cid for cid, _ in self.classes}
        if len(known) != len(self.classes):
            raise ValidationError("duplicate class_id in class registry")
        for v in self.videos:
            if v.split not in SPLITS:
                raise ValidationError(
                    f"video {v.video_id!r}: unknown split {v.split!r}"
                )
            if v.class_id not in known:
                raise ValidationError(
                    f"video {v.video_id!r}: class {v.class_id} not registered"
                )
        overlaps = []
        for i, a in enumerate(SPLITS):
            for b in SPLITS[i + 1 :]:
                shared = self.split_class_ids(a) & self.split_class_ids(b)
                if shared:
                    overlaps.append((a, b, sorted(shared)))
        if overlaps:
            detail = "; ".join(
                f"classes {ids} appear in both {a} and {b}"
                for a, b, ids in overlaps
            )
            raise ValidationError(f"split class sets overlap: {detail}")

    def split_videos(self, split: str) -> tuple[VideoEntry, ...]:
        return tuple(v for v in self.videos if v.split == split)

    def split_class_ids(self, split: str) -> set[int]:
        return {v.class_id for v in self.videos if v.split == split}

    def class_name(self, class_id: int) -> str:
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(class_id)

    def resolve(self, entry: VideoEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.file_path


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "frame_count": manifest.frame_count,
        "feature_dim": manifest.feature_dim,
        "classes": [[cid, name] for cid, name in manifest.classes],
        "videos": [
            [v.video_id, v.class_id, v.file_path, v.split]
            for v in manifest.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Load and validate a manifest; rejects overlapping split class sets."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid manifest JSON: {exc}") from exc
    for key in ("frame_count", "feature_dim", "classes", "videos"):
        if key not in doc:
            raise FormatError(f"{path}: missing manifest field {key!r}")
    manifest = Manifest(
        classes=tuple((int(c), str(n)) for c, n in doc["classes"]),
        videos=tuple(
            VideoEntry(str(vid), int(cid), str(fp), str(split))
            for vid, cid, fp, split in doc["videos"]
        ),
        frame_count=int(doc["frame_count"]),
        feature_dim=int(doc["feature_dim"]),
        root=path.parent,
    )
    if check_files:
        missing = [
            v.file_path for v in manifest.videos if not manifest.resolve(v).exists()
        ]
        if missing:
            raise ValidationError(
                f"{path}: {len(missing)} feature file(s) do not resolve, "
                f"first: {missing[0]!r}"
            )
    return manifest


def rebase_manifest(manifest: Manifest, new_root: str | Path) -> Manifest:
    """Rewrite file paths relative to a new directory, keeping them valid."""
    new_root = Path(new_root)
    old_root = manifest.root if manifest.root is not None else Path(".")
    videos = tuple(
        VideoEntry(
            v.video_id,
            v.class_id,
            os.path.relpath(old_root / v.file_path, new_root),
            v.split,
        )
        for v in manifest.videos
    )
    return Manifest(
        classes=manifest.classes,
        videos=videos,
        frame_count=manifest.frame_count,
        feature_dim=manifest.feature_dim,
        root=new_root,
    )


def load_sequence(manifest: Manifest, entry: VideoEntry) -> FeatureSequence:
    """Load one manifest entry, enforcing the manifest-wide T and C_in."""
    seq = read_feature_file(
        manifest.resolve(entry), video_id=entry.video_id, class_id=entry.class_id
    )
    if seq.frame_count != manifest.frame_count:
        raise ValidationError(
            f"video {entry.video_id!r}: frame count {seq.frame_count} does not "
            f"match manifest frame_count {manifest.frame_count}"
        )
    if seq.feature_dim != manifest.feature_dim:
        raise ValidationError(
            f"video {entry.video_id!r}: feature dim {seq.feature_dim} does not "
            f"match manifest feature_dim {manifest.feature_dim}"
        )
    return seq
