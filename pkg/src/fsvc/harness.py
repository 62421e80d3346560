"""Episode sampling, large-scale evaluation, split construction, reports.

Evaluation assigns episode e the random stream (seed, e), so accuracy vectors
are bitwise identical whether episodes run serially or fanned out across
worker threads (FSVC_THREADS caps the fan-out; 0 means serial).
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    CapacityError,
    FeatureSequence,
    Manifest,
    RngStream,
    ValidationError,
    VideoEntry,
    as_generator,
    load_sequence,
)
from .protocols import MethodConfig, TrainedModel, adapt_and_predict

STREAM_SPLIT = 8 << 32
STREAM_CAP = 9 << 32

REPORT_FIELDS = (
    "method",
    "n_way",
    "k_shot",
    "episodes",
    "mean_accuracy",
    "ci95_halfwidth",
    "mean_accuracy_pct",
    "ci95_halfwidth_pct",
    "seed",
    "fingerprint",
)


@dataclass(frozen=True)
class Episode:
    """One n-way k-shot task: labeled supports plus exactly one query."""

    support: tuple[tuple[FeatureSequence, int], ...]
    query: tuple[FeatureSequence, int]
    class_map: dict[int, int]  # local label -> global class_id


def validate_episode(episode: Episode, n_way: int, k_shot: int) -> None:
    """Raise unless the episode satisfies its structural invariants."""
    counts = [0] * n_way
    support_ids = set()
    for seq, lab in episode.support:
        if not 0 <= lab < n_way:
            raise ValidationError(f"support label {lab} out of range")
        if seq.class_id != episode.class_map[lab]:
            raise ValidationError(
                f"support {seq.video_id!r}: class {seq.class_id} does not match "
                f"label {lab} -> {episode.class_map[lab]}"
            )
        counts[lab] += 1
        support_ids.add(seq.video_id)
    if counts != [k_shot] * n_way:
        raise ValidationError(f"support counts {counts} != {k_shot} per class")
    if len(support_ids) != n_way * k_shot:
        raise ValidationError("duplicate support video ids")
    q_seq, q_lab = episode.query
    if not 0 <= q_lab < n_way:
        raise ValidationError(f"query label {q_lab} out of range")
    if q_seq.class_id != episode.class_map[q_lab]:
        raise ValidationError("query label does not match its class")
    if q_seq.video_id in support_ids:
        raise ValidationError(
            f"query video {q_seq.video_id!r} also appears in the support set"
        )
    if len(set(episode.class_map.values())) != n_way:
        raise ValidationError("episode classes are not distinct")


@dataclass(frozen=True)
class SplitData:
    """One manifest split, fully loaded and grouped by class."""

    class_ids: tuple[int, ...]
    by_class: dict[int, tuple[FeatureSequence, ...]]


def load_split(manifest: Manifest, split: str) -> SplitData:
    groups: dict[int, list[FeatureSequence]] = {}
    for entry in manifest.split_videos(split):
        groups.setdefault(entry.class_id, []).append(
            load_sequence(manifest, entry)
        )
    class_ids = tuple(sorted(groups))
    by_class = {
        cid: tuple(sorted(groups[cid], key=lambda s: s.video_id))
        for cid in class_ids
    }
    return SplitData(class_ids=class_ids, by_class=by_class)


def _check_capacity(data: SplitData, n_way: int, k_shot: int) -> None:
    if len(data.class_ids) < n_way:
        raise CapacityError(
            f"split has {len(data.class_ids)} classes, need {n_way}"
        )
    for cid in data.class_ids:
        have = len(data.by_class[cid])
        if have < k_shot + 1:
            raise CapacityError(
                f"class {cid} has {have} videos, need {k_shot + 1} "
                f"({k_shot} supports plus a query candidate)"
            )


def sample_episode(
    data: SplitData,
    n_way: int,
    k_shot: int,
    rng: RngStream | np.random.Generator,
) -> Episode:
    """Uniform episode draw: classes without replacement, then videos without
    replacement within each class; one extra video from a uniformly chosen
    class becomes the query."""
    _check_capacity(data, n_way, k_shot)
    gen = as_generator(rng)
    chosen = gen.choice(len(data.class_ids), size=n_way, replace=False)
    query_slot = int(gen.integers(n_way))
    support: list[tuple[FeatureSequence, int]] = []
    query: tuple[FeatureSequence, int] | None = None
    class_map: dict[int, int] = {}
    for local, idx in enumerate(chosen):
        cid = data.class_ids[int(idx)]
        class_map[local] = cid
        videos = data.by_class[cid]
        need = k_shot + 1 if local == query_slot else k_shot
        picks = gen.choice(len(videos), size=need, replace=False)
        for pick in picks[:k_shot]:
            support.append((videos[int(pick)], local))
        if local == query_slot:
            query = (videos[int(picks[k_shot])], local)
    assert query is not None
    return Episode(support=tuple(support), query=query, class_map=class_map)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    method: str
    n_way: int
    k_shot: int
    episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    seed: int
    fingerprint: str
    wall_time: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.mean_accuracy <= 1.0:
            raise ValidationError(
                f"mean accuracy {self.mean_accuracy} outside [0, 1]"
            )


def ci95_halfwidth(values: np.ndarray) -> float:
    """1.96 * sample standard deviation (n-1 normalization) / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if n < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / np.sqrt(n))


def _worker_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("FSVC_THREADS", "0"))
    return max(0, threads)


def accuracy_vector(
    model: TrainedModel,
    cfg: MethodConfig,
    data: SplitData,
    n_episodes: int,
    threads: int | None = None,
) -> np.ndarray:
    """Per-episode 0/1 accuracies, independent of worker scheduling."""
    _check_capacity(data, cfg.n_way, cfg.k_shot)
    correct = np.zeros(n_episodes, dtype=np.float64)

    def run(lo: int, hi: int) -> None:
        for e in range(lo, hi):
            gen = RngStream(cfg.seed, e).generator()
            episode = sample_episode(data, cfg.n_way, cfg.k_shot, gen)
            pred = adapt_and_predict(model, episode, cfg, rng=gen)
            correct[e] = 1.0 if pred == episode.query[1] else 0.0

    workers = _worker_count(threads)
    if workers > 1 and n_episodes > 1:
        bounds = np.linspace(0, n_episodes, workers + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run, int(lo), int(hi))
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if lo < hi
            ]
            for fut in futures:
                fut.result()
    else:
        run(0, n_episodes)
    return correct


def evaluate(
    model: TrainedModel,
    cfg: MethodConfig,
    manifest: Manifest,
    n_episodes: int = 10000,
    split: str = "test",
    threads: int | None = None,
) -> EvalReport:
    """Mean episode accuracy with a 95% confidence interval."""
    started = time.perf_counter()
    data = load_split(manifest, split)
    correct = accuracy_vector(model, cfg, data, n_episodes, threads)
    return EvalReport(
        method=cfg.method,
        n_way=cfg.n_way,
        k_shot=cfg.k_shot,
        episodes=n_episodes,
        mean_accuracy=float(correct.mean()),
        ci95_halfwidth=ci95_halfwidth(correct),
        seed=cfg.seed,
        fingerprint=model.fingerprint,
        wall_time=time.perf_counter() - started,
    )


def report_to_dict(report: EvalReport) -> dict:
    """Serializable view with fixed key order and fixed-precision reals.

    Wall time is deliberately excluded so report files are byte-deterministic
    across runs of the same inputs.
    """
    return {
        "method": report.method,
        "n_way": report.n_way,
        "k_shot": report.k_shot,
        "episodes": report.episodes,
        "mean_accuracy": round(report.mean_accuracy, 6),
        "ci95_halfwidth": round(report.ci95_halfwidth, 6),
        "mean_accuracy_pct": f"{100.0 * report.mean_accuracy:.4f}",
        "ci95_halfwidth_pct": f"{100.0 * report.ci95_halfwidth:.4f}",
        "seed": report.seed,
        "fingerprint": report.fingerprint,
    }


def report_bytes(report: EvalReport, fmt: str = "json") -> bytes:
    doc = report_to_dict(report)
    if fmt == "json":
        return (json.dumps(doc, indent=2) + "\n").encode()
    if fmt == "csv":
        header = ",".join(REPORT_FIELDS)
        row = ",".join(str(doc[f]) for f in REPORT_FIELDS)
        return (header + "\n" + row + "\n").encode()
    raise ValidationError(f"unknown report format {fmt!r}")


def write_report(report: EvalReport, path: str | Path, fmt: str = "json") -> None:
    Path(path).write_bytes(report_bytes(report, fmt))


# ---------------------------------------------------------------------------
# split construction


def build_splits(
    manifest: Manifest,
    n_train: int,
    n_val: int,
    n_test: int,
    cap: int | None = None,
    seed: int = 0,
) -> Manifest:
    """Deterministically repartition a manifest's classes into disjoint splits.

    Classes are permuted by seed and dealt to train, val, test in order;
    leftover classes are dropped.  ``cap`` limits the number of training
    videos kept per class (a deterministic per-class subsample), which is how
    a scarce-base-data benchmark is carved out of an abundant one.
    """
    all_ids = sorted(cid for cid, _ in manifest.classes)
    need = n_train + n_val + n_test
    if len(all_ids) < need:
        raise CapacityError(
            f"manifest has {len(all_ids)} classes, need {need} for a "
            f"{n_train}/{n_val}/{n_test} partition"
        )
    perm = RngStream(seed, STREAM_SPLIT).generator().permutation(all_ids)
    assignment: dict[int, str] = {}
    for cid in perm[:n_train]:
        assignment[int(cid)] = "train"
    for cid in perm[n_train : n_train + n_val]:
        assignment[int(cid)] = "val"
    for cid in perm[n_train + n_val : need]:
        assignment[int(cid)] = "test"

    by_class: dict[int, list[VideoEntry]] = {}
    for video in manifest.videos:
        if video.class_id in assignment:
            by_class.setdefault(video.class_id, []).append(video)

    videos: list[VideoEntry] = []
    for cid in sorted(by_class):
        split = assignment[cid]
        entries = sorted(by_class[cid], key=lambda v: v.video_id)
        if split == "train" and cap is not None and len(entries) > cap:
            gen = RngStream(seed, STREAM_CAP + cid).generator()
            keep = sorted(gen.choice(len(entries), size=cap, replace=False))
            entries = [entries[int(i)] for i in keep]
        videos.extend(
            VideoEntry(v.video_id, v.class_id, v.file_path, split)
            for v in entries
        )

    classes = tuple(
        (cid, name) for cid, name in manifest.classes if cid in assignment
    )
    return Manifest(
        classes=classes,
        videos=tuple(videos),
        frame_count=manifest.frame_count,
        feature_dim=manifest.feature_dim,
        root=manifest.root,
    )
