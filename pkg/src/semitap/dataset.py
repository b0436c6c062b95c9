"""Synthetic untrimmed-sequence benchmark: generation, targets, splits, disk format.

A "video" is a T x D float64 feature matrix. Inside each annotated action
interval the features follow a smooth per-class prototype curve (resampled to
the interval length); outside they follow a smooth per-video background drift.
Gaussian noise is added everywhere. Class prototypes are fixed per dataset
seed, background drift is redrawn per video, so in-interval content is
recognizable while the background is not.

Disk format (version 1), one directory per dataset:

    meta.json          config + seed + format version + config hash + video ids
    <video_id>.f64     row-major T x D little-endian float64, no header
    <video_id>.json    {"video_id", "T", "D", "intervals": [{"start", "end",
                       "class_id"}]} with start/end in snippet units

All randomness flows through ``numpy.random.SeedSequence(seed, spawn_key=...)``
so every operation is a pure function of (inputs, seed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, ValidationError

FORMAT_VERSION = 1

# spawn_key namespaces under the dataset seed
_KEY_PROTOTYPES = 0
_KEY_VIDEO = 1
_KEY_SPLIT = 2


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic child generator for (seed, key) without shared state."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class ActionInterval:
    start: float
    end: float
    class_id: int

    def validate(self, T: float | None = None) -> None:
        if not (self.start < self.end):
            raise ValidationError(f"interval start {self.start} must be < end {self.end}")
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        if T is not None and not (0.0 <= self.start and self.end <= T):
            raise ValidationError(f"interval [{self.start}, {self.end}] outside [0, {T}]")


@dataclass
class VideoAnnotation:
    video_id: str
    intervals: list[ActionInterval]
    labeled: bool = False


@dataclass
class FeatureSequence:
    values: np.ndarray  # (T, D) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if self.T < 2 or self.D < 1:
            raise ValidationError(f"need T >= 2 and D >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature matrix contains non-finite entries")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class SnippetTargets:
    actionness: np.ndarray  # (T,) in [0, 1]
    start: np.ndarray
    end: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """Stack to (T, 3) with columns [actionness, start, end]."""
        return np.stack([self.actionness, self.start, self.end], axis=1)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SnippetTargets":
        return cls(actionness=m[:, 0].copy(), start=m[:, 1].copy(), end=m[:, 2].copy())


@dataclass(frozen=True)
class DatasetConfig:
    num_videos: int = 100
    T: int = 100
    D: int = 16
    num_classes: int = 5
    intervals_per_video: tuple[int, int] = (1, 3)
    min_interval_len: float = 8.0
    max_interval_len: float = 40.0
    feature_noise_sigma: float = 1.0
    background_drift_scale: float = 1.0
    # keep intervals away from sequence edges; mitigates zero-padding artifacts
    edge_margin: float = 2.0
    prototype_control_points: int = 5

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if self.T < 2 or self.D < 1:
            raise ConfigError("need T >= 2 and D >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        lo, hi = self.intervals_per_video
        if not (1 <= lo <= hi):
            raise ConfigError(f"empty intervals_per_video range {self.intervals_per_video}")
        if not (0 < self.min_interval_len <= self.max_interval_len):
            raise ConfigError("empty interval length range")
        if self.max_interval_len > self.T:
            raise ConfigError(
                f"max interval length {self.max_interval_len} exceeds T={self.T}"
            )
        if self.feature_noise_sigma < 0 or self.background_drift_scale < 0:
            raise ConfigError("noise sigma and drift scale must be >= 0")
        if self.edge_margin < 0 or 2 * self.edge_margin + self.max_interval_len > self.T:
            raise ConfigError("edge_margin leaves no room for intervals")
        if self.prototype_control_points < 2:
            raise ConfigError("prototype needs >= 2 control points")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intervals_per_video"] = list(self.intervals_per_video)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        kw = dict(d)
        if "intervals_per_video" in kw:
            kw["intervals_per_video"] = tuple(kw["intervals_per_video"])
        return cls(**kw)


def _smooth_curve(rng: np.random.Generator, num_points: int, dims: int) -> CubicSpline:
    """Cubic spline through random control points on [0, 1], one curve per dim."""
    knots = np.linspace(0.0, 1.0, num_points)
    values = rng.normal(0.0, 1.0, size=(num_points, dims))
    return CubicSpline(knots, values, axis=0)


def class_prototypes(config: DatasetConfig, seed: int) -> list[CubicSpline]:
    """One smooth prototype curve per class, fixed for the whole dataset."""
    rng = child_rng(seed, _KEY_PROTOTYPES)
    return [
        _smooth_curve(rng, config.prototype_control_points, config.D)
        for _ in range(config.num_classes)
    ]


def _sample_intervals(rng: np.random.Generator, config: DatasetConfig) -> list[ActionInterval] | None:
    """Rejection-sample non-overlapping intervals; None after 1000 rejections."""
    lo, hi = config.intervals_per_video
    count = int(rng.integers(lo, hi + 1))
    margin = config.edge_margin
    accepted: list[tuple[float, float]] = []
    classes: list[int] = []
    failures = 0
    while len(accepted) < count:
        length = rng.uniform(config.min_interval_len, config.max_interval_len)
        start = rng.uniform(margin, config.T - margin - length)
        end = start + length
        if any(start < e and end > s for s, e in accepted):
            failures += 1
            if failures >= 1000:
                return None
            continue
        accepted.append((start, end))
        classes.append(int(rng.integers(0, config.num_classes)))
    accepted_sorted = sorted(zip(accepted, classes))
    return [ActionInterval(s, e, c) for (s, e), c in accepted_sorted]


def _render_video(
    rng: np.random.Generator,
    config: DatasetConfig,
    prototypes: list[CubicSpline],
    intervals: list[ActionInterval],
) -> np.ndarray:
    T, D = config.T, config.D
    centers = np.arange(T) + 0.5
    drift = _smooth_curve(rng, config.prototype_control_points, D)
    values = config.background_drift_scale * drift(centers / T)
    for iv in intervals:
        inside = (centers >= iv.start) & (centers <= iv.end)
        if not np.any(inside):
            continue
        u = (centers[inside] - iv.start) / (iv.end - iv.start)
        values[inside] = prototypes[iv.class_id](u)
    if config.feature_noise_sigma > 0:
        values = values + rng.normal(0.0, config.feature_noise_sigma, size=(T, D))
    return values


def generate_dataset(
    config: DatasetConfig, seed: int
) -> list[tuple[FeatureSequence, VideoAnnotation]]:
    """Generate ``config.num_videos`` synthetic videos, deterministic in (config, seed)."""
    config.validate()
    prototypes = class_prototypes(config, seed)
    dataset = []
    for idx in range(config.num_videos):
        intervals = None
        retry = 0
        while intervals is None:
            rng = child_rng(seed, _KEY_VIDEO, idx, retry)
            intervals = _sample_intervals(rng, config)
            retry += 1
        values = _render_video(rng, config, prototypes, intervals)
        ann = VideoAnnotation(video_id=f"v{idx:05d}", intervals=intervals)
        dataset.append((FeatureSequence(values), ann))
    return dataset


def derive_targets(annotation: VideoAnnotation, T: int) -> SnippetTargets:
    """Binary per-snippet targets from interval annotations.

    Snippet t has center c_t = t + 0.5. actionness[t] = 1 iff c_t lies inside
    some interval. start[t] = 1 iff c_t lies in some region [s - r, s + r]
    with r = max(1, d / 10) for an interval of duration d starting at s;
    end targets are symmetric around interval ends.
    """
    for iv in annotation.intervals:
        iv.validate(T)
    centers = np.arange(T) + 0.5
    actionness = np.zeros(T)
    start = np.zeros(T)
    end = np.zeros(T)
    for iv in annotation.intervals:
        d = iv.end - iv.start
        r = max(1.0, d / 10.0)
        actionness[(centers >= iv.start) & (centers <= iv.end)] = 1.0
        start[(centers >= iv.start - r) & (centers <= iv.start + r)] = 1.0
        end[(centers >= iv.end - r) & (centers <= iv.end + r)] = 1.0
    return SnippetTargets(actionness, start, end)


def split_labels(dataset, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint, exhaustive (labeled, unlabeled) index partition.

    ``dataset`` may be the dataset list itself or an integer video count.
    |labeled| = round(fraction * N) with half-up rounding.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ConfigError(f"label fraction must be in [0, 1], got {fraction}")
    n = dataset if isinstance(dataset, int) else len(dataset)
    k = int(np.floor(fraction * n + 0.5))
    perm = child_rng(seed, _KEY_SPLIT).permutation(n)
    labeled = sorted(int(i) for i in perm[:k])
    unlabeled = sorted(int(i) for i in perm[k:])
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# disk format


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def save_dataset(
    out_dir: str,
    dataset: list[tuple[FeatureSequence, VideoAnnotation]],
    config: DatasetConfig,
    seed: int,
    force: bool = False,
) -> str:
    """Write the documented on-disk format; returns the dataset hash."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use force)")
    os.makedirs(out_dir, exist_ok=True)
    video_ids = [ann.video_id for _, ann in dataset]
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "video_ids": video_ids,
    }
    _write_json(os.path.join(out_dir, "meta.json"), meta)
    for feats, ann in dataset:
        with open(os.path.join(out_dir, f"{ann.video_id}.f64"), "wb") as f:
            f.write(np.ascontiguousarray(feats.values, dtype="<f8").tobytes())
        sidecar = {
            "video_id": ann.video_id,
            "T": feats.T,
            "D": feats.D,
            "intervals": [
                {"start": iv.start, "end": iv.end, "class_id": iv.class_id}
                for iv in ann.intervals
            ],
        }
        _write_json(os.path.join(out_dir, f"{ann.video_id}.json"), sidecar)
    return dataset_hash(out_dir)


def load_dataset(in_dir: str) -> tuple[list[tuple[FeatureSequence, VideoAnnotation]], dict]:
    meta_path = os.path.join(in_dir, "meta.json")
    if not os.path.isfile(meta_path):
        raise ConfigError(f"{in_dir} is not a dataset directory (missing meta.json)")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format version {meta.get('format_version')}")
    dataset = []
    for vid in meta["video_ids"]:
        with open(os.path.join(in_dir, f"{vid}.json"), encoding="utf-8") as f:
            sidecar = json.load(f)
        raw = np.fromfile(os.path.join(in_dir, f"{vid}.f64"), dtype="<f8")
        values = raw.reshape(sidecar["T"], sidecar["D"])
        intervals = [
            ActionInterval(iv["start"], iv["end"], iv["class_id"])
            for iv in sidecar["intervals"]
        ]
        dataset.append((FeatureSequence(values), VideoAnnotation(vid, intervals)))
    return dataset, meta


def dataset_hash(in_dir: str) -> str:
    """sha256 over all dataset files, name-sorted; stable identity for manifests."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(in_dir)):
        path = os.path.join(in_dir, name)
        if not os.path.isfile(path):
            continue
        h.update(name.encode("utf-8"))
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()
