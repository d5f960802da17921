"""Phase-sequence corpora: synthetic generation, file I/O, meta sets.

A corpus is a JSON manifest plus one CSV per video (`label,f0,...,f{D-1}`,
label -1 = masked).  Floats are serialized with 17 significant digits so the
round trip is bit-exact at 64-bit.  Splits are whole-video train/test
partitions; frames are never split across sets.

The synthetic generator walks a mostly-forward Markov chain over phases with
geometric dwell times whose expected durations spread by the configured
imbalance ratio, and emits per-phase Gaussian features with shared spherical
covariance.  Overlap pairs place two phase means half a noise-sigma apart to
model visually confusable phases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng as prng
from .errors import DataError

__all__ = [
    "MASKED", "PhaseSequence", "Corpus", "SynthConfig", "BackgroundMode",
    "generate", "save_corpus", "load_corpus", "build_meta_set",
    "apply_label_dropout", "apply_background_mode",
    "MetaFrame", "MetaSet", "class_frequencies",
]

MASKED = -1
_MANIFEST_FORMAT = "phasediff-corpus-v1"


@dataclass
class PhaseSequence:
    """One video: per-frame features and labels (-1 = masked)."""

    video_id: str
    features: np.ndarray          # (L, D) float64
    labels: np.ndarray            # (L,) int64, in [0, C) or MASKED
    fps: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.video_id}: features {self.features.shape} vs labels {self.labels.shape}")
        if self.features.shape[0] < 1:
            raise DataError(f"{self.video_id}: empty sequence")

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    classes: int
    feature_dim: int
    fps: float
    videos: list[PhaseSequence]
    splits: dict[str, str] = field(default_factory=dict)

    def split(self, tag: str) -> list[PhaseSequence]:
        return [v for v in self.videos if self.splits.get(v.video_id) == tag]

    def video(self, video_id: str) -> PhaseSequence:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise DataError(f"unknown video id {video_id!r}")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 7
    feature_dim: int = 16
    base_duration: float = 6.0          # expected frames of the rarest phase
    imbalance: float = 10.0             # longest / shortest expected duration
    skip_prob: float = 0.05
    return_prob: float = 0.05
    ambiguity: float = 1.0              # shared feature noise sigma
    mean_scale: float = 1.0             # norm of the phase means
    overlap_pairs: tuple[tuple[int, int], ...] = ()
    fps: float = 1.0
    seed: int = 0

    def validate(self):
        if self.classes < 2:
            raise DataError(f"need at least 2 phases, got {self.classes}")
        if self.feature_dim < self.classes:
            raise DataError("feature_dim must be >= classes for distinct phase means")
        if self.imbalance < 1.0:
            raise DataError(f"imbalance ratio must be >= 1, got {self.imbalance}")
        if self.ambiguity <= 0.0:
            raise DataError(f"ambiguity sigma must be > 0, got {self.ambiguity}")
        for a, b in self.overlap_pairs:
            if not (0 <= a < self.classes and 0 <= b < self.classes and a != b):
                raise DataError(f"bad overlap pair ({a}, {b})")


class BackgroundMode(Enum):
    """How masked (background) frames participate in training."""

    DROP_FRAMES = "drop_frames"              # removed from context and loss
    CONTEXT_ONLY = "context_only"            # encoder sees them, no loss
    SINGLE_PSEUDO_LABEL = "single_pseudo_label"  # reserved extra class id C


def expected_durations(cfg: SynthConfig) -> np.ndarray:
    """Per-phase expected dwell times, log-spread by the imbalance ratio."""
    c = np.arange(cfg.classes)
    return cfg.base_duration * cfg.imbalance ** (c / (cfg.classes - 1))


def phase_means(cfg: SynthConfig) -> np.ndarray:
    """Phase emitter means: orthonormal directions, overlap pairs pulled close."""
    g = prng.stream(cfg.seed, "synth", "means")
    raw = g.standard_normal((cfg.feature_dim, cfg.feature_dim))
    q, _ = np.linalg.qr(raw)
    means = q[:, : cfg.classes].T * cfg.mean_scale
    for a, b in cfg.overlap_pairs:
        direction = g.standard_normal(cfg.feature_dim)
        direction /= np.linalg.norm(direction)
        means[b] = means[a] + 0.5 * cfg.ambiguity * direction
    return means


def _walk_phases(cfg: SynthConfig, g: np.random.Generator) -> np.ndarray:
    durations = expected_durations(cfg)
    labels = []
    phase = 0
    while True:
        # dwell = 1 + Poisson(mean - 1): mean as configured, variance ~ mean
        dwell = 1 + int(g.poisson(max(durations[phase] - 1.0, 0.0)))
        labels.extend([phase] * dwell)
        u = float(g.random())
        if phase > 0 and u < cfg.return_prob:
            phase -= 1
        elif u < cfg.return_prob + cfg.skip_prob and phase + 2 < cfg.classes:
            phase += 2
        else:
            phase += 1
        if phase >= cfg.classes:
            return np.asarray(labels, dtype=np.int64)


def generate(cfg: SynthConfig, n_videos: int, id_prefix: str = "vid") -> list[PhaseSequence]:
    """Deterministic synthetic corpus: same cfg.seed -> identical sequences."""
    cfg.validate()
    means = phase_means(cfg)
    videos = []
    for i in range(int(n_videos)):
        g = prng.stream(cfg.seed, "synth", "video", i)
        labels = _walk_phases(cfg, g)
        noise = g.standard_normal((labels.size, cfg.feature_dim))
        features = means[labels] + cfg.ambiguity * noise
        videos.append(PhaseSequence(f"{id_prefix}{i:04d}", features, labels, fps=cfg.fps))
    return videos


def class_frequencies(videos: list[PhaseSequence], classes: int) -> np.ndarray:
    counts = np.zeros(classes, dtype=np.int64)
    for v in videos:
        labeled = v.labels[v.labels != MASKED]
        counts += np.bincount(labeled, minlength=classes)[:classes]
    return counts


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_corpus(corpus: Corpus, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in corpus.videos:
        fname = f"{v.video_id}.csv"
        header = "label," + ",".join(f"f{j}" for j in range(corpus.feature_dim))
        lines = [header]
        for i in range(v.length):
            lines.append(str(int(v.labels[i])) + "," + ",".join(_fmt(x) for x in v.features[i]))
        (directory / fname).write_text("\n".join(lines) + "\n")
        entries.append({
            "id": v.video_id,
            "file": fname,
            "frames": int(v.length),
            "split": corpus.splits.get(v.video_id, "train"),
        })
    manifest = {
        "format": _MANIFEST_FORMAT,
        "num_classes": int(corpus.classes),
        "feature_dim": int(corpus.feature_dim),
        "fps": float(corpus.fps),
        "videos": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(manifest_path) -> Corpus:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise DataError("manifest not found", path=manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}", path=manifest_path)
    for key in ("format", "num_classes", "feature_dim", "fps", "videos"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}", path=manifest_path)
    if manifest["format"] != _MANIFEST_FORMAT:
        raise DataError(f"unsupported corpus format {manifest['format']!r}", path=manifest_path)

    classes = int(manifest["num_classes"])
    dim = int(manifest["feature_dim"])
    videos, splits = [], {}
    for entry in manifest["videos"]:
        path = manifest_path.parent / entry["file"]
        if not path.exists():
            raise DataError("video file missing", path=path)
        videos.append(_load_video(path, entry["id"], classes, dim, int(entry["frames"]),
                                  float(manifest["fps"])))
        splits[entry["id"]] = entry.get("split", "train")
    return Corpus(classes, dim, float(manifest["fps"]), videos, splits)


def _load_video(path: Path, video_id: str, classes: int, dim: int, frames: int,
                fps: float) -> PhaseSequence:
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError("empty video file", path=path)
    expected_header = "label," + ",".join(f"f{j}" for j in range(dim))
    if lines[0] != expected_header:
        raise DataError(f"header mismatch: expected {expected_header!r}", path=path, row=0)
    rows = lines[1:]
    if len(rows) != frames:
        raise DataError(f"manifest says {frames} frames, file has {len(rows)}", path=path)
    labels = np.empty(len(rows), dtype=np.int64)
    features = np.empty((len(rows), dim))
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise DataError(f"row width {len(parts)} != {dim + 1}", path=path, row=i + 1)
        try:
            label = int(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError as e:
            raise DataError(f"unparsable value: {e}", path=path, row=i + 1)
        if not (label == MASKED or 0 <= label < classes):
            raise DataError(f"label {label} outside [0, {classes}) and not masked",
                            path=path, row=i + 1)
        if not all(np.isfinite(values)):
            raise DataError("non-finite feature", path=path, row=i + 1)
        labels[i] = label
        features[i] = values
    return PhaseSequence(video_id, features, labels, fps=fps)


# ---------------------------------------------------------------------------
# meta set and label masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetaFrame:
    video_index: int
    frame_index: int
    label: int


@dataclass
class MetaSet:
    """Class-balanced frame subset; `exhausted` lists classes below quota."""

    frames: list[MetaFrame]
    per_class: dict[int, int]
    exhausted: tuple[int, ...]
    quota: int
    seed: int


def build_meta_set(videos: list[PhaseSequence], classes: int, quota: int, seed: int) -> MetaSet:
    """min(quota, available) labeled frames per class, sampled without replacement."""
    by_class: dict[int, list[tuple[int, int]]] = {c: [] for c in range(classes)}
    for vi, v in enumerate(videos):
        for fi in range(v.length):
            label = int(v.labels[fi])
            if label != MASKED:
                by_class[label].append((vi, fi))
    empty = [c for c in range(classes) if not by_class[c]]
    if empty:
        raise DataError(f"classes with zero labeled frames: {empty}")

    g = prng.stream(seed, "meta-set")
    frames, per_class, exhausted = [], {}, []
    for c in range(classes):
        pool = by_class[c]
        take = min(int(quota), len(pool))
        if take < quota:
            exhausted.append(c)
        chosen = g.choice(len(pool), size=take, replace=False)
        for idx in sorted(int(i) for i in chosen):
            vi, fi = pool[idx]
            frames.append(MetaFrame(vi, fi, c))
        per_class[c] = take
    return MetaSet(frames, per_class, tuple(exhausted), int(quota), int(seed))


def apply_label_dropout(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Mask exactly round(fraction * labeled train frames), uniformly at random.

    Masked frames stay in the sequences (encoder context) but carry no loss.
    """
    if not (0.0 <= fraction <= 1.0):
        raise DataError(f"dropout fraction {fraction} outside [0, 1]")
    positions = []
    for vi, v in enumerate(corpus.videos):
        if corpus.splits.get(v.video_id) != "train":
            continue
        for fi in np.nonzero(v.labels != MASKED)[0]:
            positions.append((vi, int(fi)))
    n_mask = int(round(fraction * len(positions)))
    g = prng.stream(seed, "label-dropout")
    chosen = g.choice(len(positions), size=n_mask, replace=False) if n_mask else []
    videos = [PhaseSequence(v.video_id, v.features.copy(), v.labels.copy(), v.fps)
              for v in corpus.videos]
    for idx in chosen:
        vi, fi = positions[int(idx)]
        videos[vi].labels[fi] = MASKED
    return Corpus(corpus.classes, corpus.feature_dim, corpus.fps, videos, dict(corpus.splits))


def apply_background_mode(corpus: Corpus, mode: BackgroundMode) -> Corpus:
    """Resolve masked frames per the chosen background policy.

    CONTEXT_ONLY is the identity (masking already means context-without-loss).
    DROP_FRAMES splices masked frames out entirely.  SINGLE_PSEUDO_LABEL
    rewrites them to a reserved extra class, growing the class count to C+1.
    """
    if mode is BackgroundMode.CONTEXT_ONLY:
        return corpus
    videos = []
    classes = corpus.classes
    if mode is BackgroundMode.DROP_FRAMES:
        for v in corpus.videos:
            keep = v.labels != MASKED
            if not np.any(keep):
                raise DataError(f"{v.video_id}: all frames masked, nothing left to drop")
            videos.append(PhaseSequence(v.video_id, v.features[keep], v.labels[keep], v.fps))
    elif mode is BackgroundMode.SINGLE_PSEUDO_LABEL:
        classes = corpus.classes + 1
        for v in corpus.videos:
            labels = v.labels.copy()
            labels[labels == MASKED] = corpus.classes
            videos.append(PhaseSequence(v.video_id, v.features.copy(), labels, v.fps))
    else:
        raise DataError(f"unknown background mode {mode}")
    return Corpus(classes, corpus.feature_dim, corpus.fps, videos, dict(corpus.splits))
