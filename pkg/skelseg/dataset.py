"""
Skeleton sequence data for the segmentation engine

Covers the on-disk formats (binary sequence files, text label files, JSON
manifests), per-sequence normalization (root centering, frame-rate
reduction), patch timestamps, and a seeded generator that produces a
labeled desk-scale corpus of pose-motion motifs.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import numpy as np

from .errors import ConfigError, DataValidationError, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEQUENCE_MAGIC = b"SKL1"
SEQUENCE_HEADER = struct.Struct("<4sIIII")  # magic, C, T, V, fps
SEQUENCE_DTYPE = np.dtype("<f4")
VALID_JOINT_DIMS = (2, 3, 6)
POSITIONAL_JOINT_DIMS = (2, 3)
MANIFEST_KEYS = ("k_gt", "fps", "v", "c", "items")
_INT64_MIN, _INT64_MAX = int(np.iinfo(np.int64).min), int(np.iinfo(np.int64).max)


@dataclass
class SkeletonSequence:
    """One recording: joints [C x T x V] plus optional frame labels"""
    joints: np.ndarray
    fps: int
    labels: Optional[np.ndarray] = None
    activity: Optional[str] = None
    sequence_id: str = ""

    @property
    def joint_dim(self) -> int:
        return int(self.joints.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.joints.shape[1])

    @property
    def num_joints(self) -> int:
        return int(self.joints.shape[2])

    def validate(self, k_gt: Optional[int] = None) -> "SkeletonSequence":
        if self.joints.ndim != 3:
            raise DataValidationError(f"joints must be [C x T x V], got shape {self.joints.shape}", "joints")
        if self.joint_dim not in VALID_JOINT_DIMS:
            raise DataValidationError(f"joint dimension C={self.joint_dim} not in {VALID_JOINT_DIMS}", "c")
        if self.num_frames < 1:
            raise DataValidationError("sequence has no frames", "t")
        if self.num_joints < 2:
            raise DataValidationError(f"need at least 2 joints, got V={self.num_joints}", "v")
        if not np.all(np.isfinite(self.joints)):
            raise DataValidationError("joint coordinates contain NaN or Inf", "joints")
        if self.fps < 1:
            raise DataValidationError(f"fps must be positive, got {self.fps}", "fps")
        if self.labels is not None:
            if len(self.labels) != self.num_frames:
                raise DataValidationError(
                    f"label length mismatch: {len(self.labels)} labels for {self.num_frames} frames", "labels")
            if len(self.labels) and self.labels.min() < 0:
                raise DataValidationError("labels must be non-negative", "labels")
            if k_gt is not None and len(self.labels) and self.labels.max() >= k_gt:
                raise DataValidationError(
                    f"label {int(self.labels.max())} out of range for k_gt={k_gt}", "labels")
        return self


@dataclass
class Timestamps:
    """Relative time of each patch, in [0, 1]"""
    values: np.ndarray


@dataclass
class ManifestItem:
    seq: Path
    labels: Optional[Path] = None
    activity: Optional[str] = None

    @property
    def sequence_id(self) -> str:
        return self.seq.stem


@dataclass
class DatasetManifest:
    """A set of sequence files sharing joint layout, frame rate and label space"""
    items: List[ManifestItem]
    k_gt: int
    fps: int
    v: int
    c: int
    root: Path = field(default_factory=Path)

    def validate(self, load: bool = False) -> "DatasetManifest":
        if self.k_gt < 1:
            raise DataValidationError(f"k_gt must be >= 1, got {self.k_gt}", "k_gt")
        if self.c not in VALID_JOINT_DIMS:
            raise DataValidationError(f"c={self.c} not in {VALID_JOINT_DIMS}", "c")
        if self.v < 2:
            raise DataValidationError(f"v must be >= 2, got {self.v}", "v")
        seen = set()
        for item in self.items:
            if item.sequence_id in seen:
                raise DataValidationError(f"duplicate sequence id '{item.sequence_id}'", "items")
            seen.add(item.sequence_id)
            for path in (item.seq, item.labels):
                if path is not None and not path.is_file():
                    raise DataValidationError(f"referenced file does not exist: {path}", "items")
        if load:
            for item in self.items:
                load_sequence(item, self)
        return self

    def sequences(self) -> Iterator[SkeletonSequence]:
        for item in self.items:
            yield load_sequence(item, self)

    def to_dict(self) -> Dict[str, Any]:
        def rel(path: Optional[Path]) -> Optional[str]:
            if path is None:
                return None
            try:
                return path.relative_to(self.root).as_posix()
            except ValueError:
                return str(path)

        return {
            "k_gt": self.k_gt,
            "fps": self.fps,
            "v": self.v,
            "c": self.c,
            "items": [{"seq": rel(i.seq), "labels": rel(i.labels), "activity": i.activity} for i in self.items],
        }

    def save(self, path: PathLike):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_sequence(seq: SkeletonSequence, path: PathLike):
    c, t, v = seq.joints.shape
    payload = np.ascontiguousarray(seq.joints, dtype=SEQUENCE_DTYPE).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_HEADER.pack(SEQUENCE_MAGIC, c, t, v, int(seq.fps)))
        fh.write(payload)


def read_sequence(path: PathLike) -> SkeletonSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < SEQUENCE_HEADER.size:
        raise ParseError("truncated sequence header", str(path), offset=len(raw))
    magic, c, t, v, fps = SEQUENCE_HEADER.unpack_from(raw, 0)
    if magic != SEQUENCE_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {SEQUENCE_MAGIC!r}", str(path), offset=0)
    if c not in VALID_JOINT_DIMS:
        raise DataValidationError(f"{path}: joint dimension C={c} not in {VALID_JOINT_DIMS}", "c")
    expected = c * t * v * SEQUENCE_DTYPE.itemsize
    body = len(raw) - SEQUENCE_HEADER.size
    if body != expected:
        raise ParseError(f"payload holds {body} bytes, header implies {expected}", str(path),
                         offset=SEQUENCE_HEADER.size + min(body, expected))
    joints = np.frombuffer(raw, dtype=SEQUENCE_DTYPE, offset=SEQUENCE_HEADER.size).reshape(c, t, v).copy()
    return SkeletonSequence(joints=joints, fps=int(fps), sequence_id=path.stem)


def write_labels(labels: np.ndarray, path: PathLike):
    Path(path).write_text("".join(f"{int(x)}\n" for x in labels), encoding="utf-8")


def read_labels(path: PathLike) -> np.ndarray:
    path = Path(path)
    values = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        token = line.strip()
        if not token:
            continue
        try:
            value = int(token)
        except ValueError:
            raise ParseError(f"not an integer: {token!r}", str(path), line=lineno)
        if not _INT64_MIN <= value <= _INT64_MAX:
            raise ParseError(f"label out of 64-bit range: {token!r}", str(path), line=lineno)
        values.append(value)
    return np.asarray(values, dtype=np.int64)


def _int_field(doc: Dict[str, Any], key: str, path: Path) -> int:
    value = doc[key]
    try:
        number = int(value)
    except (TypeError, ValueError, OverflowError):
        raise DataValidationError(f"manifest {path}: {key} must be an integer, got {value!r}", key)
    if isinstance(value, bool) or (isinstance(value, float) and value != number):
        raise DataValidationError(f"manifest {path}: {key} must be an integer, got {value!r}", key)
    return number


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid manifest JSON: {e.msg}", str(path), line=e.lineno, offset=e.pos)
    if not isinstance(doc, dict):
        raise ParseError("manifest must be a JSON object", str(path), line=1)
    missing = [k for k in MANIFEST_KEYS if k not in doc]
    if missing:
        raise DataValidationError(f"manifest {path} lacks keys {missing}", missing[0])

    root = path.parent
    if not isinstance(doc["items"], list):
        raise DataValidationError(f"manifest {path}: items must be a list", "items")
    items = []
    for position, entry in enumerate(doc["items"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("seq"), str):
            raise DataValidationError(f"manifest item {position} has no 'seq' path", "items")
        labels = entry.get("labels")
        if labels is not None and not isinstance(labels, str):
            raise DataValidationError(f"manifest item {position}: labels must be a path string", "items")
        items.append(ManifestItem(
            seq=_resolve(root, entry["seq"]),
            labels=_resolve(root, labels) if labels is not None else None,
            activity=entry.get("activity"),
        ))
    manifest = DatasetManifest(items=items, k_gt=_int_field(doc, "k_gt", path), fps=_int_field(doc, "fps", path),
                               v=_int_field(doc, "v", path), c=_int_field(doc, "c", path), root=root)
    manifest.validate()
    logger.info(f"Loaded manifest {path} with {len(items)} sequences")
    return manifest


def load_sequence(item: ManifestItem, manifest: Optional[DatasetManifest] = None) -> SkeletonSequence:
    seq = read_sequence(item.seq)
    seq.activity = item.activity
    if item.labels is not None:
        seq.labels = read_labels(item.labels)
    if manifest is not None:
        if seq.joint_dim != manifest.c:
            raise DataValidationError(f"{item.seq}: C={seq.joint_dim} disagrees with manifest c={manifest.c}", "c")
        if seq.num_joints != manifest.v:
            raise DataValidationError(f"{item.seq}: V={seq.num_joints} disagrees with manifest v={manifest.v}", "v")
    return seq.validate(manifest.k_gt if manifest is not None else None)


def _resolve(root: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else root / p


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def center_at_root(seq: SkeletonSequence, root_joint: int = 0) -> SkeletonSequence:
    """Subtract the root joint's position from every joint, frame by frame"""
    if seq.joint_dim not in POSITIONAL_JOINT_DIMS:
        raise DataValidationError(
            f"cannot center non-positional channels (C={seq.joint_dim}) at a root joint", "c")
    if not 0 <= root_joint < seq.num_joints:
        raise DataValidationError(f"root joint {root_joint} out of range for V={seq.num_joints}", "root_joint")
    centered = seq.joints - seq.joints[:, :, root_joint:root_joint + 1]
    return replace(seq, joints=centered)


def downsample(seq: SkeletonSequence, target_fps: int) -> SkeletonSequence:
    """Keep every (fps / target_fps)-th frame starting at frame 0"""
    if target_fps < 1 or seq.fps % target_fps != 0:
        raise DataValidationError(f"target fps {target_fps} does not divide {seq.fps}", "target_fps")
    stride = seq.fps // target_fps
    if stride == 1:
        return seq
    labels = seq.labels[::stride].copy() if seq.labels is not None else None
    return replace(seq, joints=seq.joints[:, ::stride].copy(), fps=target_fps, labels=labels)


_passthrough_logged = False


def prepare_sequence(seq: SkeletonSequence, root_joint: Optional[int] = 0,
                     target_fps: Optional[int] = None) -> SkeletonSequence:
    """Downsample (if requested), then root-center positional data"""
    global _passthrough_logged
    if target_fps is not None and target_fps != seq.fps:
        seq = downsample(seq, target_fps)
    if root_joint is None:
        return seq
    if seq.joint_dim not in POSITIONAL_JOINT_DIMS:
        if not _passthrough_logged:
            logger.info(f"C={seq.joint_dim} channels are not positional; treating them as pre-normalized")
            _passthrough_logged = True
        return seq
    return center_at_root(seq, root_joint)


def make_timestamps(num_frames: int, patch_size: int) -> Timestamps:
    if patch_size < 1:
        raise DataValidationError(f"patch size must be >= 1, got {patch_size}", "patch_size")
    count = max(1, math.ceil(num_frames / patch_size))
    if count == 1:
        return Timestamps(values=np.zeros(1))
    return Timestamps(values=np.arange(count, dtype=np.float64) / (count - 1))


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic motif corpus"""
    classes: int = 4
    sequences: int = 20
    mean_segments: int = 8
    seed: int = 0
    patch_size: int = 10
    fps: int = 30
    joints: int = 6
    joint_dim: int = 3
    noise: float = 0.05
    short_fraction: float = 0.15   # share of segments exactly one patch long
    amplitude: float = 0.15        # oscillation amplitude per coordinate
    min_separation: float = 0.6    # required pairwise distance between class offsets

    def validate(self) -> "SynthConfig":
        if self.classes < 2:
            raise ConfigError(f"synthetic corpus needs at least 2 classes, got {self.classes}", "classes")
        if self.sequences < 1:
            raise ConfigError("need at least one sequence", "sequences")
        if self.mean_segments < 1:
            raise ConfigError("mean_segments must be >= 1", "mean_segments")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1", "patch_size")
        if self.joint_dim not in POSITIONAL_JOINT_DIMS:
            raise ConfigError(f"synthetic joints must be 2-D or 3-D, got {self.joint_dim}", "joint_dim")
        if self.joints < 2:
            raise ConfigError("need at least 2 joints", "joints")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0", "noise")
        return self


@dataclass
class MotifBank:
    """Per-class pose offsets and oscillation parameters"""
    base: np.ndarray        # [C x V]
    offsets: np.ndarray     # [K x C x V]
    frequency: np.ndarray   # [K] in Hz
    phase: np.ndarray       # [K]
    joint_phase: np.ndarray  # [C x V]
    amplitude: float

    def render(self, label: int, frames: int, fps: int) -> np.ndarray:
        """Noise-free frames of one segment, [C x frames x V]"""
        local_time = np.arange(frames, dtype=np.float64) / fps
        angle = (2.0 * math.pi * self.frequency[label] * local_time[None, :, None]
                 + self.phase[label] + self.joint_phase[:, None, :])
        swing = self.amplitude * np.sin(angle)
        swing[:, :, 0] = 0.0
        pose = (self.base + self.offsets[label])[:, None, :]
        return pose + swing


def build_motifs(config: SynthConfig) -> MotifBank:
    rng = np.random.default_rng([config.seed, 0])
    shape = (config.joint_dim, config.joints)
    base = rng.uniform(-1.0, 1.0, shape)
    base[:, 0] = 0.0
    offsets = np.zeros((config.classes,) + shape)
    for attempt in range(100):
        offsets = rng.uniform(-0.8, 0.8, (config.classes,) + shape)
        offsets[:, :, 0] = 0.0
        flat = offsets.reshape(config.classes, -1)
        gaps = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
        gaps[np.diag_indices(config.classes)] = np.inf
        if gaps.min() > config.min_separation:
            break
    else:
        raise ConfigError("could not draw separated class offsets; raise joints or lower classes", "classes")
    joint_phase = rng.uniform(0.0, 2.0 * math.pi, shape)
    return MotifBank(
        base=base,
        offsets=offsets,
        frequency=rng.uniform(0.3, 1.5, config.classes),
        phase=rng.uniform(0.0, 2.0 * math.pi, config.classes),
        joint_phase=joint_phase,
        amplitude=config.amplitude,
    )


def _segment_plan(config: SynthConfig, rng: np.random.Generator) -> List[List[tuple]]:
    """(label, length) pairs per sequence; every class appears at least once"""
    p = config.patch_size
    forced = list(rng.permutation(config.classes))
    plan = []
    for _ in range(config.sequences):
        count = max(1, config.mean_segments + int(rng.integers(-2, 3)))
        segments = []
        previous = -1
        for _ in range(count):
            if forced and forced[0] != previous:
                label = int(forced.pop(0))
            else:
                choices = [k for k in range(config.classes) if k != previous]
                label = int(choices[int(rng.integers(len(choices)))])
            if rng.random() < config.short_fraction:
                length = p
            else:
                length = int(rng.integers(2 * p, 8 * p + 1))
            segments.append((label, length))
            previous = label
        plan.append(segments)
    return plan


def synth_generate(out_dir: PathLike, config: Optional[SynthConfig] = None) -> DatasetManifest:
    """
    Write a labeled synthetic corpus plus manifest.json into `out_dir`.

    Each class is a motif: a class-specific joint offset pattern on top of a
    shared base pose, with a class-specific oscillation frequency and phase.
    Gaussian noise of std `noise` is added per coordinate. Output bytes depend
    only on the config.
    """
    config = (config or SynthConfig()).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    motifs = build_motifs(config)
    rng = np.random.default_rng([config.seed, 1])
    plan = _segment_plan(config, rng)

    items = []
    for index, segments in enumerate(plan):
        frames = []
        labels = []
        for label, length in segments:
            clean = motifs.render(label, length, config.fps)
            frames.append(clean + rng.normal(0.0, config.noise, clean.shape) if config.noise > 0 else clean)
            labels.append(np.full(length, label, dtype=np.int64))
        joints = np.concatenate(frames, axis=1).astype(SEQUENCE_DTYPE)
        seq = SkeletonSequence(joints=joints, fps=config.fps, labels=np.concatenate(labels),
                               sequence_id=f"seq_{index:03d}")
        seq_path = out / f"{seq.sequence_id}.skl"
        label_path = out / f"{seq.sequence_id}.labels"
        write_sequence(seq, seq_path)
        write_labels(seq.labels, label_path)
        items.append(ManifestItem(seq=seq_path, labels=label_path))

    manifest = DatasetManifest(items=items, k_gt=config.classes, fps=config.fps, v=config.joints,
                               c=config.joint_dim, root=out)
    manifest.save(out / "manifest.json")
    logger.info(f"Generated {config.sequences} synthetic sequences with {config.classes} classes in {out}")
    return manifest
