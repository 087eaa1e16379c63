"""
Unsupervised segmentation evaluation.

Predicted cluster ids are mapped to ground-truth classes once for the whole
dataset (Hungarian matching on frame overlap). Scores then follow the usual
temporal action segmentation protocol: MoF over all frames, Edit as a
normalized Levenshtein similarity of segment label strings averaged per
video, segmental F1 at IoU thresholds with counts pooled over the dataset,
and the Jensen-Shannon distance between segment-length histograms as a
measure of bias toward long or short segments.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import jensenshannon

from .dataset import DatasetManifest, SkeletonSequence, read_labels
from .errors import DataValidationError, MissingPredictionError, ParseError

logger = logging.getLogger(__name__)

NO_MATCH = -1
LENGTH_BIN = 20
F1_THRESHOLDS = (0.10, 0.25, 0.50)
PREDICTION_SUFFIX = ".pred"


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class SegmentList:
    """Run-length form of a frame labeling"""
    segments: List[Segment]
    total: int

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "SegmentList":
        labels = np.asarray(labels)
        if labels.size == 0:
            return cls(segments=[], total=0)
        cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [len(labels)]])
        segments = [Segment(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]
        return cls(segments=segments, total=int(len(labels)))

    def to_labels(self) -> np.ndarray:
        self.check_tiling()
        out = np.empty(self.total, dtype=np.int64)
        for seg in self.segments:
            out[seg.start:seg.end] = seg.label
        return out

    def check_tiling(self) -> "SegmentList":
        position = 0
        for i, seg in enumerate(self.segments):
            if seg.start != position or seg.length < 1:
                raise DataValidationError(f"segment {i} does not continue at frame {position}", "segments")
            if i and seg.label == self.segments[i - 1].label:
                raise DataValidationError(f"segments {i - 1} and {i} share label {seg.label}", "segments")
            position = seg.end
        if position != self.total:
            raise DataValidationError(f"segments cover {position} of {self.total} frames", "segments")
        return self

    @property
    def labels(self) -> List[int]:
        return [seg.label for seg in self.segments]

    @property
    def lengths(self) -> List[int]:
        return [seg.length for seg in self.segments]

    def __len__(self) -> int:
        return len(self.segments)


@dataclass
class ClusterMapping:
    """Injective map from predicted cluster ids to ground-truth classes"""
    mapping: Dict[int, int]
    score: float = 0.0

    def __getitem__(self, cluster: int) -> int:
        return self.mapping.get(int(cluster), NO_MATCH)

    def apply(self, labels: Sequence[int]) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0 or not self.mapping:
            return np.full(labels.shape, NO_MATCH, dtype=np.int64)
        clusters = np.array(sorted(self.mapping), dtype=np.int64)
        classes = np.array([self.mapping[c] for c in clusters], dtype=np.int64)
        pos = np.minimum(np.searchsorted(clusters, labels), len(clusters) - 1)
        return np.where(clusters[pos] == labels, classes[pos], NO_MATCH)


# ---------------------------------------------------------------------------
# Frame labels from the model
# ---------------------------------------------------------------------------

def labels_from_patches(patch_indices: Sequence[int], num_frames: int, patch_size: int) -> np.ndarray:
    """Broadcast one id per patch over its frames, dropping padded frames"""
    return np.repeat(np.asarray(patch_indices, dtype=np.int64), patch_size)[:num_frames]


def predict_labels(seq: SkeletonSequence, state, trainer) -> np.ndarray:
    """
    Action-codebook id per original frame of `seq`.

    When training downsamples, each kept frame's label is repeated over the
    frames it stands for, so the output always has the sequence's length.
    """
    config = trainer.config
    stride = 1
    if config.target_fps is not None and config.target_fps != seq.fps:
        stride = seq.fps // config.target_fps
    kept = -(-seq.num_frames // stride)
    labels = labels_from_patches(trainer.infer_patch_indices(state, seq), kept, config.patch_size)
    return np.repeat(labels, stride)[:seq.num_frames]


# ---------------------------------------------------------------------------
# Matching and frame accuracy
# ---------------------------------------------------------------------------

def confusion_matrix(gt: Iterable[np.ndarray], pred: Iterable[np.ndarray], num_clusters: Optional[int] = None,
                     num_classes: Optional[int] = None) -> np.ndarray:
    """Frame counts, rows = predicted clusters, columns = ground-truth classes"""
    gt_all = np.concatenate([np.asarray(g, dtype=np.int64) for g in gt])
    pred_all = np.concatenate([np.asarray(p, dtype=np.int64) for p in pred])
    if gt_all.shape != pred_all.shape:
        raise DataValidationError(f"{len(pred_all)} predicted frames for {len(gt_all)} labeled frames", "labels")
    rows = num_clusters if num_clusters is not None else (int(pred_all.max()) + 1 if pred_all.size else 0)
    cols = num_classes if num_classes is not None else (int(gt_all.max()) + 1 if gt_all.size else 0)
    matrix = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(matrix, (pred_all, gt_all), 1)
    return matrix


def hungarian_match(confusion: np.ndarray) -> ClusterMapping:
    """Injective cluster -> class mapping maximizing matched frames"""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.size == 0:
        raise DataValidationError(f"cannot match an empty confusion matrix {confusion.shape}", "confusion")
    if np.any(confusion < 0):
        raise DataValidationError("confusion counts must be non-negative", "confusion")
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return ClusterMapping(mapping=mapping, score=float(confusion[rows, cols].sum()))


def match_clusters(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray]) -> ClusterMapping:
    """
    Hungarian mapping from the raw cluster ids in `pred` to the classes in `gt`.

    Ids are compacted to their distinct values first, so arbitrary large ids
    in a prediction file cost no more than small ones.
    """
    gt_all = np.concatenate([np.asarray(g, dtype=np.int64) for g in gt])
    pred_all = np.concatenate([np.asarray(p, dtype=np.int64) for p in pred])
    if gt_all.shape != pred_all.shape:
        raise DataValidationError(f"{len(pred_all)} predicted frames for {len(gt_all)} labeled frames", "labels")
    clusters, pred_rows = np.unique(pred_all, return_inverse=True)
    classes, gt_cols = np.unique(gt_all, return_inverse=True)
    compact = hungarian_match(confusion_matrix([gt_cols], [pred_rows], len(clusters), len(classes)))
    mapping = {int(clusters[r]): int(classes[c]) for r, c in compact.mapping.items()}
    return ClusterMapping(mapping=mapping, score=compact.score)


def mof(gt: Sequence[np.ndarray], mapped: Sequence[np.ndarray]) -> float:
    """Percentage of correctly labeled frames over all sequences"""
    correct = 0
    total = 0
    for g, p in zip(gt, mapped):
        g = np.asarray(g)
        p = np.asarray(p)
        if g.shape != p.shape:
            raise DataValidationError(f"label length mismatch: {len(p)} predicted vs {len(g)} true", "labels")
        correct += int((g == p).sum())
        total += len(g)
    if total == 0:
        raise DataValidationError("no frames to score", "labels")
    return 100.0 * correct / total


# ---------------------------------------------------------------------------
# Segmental scores
# ---------------------------------------------------------------------------

def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Unit-cost edit distance"""
    rows, cols = len(a), len(b)
    table = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    table[:, 0] = np.arange(rows + 1)
    table[0, :] = np.arange(cols + 1)
    for i in range(1, rows + 1):
        for j in range(1, cols + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table[i - 1, j - 1]
            else:
                table[i, j] = 1 + min(table[i - 1, j], table[i, j - 1], table[i - 1, j - 1])
    return int(table[rows, cols])


def edit_score(gt: SegmentList, pred: SegmentList) -> float:
    if not len(gt) and not len(pred):
        raise DataValidationError("edit score of two empty segmentations", "segments")
    distance = levenshtein(gt.labels, pred.labels)
    return 100.0 * (1.0 - distance / max(len(gt), len(pred)))


def f1_counts(gt: SegmentList, pred: SegmentList, tau: float) -> Tuple[int, int, int]:
    """
    (true positives, false positives, false negatives) at IoU threshold tau.

    Predictions are visited in temporal order; each one claims the unmatched
    same-label ground-truth segment of highest IoU if that IoU reaches tau.
    """
    matched = [False] * len(gt)
    tp = fp = 0
    for p in sorted(pred.segments, key=lambda s: s.start):
        best, best_iou = -1, 0.0
        for j, g in enumerate(gt.segments):
            if matched[j] or g.label != p.label:
                continue
            inter = min(p.end, g.end) - max(p.start, g.start)
            if inter <= 0:
                continue
            iou = inter / (max(p.end, g.end) - min(p.start, g.start))
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= tau:
            matched[best] = True
            tp += 1
        else:
            fp += 1
    return tp, fp, len(gt) - sum(matched)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 100.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def f1_at(gt: SegmentList, pred: SegmentList, tau: float) -> float:
    return f1_from_counts(*f1_counts(gt, pred, tau))


# ---------------------------------------------------------------------------
# Segment-length bias
# ---------------------------------------------------------------------------

def length_histograms(gt_lengths: Sequence[int], pred_lengths: Sequence[int],
                      bin_width: int = LENGTH_BIN) -> Tuple[np.ndarray, np.ndarray]:
    """Counts in bins [w*b, w*(b+1)) over a bin range shared by both inputs"""
    longest = max(list(gt_lengths) + list(pred_lengths) + [0])
    bins = longest // bin_width + 1
    gt_hist = np.bincount(np.asarray(gt_lengths, dtype=np.int64) // bin_width, minlength=bins)
    pred_hist = np.bincount(np.asarray(pred_lengths, dtype=np.int64) // bin_width, minlength=bins)
    return gt_hist, pred_hist


def js_distance(gt_lengths: Sequence[int], pred_lengths: Sequence[int], bin_width: int = LENGTH_BIN) -> float:
    """Jensen-Shannon distance (base 2, in [0, 1]) between two length histograms"""
    if not len(gt_lengths) or not len(pred_lengths):
        raise DataValidationError("segment-length distance needs segments on both sides", "segments")
    gt_hist, pred_hist = length_histograms(gt_lengths, pred_lengths, bin_width)
    distance = float(jensenshannon(gt_hist / gt_hist.sum(), pred_hist / pred_hist.sum(), base=2))
    return min(1.0, max(0.0, distance))


def jsd_bias(videos: Sequence[Tuple[SegmentList, SegmentList, Optional[str]]],
             bin_width: int = LENGTH_BIN) -> float:
    """
    Frame-weighted segment-length bias over activity groups, in [0, 100].

    Each video contributes its JS distance to its activity group's mean;
    group means are weighted by the group's ground-truth frame count.
    """
    if not videos:
        raise DataValidationError("segment-length bias needs at least one video", "videos")
    groups: Dict[Optional[str], List[float]] = {}
    frames: Dict[Optional[str], int] = {}
    for gt, pred, activity in videos:
        groups.setdefault(activity, []).append(js_distance(gt.lengths, pred.lengths, bin_width))
        frames[activity] = frames.get(activity, 0) + gt.total
    weight = sum(frames.values())
    if weight == 0:
        raise DataValidationError("segment-length bias over zero frames", "videos")
    score = sum(frames[a] * float(np.mean(groups[a])) for a in groups) / weight
    return 100.0 * score


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class SequenceScores:
    sequence_id: str
    frames: int
    mof: float
    edit: float
    f1_10: float
    f1_25: float
    f1_50: float
    jsd: float
    segments_gt: int
    segments_pred: int


@dataclass
class EvaluationReport:
    mof: float
    edit: float
    f1_10: float
    f1_25: float
    f1_50: float
    jsd: float
    segments_gt: float
    segments_pred: float
    mapping: Dict[int, int] = field(default_factory=dict)
    per_sequence: List[SequenceScores] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mapping"] = {str(k): v for k, v in sorted(self.mapping.items())}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        return (f"MoF {self.mof:.2f} | Edit {self.edit:.2f} | F1@10/25/50 {self.f1_10:.2f}/{self.f1_25:.2f}/"
                f"{self.f1_50:.2f} | JSD {self.jsd:.2f}")


def evaluate_labels(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray], ids: Optional[Sequence[str]] = None,
                    activities: Optional[Sequence[Optional[str]]] = None) -> EvaluationReport:
    """All metrics for parallel lists of ground-truth and raw predicted frame labels"""
    if not gt:
        raise DataValidationError("no labeled sequences to evaluate", "items")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(gt))]
    activities = list(activities) if activities is not None else [None] * len(gt)
    for sid, g, p in zip(ids, gt, pred):
        if len(g) != len(p):
            raise DataValidationError(f"label length mismatch for '{sid}': {len(p)} predicted, {len(g)} true",
                                      sid)
    if any(np.asarray(p).min(initial=0) < 0 for p in pred):
        raise DataValidationError("predicted cluster ids must be non-negative", "predictions")

    matching = match_clusters(gt, pred)
    mapped = [matching.apply(p) for p in pred]
    counts = {tau: np.zeros(3, dtype=np.int64) for tau in F1_THRESHOLDS}
    per_sequence: List[SequenceScores] = []
    videos = []
    for sid, activity, g, m, p in zip(ids, activities, gt, mapped, pred):
        gt_segments = SegmentList.from_labels(g)
        pred_segments = SegmentList.from_labels(m)
        # Lengths for the bias score come from the raw clusters, before mapping merges any runs
        raw_segments = SegmentList.from_labels(p)
        f1 = {}
        for tau in F1_THRESHOLDS:
            c = np.asarray(f1_counts(gt_segments, pred_segments, tau))
            counts[tau] += c
            f1[tau] = f1_from_counts(*c)
        videos.append((gt_segments, raw_segments, activity))
        per_sequence.append(SequenceScores(
            sequence_id=sid, frames=len(g), mof=mof([g], [m]), edit=edit_score(gt_segments, pred_segments),
            f1_10=f1[0.10], f1_25=f1[0.25], f1_50=f1[0.50],
            jsd=100.0 * js_distance(gt_segments.lengths, raw_segments.lengths),
            segments_gt=len(gt_segments), segments_pred=len(raw_segments),
        ))

    report = EvaluationReport(
        mof=mof(gt, mapped),
        edit=float(np.mean([s.edit for s in per_sequence])),
        f1_10=f1_from_counts(*counts[0.10]),
        f1_25=f1_from_counts(*counts[0.25]),
        f1_50=f1_from_counts(*counts[0.50]),
        jsd=jsd_bias(videos),
        segments_gt=float(np.mean([s.segments_gt for s in per_sequence])),
        segments_pred=float(np.mean([s.segments_pred for s in per_sequence])),
        mapping=matching.mapping,
        per_sequence=per_sequence,
    )
    return report


def evaluate(manifest: DatasetManifest, predictions: Dict[str, np.ndarray]) -> EvaluationReport:
    """Score predictions for every labeled sequence of the manifest"""
    gt, pred, ids, activities = [], [], [], []
    for item in manifest.items:
        if item.labels is None:
            logger.info(f"Skipping unlabeled sequence '{item.sequence_id}'")
            continue
        if item.sequence_id not in predictions:
            raise MissingPredictionError(item.sequence_id)
        gt.append(read_labels(item.labels))
        pred.append(np.asarray(predictions[item.sequence_id], dtype=np.int64))
        ids.append(item.sequence_id)
        activities.append(item.activity)
    report = evaluate_labels(gt, pred, ids, activities)
    logger.info(f"Evaluated {len(ids)} sequences: {report.summary()}")
    return report


def write_predictions(out_dir: Union[str, Path], sequence_id: str, labels: Sequence[int]) -> Path:
    path = Path(out_dir) / f"{sequence_id}{PREDICTION_SUFFIX}"
    path.write_text("".join(f"{int(x)}\n" for x in labels), encoding="utf-8")
    return path


def load_predictions(pred_dir: Union[str, Path], manifest: DatasetManifest) -> Dict[str, np.ndarray]:
    """Read <id>.pred for every labeled manifest item; a missing file names its sequence"""
    pred_dir = Path(pred_dir)
    predictions: Dict[str, np.ndarray] = {}
    for item in manifest.items:
        if item.labels is None:
            continue
        path = pred_dir / f"{item.sequence_id}{PREDICTION_SUFFIX}"
        if not path.is_file():
            raise MissingPredictionError(item.sequence_id)
        predictions[item.sequence_id] = read_labels(path)
    return predictions
