"""
SVG figures for segmentation results: segment-length histograms and
per-sequence timelines, each written next to a CSV of the numbers drawn.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

from .dataset import DatasetManifest, read_labels
from .errors import MissingPredictionError
from .metrics import LENGTH_BIN, NO_MATCH, SegmentList, length_histograms, match_clusters

logger = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22",
           "#17becf", "#393b79", "#637939", "#8c6d31"]
UNMATCHED_COLOR = "#7f7f7f"
GT_COLOR = "#1f77b4"
PRED_COLOR = "#ff7f0e"
FONT = "DejaVu Sans, Arial"


def svg_rect(x, y, w, h, fill, stroke="none", sw=0.0):
    return (f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{sw}" />')


def svg_line(x1, y1, x2, y2, stroke="#444", sw=1.0):
    return f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{sw}" />'


def svg_text(x, y, s, size=12, anchor="middle"):
    return (f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{anchor}" font-family="{FONT}" '
            f'font-size="{size}">{escape(str(s))}</text>')


def _document(width: float, height: float, body: List[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}">'
    return "\n".join([head] + body + ["</svg>"]) + "\n"


def class_color(label: int) -> str:
    return UNMATCHED_COLOR if label == NO_MATCH else PALETTE[label % len(PALETTE)]


def histogram_svg(gt_counts: Sequence[int], pred_counts: Sequence[int], bin_width: int = LENGTH_BIN,
                  title: str = "Segment lengths", height: float = 320.0) -> str:
    """Ground-truth and predicted counts side by side per length bin"""
    pad_l, pad_r, pad_t, pad_b = 56.0, 24.0, 40.0, 48.0
    bar_w, gap = 12.0, 10.0
    bins = len(gt_counts)
    width = pad_l + bins * (2 * bar_w + gap) + pad_r
    peak = max(list(gt_counts) + list(pred_counts) + [1])
    scale = (height - pad_t - pad_b) / peak
    base = height - pad_b

    body = [svg_text(width / 2, 24, title, size=14),
            svg_line(pad_l, base, width - pad_r, base),
            svg_line(pad_l, base, pad_l, pad_t),
            svg_text(pad_l - 8, pad_t + 4, peak, size=10, anchor="end"),
            svg_text(pad_l - 8, base, 0, size=10, anchor="end")]
    for b in range(bins):
        x = pad_l + gap / 2 + b * (2 * bar_w + gap)
        for offset, count, color in ((0.0, gt_counts[b], GT_COLOR), (bar_w, pred_counts[b], PRED_COLOR)):
            h = count * scale
            body.append(svg_rect(x + offset, base - h, bar_w, h, color))
        if b % max(1, bins // 10) == 0:
            body.append(svg_text(x + bar_w, base + 14, b * bin_width, size=10))
    body.append(svg_text(width / 2, height - 12, f"length (frames, {bin_width}-frame bins)", size=11))
    body.append(svg_rect(width - pad_r - 120, pad_t - 20, 10, 10, GT_COLOR))
    body.append(svg_text(width - pad_r - 106, pad_t - 11, "ground truth", size=10, anchor="start"))
    body.append(svg_rect(width - pad_r - 120, pad_t - 6, 10, 10, PRED_COLOR))
    body.append(svg_text(width - pad_r - 106, pad_t + 3, "predicted", size=10, anchor="start"))
    return _document(width, height, body)


def timeline_bands(segments: SegmentList, band_width: float, x0: float = 0.0) -> List[tuple]:
    """(x, width, label) per segment, widths proportional to segment length"""
    if segments.total == 0:
        return []
    scale = band_width / segments.total
    return [(x0 + seg.start * scale, seg.length * scale, seg.label) for seg in segments.segments]


def timeline_svg(gt: SegmentList, pred: SegmentList, title: str = "", band_width: float = 800.0,
                 band_height: float = 28.0) -> str:
    """Ground-truth band above the prediction band, one color per class"""
    pad_l, pad_r, pad_t = 96.0, 16.0, 32.0
    width = pad_l + band_width + pad_r
    height = pad_t + 2 * band_height + 3 * 12.0 + 16.0
    body = [svg_text(width / 2, 20, title, size=13)]
    for row, (name, segments) in enumerate((("ground truth", gt), ("predicted", pred))):
        y = pad_t + row * (band_height + 12.0)
        body.append(svg_text(pad_l - 8, y + band_height * 0.65, name, size=11, anchor="end"))
        for x, w, label in timeline_bands(segments, band_width, pad_l):
            body.append(svg_rect(x, y, w, band_height, class_color(label)))
    body.append(svg_text(pad_l + band_width, height - 6, f"{gt.total} frames", size=10, anchor="end"))
    return _document(width, height, body)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def plot_dataset(manifest: DatasetManifest, predictions: Dict[str, np.ndarray],
                 out_dir: Union[str, Path], bin_width: int = LENGTH_BIN) -> List[Path]:
    """
    Write the dataset's length histogram and one timeline per labeled
    sequence, each as SVG plus CSV. Predicted ids are shown after the
    dataset-wide matching; histogram lengths use the raw predicted runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = [item for item in manifest.items if item.labels is not None]
    for item in items:
        if item.sequence_id not in predictions:
            raise MissingPredictionError(item.sequence_id)
    gt = [read_labels(item.labels) for item in items]
    pred = [np.asarray(predictions[item.sequence_id], dtype=np.int64) for item in items]
    matching = match_clusters(gt, pred)

    written: List[Path] = []
    gt_lengths: List[int] = []
    pred_lengths: List[int] = []
    for item, g, p in zip(items, gt, pred):
        gt_segments = SegmentList.from_labels(g)
        mapped_segments = SegmentList.from_labels(matching.apply(p))
        gt_lengths.extend(gt_segments.lengths)
        pred_lengths.extend(SegmentList.from_labels(p).lengths)

        svg_path = out / f"timeline_{item.sequence_id}.svg"
        svg_path.write_text(timeline_svg(gt_segments, mapped_segments, title=item.sequence_id), encoding="utf-8")
        csv_path = out / f"timeline_{item.sequence_id}.csv"
        rows = [("gt", s.label, s.start, s.length) for s in gt_segments.segments]
        rows += [("pred", s.label, s.start, s.length) for s in mapped_segments.segments]
        write_csv(csv_path, ("band", "label", "start", "length"), rows)
        written += [svg_path, csv_path]

    gt_hist, pred_hist = length_histograms(gt_lengths, pred_lengths, bin_width)
    hist_svg = out / "length_histogram.svg"
    hist_svg.write_text(histogram_svg(gt_hist, pred_hist, bin_width), encoding="utf-8")
    hist_csv = out / "length_histogram.csv"
    write_csv(hist_csv, ("bin_start", "bin_end", "gt_count", "pred_count"),
              [(b * bin_width, (b + 1) * bin_width, int(gt_hist[b]), int(pred_hist[b])) for b in range(len(gt_hist))])
    written += [hist_svg, hist_csv]
    logger.info(f"Wrote {len(written)} plot files to {out}")
    return written
