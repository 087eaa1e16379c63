"""
Training losses: commitment at each codebook level, inter-joint distance
reconstruction, patch timestamp regression, and their weighted sum.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .hvq import HierarchyOutput

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "commit_z", "commit_a", "spatial", "temporal", "total")


@dataclass
class LossWeights:
    lambda_commit: float = 1.0
    lambda_spat: float = 0.001
    lambda_temp: float = 0.2

    def validate(self) -> "LossWeights":
        for f in fields(self):
            value = getattr(self, f.name)
            if value < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0, got {value}", f"loss.{f.name}")
        return self


@dataclass
class LossReport:
    commit_z: float = 0.0
    commit_a: float = 0.0
    spatial: float = 0.0
    temporal: float = 0.0
    total: float = 0.0

    def __add__(self, other: "LossReport") -> "LossReport":
        return LossReport(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def scaled(self, factor: float) -> "LossReport":
        return LossReport(**{f.name: getattr(self, f.name) * factor for f in fields(self)})

    def recompute_total(self, weights: LossWeights) -> float:
        return total(self, weights)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([getattr(self, f.name) for f in fields(self)])))

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)

    def csv_row(self, step: int) -> str:
        # repr keeps every bit of the float, so reruns compare byte-for-byte
        return ",".join([str(step)] + [repr(float(getattr(self, name))) for name in CSV_COLUMNS[1:]])

    def __str__(self) -> str:
        return (f"total={self.total:.6g} commit_z={self.commit_z:.6g} commit_a={self.commit_a:.6g} "
                f"spatial={self.spatial:.6g} temporal={self.temporal:.6g}")


def commitment(inputs: Tensor, quantized: Union[Tensor, np.ndarray], weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Sum over patches of ||input - sg[quantized]||^2.

    `weights` (same shape as `inputs`) zeroes entries that belong to
    replicated padding frames.
    """
    q = quantized if isinstance(quantized, Tensor) else ad.constant(quantized, dtype=inputs.dtype)
    if q.shape != inputs.shape:
        raise ShapeError(f"commitment: inputs {inputs.shape} and quantized {q.shape} differ")
    return ad.sum_squares(ad.sub(inputs, ad.stop_gradient(q)), weights)


def commitment_terms(patches: Tensor, output: HierarchyOutput,
                     weights: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """
    (commit_z, commit_a) over the hierarchy.

    Level l commits its input (raw patches at level 0, the level below's
    quantized rows above that) to its own prototypes. The top level is
    commit_a; every lower level adds into commit_z. A flat hierarchy has a
    zero commit_a because its action level is its subaction level.
    """
    assignment = output.assignment
    terms: List[Tensor] = []
    for level, quantized in enumerate(assignment.quantized):
        inputs = patches if level == 0 else output.levels[level - 1]
        terms.append(commitment(inputs, quantized, weights))
    if len(terms) == 1:
        return terms[0], commitment(output.qz, assignment.qa, weights)
    commit_z = terms[0]
    for term in terms[1:-1]:
        commit_z = commit_z + term
    return commit_z, terms[-1]


def spatial_recon(target: Union[Tensor, np.ndarray], predicted: Tensor,
                  frame_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean over frames and ordered joint pairs (v, w), including v == w, of
    (||S_v - S_w||^2 - ||S^_v - S^_w||^2)^2.

    Both inputs are [N x C x T x V]; `frame_mask` [N x T] marks real frames,
    and masked-out frames leave both the sum and the normalizer.
    """
    target = ad.constant(target, dtype=predicted.dtype)
    if target.shape != predicted.shape:
        raise ShapeError(f"spatial_recon: target {target.shape} and prediction {predicted.shape} differ")
    n, _, t, v = predicted.shape
    reference = ad.pairwise_sq_dists(ad.stop_gradient(target))
    diff = ad.sub(ad.pairwise_sq_dists(predicted), reference)
    if frame_mask is None:
        return ad.sum_squares(diff) / float(n * t * v * v)
    mask = np.asarray(frame_mask, dtype=bool)
    if mask.shape != (n, t):
        raise ShapeError(f"spatial_recon: frame mask {mask.shape} does not match [N x T] = {(n, t)}")
    real = int(mask.sum())
    if real == 0:
        return ad.scale(ad.sum_squares(diff, np.zeros(diff.shape)), 0.0)
    weights = np.broadcast_to(mask[:, :, None, None], diff.shape).astype(predicted.dtype)
    return ad.sum_squares(diff, weights) / float(real * v * v)


def temporal_recon(target: Union[np.ndarray, Tensor], predicted: Tensor) -> Tensor:
    """Mean squared error between true and predicted patch timestamps [N x M]"""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=predicted.dtype)
    if target.shape != predicted.shape:
        raise ShapeError(f"temporal_recon: target {target.shape} and prediction {predicted.shape} differ")
    return ad.mse(predicted, target)


def total(parts: LossReport, weights: LossWeights) -> float:
    return (weights.lambda_commit * (parts.commit_z + parts.commit_a)
            + weights.lambda_spat * parts.spatial
            + weights.lambda_temp * parts.temporal)


def weighted_total(commit_z: Tensor, commit_a: Tensor, spatial: Tensor, temporal: Tensor,
                   weights: LossWeights) -> Tensor:
    """Differentiable weighted sum; zero-weighted terms are left out of the graph"""
    terms = []
    if weights.lambda_commit:
        terms.append(ad.scale(commit_z + commit_a, weights.lambda_commit))
    if weights.lambda_spat:
        terms.append(ad.scale(spatial, weights.lambda_spat))
    if weights.lambda_temp:
        terms.append(ad.scale(temporal, weights.lambda_temp))
    if not terms:
        return ad.constant(np.zeros((), dtype=commit_z.dtype))
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


def make_report(commit_z: Tensor, commit_a: Tensor, spatial: Tensor, temporal: Tensor,
                weights: LossWeights) -> LossReport:
    report = LossReport(commit_z=commit_z.item(), commit_a=commit_a.item(), spatial=spatial.item(),
                        temporal=temporal.item())
    report.total = total(report, weights)
    return report
