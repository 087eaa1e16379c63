"""
Hierarchical patch vector quantization.

Patches are snapped to their nearest prototype in a subaction codebook; the
chosen prototypes are snapped again to an action codebook with fewer entries.
Codebooks are never trained by gradients: each batch re-estimates them with an
exponential moving average of their assigned inputs, and prototypes that
stay underused for several consecutive batches are re-seeded from the batch.

With one level the hierarchy degenerates to a flat codebook of K entries; a
third level adds a finer codebook of alpha^2 K entries below the usual two.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataValidationError, ShapeError
from .serialization import pack_arrays, unpack_arrays

logger = logging.getLogger(__name__)

EMA_GUARD = 1e-8
INIT_STD = 0.02
EMA_MODES = ("literal", "normalized")

# Upper bound on rows x prototypes x dim elements materialized per distance chunk
_DISTANCE_BLOCK = 1 << 22


@dataclass
class Codebook:
    """Prototypes [size x dim] with their moving-average usage state"""
    prototypes: np.ndarray
    ema_count: np.ndarray
    ema_sum: np.ndarray
    stale_batches: np.ndarray

    @classmethod
    def from_prototypes(cls, prototypes: np.ndarray, count: float = 1.0) -> "Codebook":
        prototypes = np.array(prototypes, copy=True)
        if prototypes.ndim == 1:
            prototypes = prototypes[:, None]
        counts = np.full(len(prototypes), count, dtype=np.float64)
        return cls(prototypes=prototypes, ema_count=counts,
                   ema_sum=prototypes * counts[:, None].astype(prototypes.dtype),
                   stale_batches=np.zeros(len(prototypes), dtype=np.int64))

    @property
    def size(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[1])

    def validate(self) -> "Codebook":
        if self.prototypes.ndim != 2 or self.size < 1:
            raise DataValidationError(f"codebook needs at least one prototype, got shape {self.prototypes.shape}",
                                      "prototypes")
        if not np.all(np.isfinite(self.prototypes)):
            raise DataValidationError("codebook prototypes contain NaN or Inf", "prototypes")
        if np.any(self.ema_count < 0):
            raise DataValidationError("codebook ema_count must be non-negative", "ema_count")
        if self.ema_count.shape != (self.size,) or self.stale_batches.shape != (self.size,):
            raise DataValidationError("codebook counters do not match the prototype count", "ema_count")
        if self.ema_sum.shape != self.prototypes.shape:
            raise DataValidationError("codebook ema_sum does not match the prototype shape", "ema_sum")
        return self

    def to_arrays(self, prefix: str = "") -> dict:
        return {
            f"{prefix}prototypes": self.prototypes,
            f"{prefix}ema_count": self.ema_count,
            f"{prefix}ema_sum": self.ema_sum,
            f"{prefix}stale_batches": self.stale_batches,
        }

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "") -> "Codebook":
        return cls(prototypes=arrays[f"{prefix}prototypes"], ema_count=arrays[f"{prefix}ema_count"],
                   ema_sum=arrays[f"{prefix}ema_sum"], stale_batches=arrays[f"{prefix}stale_batches"]).validate()

    def to_bytes(self) -> bytes:
        return pack_arrays(self.to_arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        return cls.from_arrays(unpack_arrays(data))


@dataclass
class HvqConfig:
    num_actions: Optional[int] = None  # K; None means "take k_gt from the dataset"
    alpha: int = 2
    beta: float = 0.5             # EMA decay
    nu_z: float = 3.0             # usage threshold below the top level
    nu_a: float = 1.0             # usage threshold at the top level
    stale_patience: int = 5
    levels: int = 2
    ema_mode: str = "literal"

    def validate(self) -> "HvqConfig":
        if self.num_actions is not None and self.num_actions < 1:
            raise ConfigError(f"hvq.num_actions must be >= 1, got {self.num_actions}", "hvq.num_actions")
        if self.alpha < 1:
            raise ConfigError(f"hvq.alpha must be >= 1, got {self.alpha}", "hvq.alpha")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"hvq.beta must be in (0, 1), got {self.beta}", "hvq.beta")
        if self.nu_z < 0 or self.nu_a < 0:
            raise ConfigError("hvq usage thresholds must be non-negative", "hvq.nu_z")
        if self.stale_patience < 1:
            raise ConfigError(f"hvq.stale_patience must be >= 1, got {self.stale_patience}", "hvq.stale_patience")
        if self.levels not in (1, 2, 3):
            raise ConfigError(f"hvq.levels must be 1, 2 or 3, got {self.levels}", "hvq.levels")
        if self.ema_mode not in EMA_MODES:
            raise ConfigError(f"hvq.ema_mode must be one of {EMA_MODES}, got '{self.ema_mode}'", "hvq.ema_mode")
        return self

    @property
    def level_sizes(self) -> List[int]:
        """Codebook sizes, finest level first; the last entry is always K"""
        if self.num_actions is None:
            raise ConfigError("hvq.num_actions is unresolved", "hvq.num_actions")
        return [self.alpha ** (self.levels - 1 - level) * self.num_actions for level in range(self.levels)]

    def threshold(self, level: int) -> float:
        return self.nu_a if level == self.levels - 1 else self.nu_z


@dataclass
class Assignment:
    """
    Per-level nearest-prototype indices and the quantized rows they select.

    Level 0 is the finest codebook. The subaction level (Z) is the one just
    below the top; with a single level Z and A are the same codebook.
    """
    indices: List[np.ndarray] = field(default_factory=list)
    quantized: List[np.ndarray] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.indices)

    @property
    def z_level(self) -> int:
        return max(0, self.levels - 2)

    @property
    def level1(self) -> np.ndarray:
        return self.indices[self.z_level]

    @property
    def level2(self) -> np.ndarray:
        return self.indices[-1]

    @property
    def qz(self) -> np.ndarray:
        return self.quantized[self.z_level]

    @property
    def qa(self) -> np.ndarray:
        return self.quantized[-1]


@dataclass
class CodebookUsage:
    level: int
    size: int
    used: int
    perplexity: float
    replaced: int = 0


def nearest_prototype(inputs: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """
    Index of the closest prototype (Euclidean) for every input row.

    Distances come from explicit differences rather than the expanded
    quadratic form so exact matches score exactly zero; np.argmin keeps the
    lowest index on ties.
    """
    if prototypes.ndim != 2 or prototypes.shape[0] == 0:
        raise ShapeError("cannot quantize against an empty codebook")
    if inputs.ndim != 2 or inputs.shape[1] != prototypes.shape[1]:
        raise ShapeError(f"inputs {inputs.shape} do not match prototype dimension {prototypes.shape[1]}")
    n = inputs.shape[0]
    indices = np.empty(n, dtype=np.int64)
    chunk = max(1, _DISTANCE_BLOCK // max(1, prototypes.size))
    for start in range(0, n, chunk):
        block = inputs[start:start + chunk]
        diff = block[:, None, :] - prototypes[None, :, :]
        indices[start:start + chunk] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return indices


def quantize_level1(patches: np.ndarray, codebook: Codebook) -> Assignment:
    indices = nearest_prototype(patches, codebook.prototypes)
    return Assignment(indices=[indices], quantized=[codebook.prototypes[indices]])


def quantize_next(assignment: Assignment, codebook: Codebook) -> Assignment:
    """Quantize the previous level's prototypes (not the raw patches) against the next codebook"""
    indices = nearest_prototype(assignment.quantized[-1], codebook.prototypes)
    return Assignment(indices=assignment.indices + [indices],
                      quantized=assignment.quantized + [codebook.prototypes[indices]])


quantize_level2 = quantize_next


def ema_update(codebook: Codebook, inputs: np.ndarray, indices: np.ndarray, beta: float,
               mode: str = "literal") -> Codebook:
    """
    One moving-average step over a batch.

    N_new = beta * N + (1 - beta) * count. In "literal" mode the prototype
    becomes (beta * prototype + (1 - beta) * sum of assigned inputs) / N_new;
    "normalized" mode divides the running ema_sum instead. Prototypes whose
    N_new falls under 1e-8 keep their value.
    """
    if mode not in EMA_MODES:
        raise ConfigError(f"unknown EMA mode '{mode}'", "hvq.ema_mode")
    size = codebook.size
    counts = np.bincount(indices, minlength=size).astype(np.float64)
    sums = np.zeros_like(codebook.prototypes, dtype=np.float64)
    if len(indices):
        np.add.at(sums, indices, inputs)

    new_count = beta * codebook.ema_count + (1.0 - beta) * counts
    new_sum = beta * codebook.ema_sum + (1.0 - beta) * sums
    numerator = new_sum if mode == "normalized" else beta * codebook.prototypes + (1.0 - beta) * sums
    live = new_count >= EMA_GUARD
    prototypes = codebook.prototypes.copy()
    prototypes[live] = (numerator[live] / new_count[live, None]).astype(prototypes.dtype)
    return Codebook(prototypes=prototypes, ema_count=new_count, ema_sum=new_sum.astype(codebook.ema_sum.dtype),
                    stale_batches=codebook.stale_batches.copy())


def replace_dead(codebook: Codebook, inputs: np.ndarray, threshold: float, patience: int,
                 rng: np.random.Generator) -> Tuple[Codebook, List[int]]:
    """
    Re-seed prototypes whose usage stayed below `threshold` for `patience`
    consecutive batches with uniformly drawn rows of `inputs`.

    Replaced prototypes restart with ema_count 1. Returns the updated
    codebook and the replaced indices in ascending order.
    """
    if len(inputs) == 0:
        raise DataValidationError("dead-code replacement needs a non-empty batch", "inputs")
    below = codebook.ema_count < threshold
    stale = np.where(below, codebook.stale_batches + 1, 0)
    dead = np.flatnonzero(stale >= patience)

    prototypes = codebook.prototypes.copy()
    counts = codebook.ema_count.copy()
    sums = codebook.ema_sum.copy()
    for j in dead:
        pick = int(rng.integers(len(inputs)))
        prototypes[j] = inputs[pick]
        counts[j] = 1.0
        sums[j] = prototypes[j]
        stale[j] = 0
    return Codebook(prototypes, counts, sums, stale.astype(np.int64)), [int(j) for j in dead]


def init_codebook(inputs: np.ndarray, size: int, rng: np.random.Generator, dtype=np.float64) -> Codebook:
    """Prototypes drawn without replacement from `inputs`; Gaussian(0, 0.02) fills any shortfall"""
    dim = inputs.shape[1]
    take = min(size, len(inputs))
    chosen = rng.choice(len(inputs), size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
    rows = [inputs[chosen].astype(dtype)]
    if take < size:
        rows.append(rng.normal(0.0, INIT_STD, size=(size - take, dim)).astype(dtype))
    return Codebook.from_prototypes(np.concatenate(rows, axis=0))


def usage_of(indices: np.ndarray, size: int) -> Tuple[int, float]:
    """Number of prototypes used and the perplexity of the assignment histogram"""
    if len(indices) == 0:
        return 0, 0.0
    counts = np.bincount(indices, minlength=size)
    probs = counts[counts > 0] / len(indices)
    return int((counts > 0).sum()), float(math.exp(-(probs * np.log(probs)).sum()))


@dataclass
class HierarchyOutput:
    """Straight-through quantized tensors per level plus the hard assignment"""
    levels: List[Tensor]
    assignment: Assignment

    @property
    def qz(self) -> Tensor:
        return self.levels[self.assignment.z_level]

    @property
    def qa(self) -> Tensor:
        return self.levels[-1]

    def __iter__(self) -> Iterator:
        return iter((self.qz, self.qa, self.assignment))


class CodebookHierarchy:
    """The stack of codebooks, finest first, together with their update rules"""

    def __init__(self, config: HvqConfig, codebooks: Optional[List[Codebook]] = None):
        self.config = config.validate()
        self.codebooks: List[Codebook] = list(codebooks or [])
        self.logger = logging.getLogger(__name__)
        if self.codebooks:
            self._check_sizes()

    def _check_sizes(self):
        sizes = [cb.size for cb in self.codebooks]
        if sizes != self.config.level_sizes:
            raise ConfigError(f"codebook sizes {sizes} do not match configured {self.config.level_sizes}",
                              "hvq.levels")

    @property
    def initialized(self) -> bool:
        return bool(self.codebooks)

    @property
    def levels(self) -> int:
        return self.config.levels

    def init_from(self, patches: np.ndarray, rng: np.random.Generator):
        """Seed level 0 from batch patches and each higher level from the level below's prototypes"""
        sizes = self.config.level_sizes
        self.codebooks = [init_codebook(patches, sizes[0], rng, patches.dtype)]
        for size in sizes[1:]:
            below = self.codebooks[-1].prototypes
            self.codebooks.append(init_codebook(below, size, rng, patches.dtype))
        self.logger.info(f"Initialized codebooks of sizes {sizes} from {len(patches)} patches")

    def quantize(self, patches: np.ndarray) -> Assignment:
        if not self.initialized:
            raise DataValidationError("codebooks are not initialized", "codebooks")
        assignment = quantize_level1(patches, self.codebooks[0])
        for codebook in self.codebooks[1:]:
            assignment = quantize_next(assignment, codebook)
        return assignment

    def update(self, patches: np.ndarray, assignment: Assignment, rng: np.random.Generator) -> List[CodebookUsage]:
        """EMA re-estimation then dead-code replacement at every level, finest first"""
        usage = []
        for level, codebook in enumerate(self.codebooks):
            inputs = patches if level == 0 else assignment.quantized[level - 1]
            indices = assignment.indices[level]
            updated = ema_update(codebook, inputs, indices, self.config.beta, self.config.ema_mode)
            updated, replaced = replace_dead(updated, inputs, self.config.threshold(level),
                                             self.config.stale_patience, rng)
            if replaced:
                self.logger.debug(f"Level {level}: replaced dead prototypes {replaced}")
            self.codebooks[level] = updated
            used, perplexity = usage_of(indices, codebook.size)
            usage.append(CodebookUsage(level=level, size=codebook.size, used=used, perplexity=perplexity,
                                       replaced=len(replaced)))
        return usage


def quantize_hierarchy(patches: Tensor, hierarchy: CodebookHierarchy, assignment: Optional[Assignment] = None,
                       anchor: Optional[np.ndarray] = None) -> HierarchyOutput:
    """
    Quantize flattened patches [rows x P*V*D] through every level.

    Each level's output carries its prototypes forward and routes gradients
    straight through to `patches`. Passing a precomputed `assignment` (and the
    patch values it was taken at as `anchor`) freezes the discrete choice.
    """
    if patches.ndim != 2:
        raise ShapeError(f"quantize_hierarchy: expected [rows x dim], got {patches.shape}")
    if assignment is None:
        assignment = hierarchy.quantize(patches.data)
    elif assignment.levels != hierarchy.levels:
        raise ShapeError(f"assignment has {assignment.levels} levels, hierarchy {hierarchy.levels}")
    outputs = [ad.straight_through(patches, q, anchor) for q in assignment.quantized]
    return HierarchyOutput(levels=outputs, assignment=assignment)
