"""
Training loop for the hierarchical spatiotemporal quantization model.

A step runs every sequence of the batch through encode -> patchify ->
quantize -> decode on its own (sequences differ in length), accumulates the
gradients of all of them, applies one Adam update to the network parameters,
then re-estimates the codebooks from the batch's patches and replaces dead
prototypes. The whole run is a deterministic function of the configuration,
the data and the seed.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import SkeletonSequence, make_timestamps, prepare_sequence
from .errors import ConfigError, NumericError, ParseError
from .hvq import Assignment, CodebookHierarchy, CodebookUsage, HierarchyOutput, HvqConfig, quantize_hierarchy
from .losses import LossReport, LossWeights, commitment_terms, make_report, spatial_recon, temporal_recon, \
    weighted_total
from .model import EncoderConfig, PatchGrid, SkeletonModel, TemporalDecoderConfig, depatchify, patchify

logger = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}


class Routing(Enum):
    """Which quantized representation feeds a decoder"""
    QZ = "QZ"
    QA = "QA"
    BOTH = "both"

    @classmethod
    def parse(cls, value: Union[str, "Routing"], key: str) -> "Routing":
        if isinstance(value, Routing):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ConfigError(f"{key} must be one of {[m.value for m in cls]}, got '{value}'", key)


# Preset values are applied first; keys given explicitly in a config override them
PRESETS: Dict[str, Dict[str, Any]] = {
    "spatiotemporal": {},
    "hierarchical": {"hvq": {"levels": 2}, "loss": {"lambda_temp": 0.0}},
    "flat": {"hvq": {"levels": 1}, "loss": {"lambda_temp": 0.0}},
    # per-dataset settings: one-second patches at the rate training sees
    "hugadb": {"patch_size": 60, "root_joint": None, "loss": {"lambda_temp": 0.2}},
    "lara": {"patch_size": 50, "target_fps": 50, "loss": {"lambda_temp": 0.2}},
    "babel": {"patch_size": 30, "target_fps": 30, "loss": {"lambda_temp": 0.02}},
}

_NULLABLE = {"root_joint", "target_fps", "num_actions"}

_SECTIONS = {
    "encoder": EncoderConfig,
    "temporal_decoder": TemporalDecoderConfig,
    "hvq": HvqConfig,
    "loss": LossWeights,
}


@dataclass
class TrainConfig:
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    patch_size: int = 10
    seed: int = 0
    shuffle: bool = True
    root_joint: Optional[int] = 0       # None disables root centering
    target_fps: Optional[int] = None
    precision: str = "float64"
    preset: str = "spatiotemporal"
    spatial_input: Routing = Routing.QA
    temporal_input: Routing = Routing.QZ
    loss: LossWeights = field(default_factory=LossWeights)
    hvq: HvqConfig = field(default_factory=HvqConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    temporal_decoder: TemporalDecoderConfig = field(default_factory=TemporalDecoderConfig)

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}", "lr")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}", "betas")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}", "eps")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}", "epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", "batch_size")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}", "patch_size")
        if self.root_joint is not None and self.root_joint < 0:
            raise ConfigError(f"root_joint must be >= 0, got {self.root_joint}", "root_joint")
        if self.target_fps is not None and self.target_fps < 1:
            raise ConfigError(f"target_fps must be >= 1, got {self.target_fps}", "target_fps")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {list(PRECISIONS)}, got '{self.precision}'", "precision")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {list(PRESETS)}, got '{self.preset}'", "preset")
        self.spatial_input = Routing.parse(self.spatial_input, "spatial_input")
        self.temporal_input = Routing.parse(self.temporal_input, "temporal_input")
        self.loss.validate()
        self.hvq.validate()
        self.encoder.validate()
        self.temporal_decoder.validate()
        return self

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(PRECISIONS[self.precision])

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        preset = data.get("preset", "spatiotemporal")
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {list(PRESETS)}, got '{preset}'", "preset")
        merged = _deep_merge(PRESETS[preset], data)
        return _build(cls, merged, "").validate()

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["spatial_input"] = self.spatial_input.value
        out["temporal_input"] = self.temporal_input.value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path: Union[str, Path]) -> TrainConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid config JSON: {e.msg}", str(path), line=e.lineno, offset=e.pos)
    return TrainConfig.from_dict(data)


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _build(cls, data: Dict[str, Any], prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key '{dotted}'", dotted)
        section = _SECTIONS.get(key) if cls is TrainConfig else None
        if section is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' must be an object", dotted)
            kwargs[key] = _build(section, value, f"{dotted}.")
        else:
            kwargs[key] = _coerce(value, getattr(cls(), key), dotted)
    return cls(**kwargs)


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Check a JSON value against the type of the field's default"""
    if value is None and key.rsplit(".", 1)[-1] in _NULLABLE:
        return None
    if isinstance(default, Routing):
        return Routing.parse(value, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be true or false, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{key}' must be a number, got {value!r}", key)
        return float(value)
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"'{key}' must be a list of numbers, got {value!r}", key)
        return tuple(value) if isinstance(default, tuple) else list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{key}' must be a string, got {value!r}", key)
        return value
    # Optional fields default to None: accept null or an integer
    if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"'{key}' must be an integer or null, got {value!r}", key)
    return value


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
                lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """
    One bias-corrected Adam step. Missing gradients count as zero.

    Parameter arrays are replaced, not written into, so arrays handed out
    earlier (for example to a checkpoint writer) keep their values.
    """
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# State and step records
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    config: TrainConfig
    model: SkeletonModel
    hierarchy: CodebookHierarchy
    optimizer: AdamState
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0

    @property
    def joint_dim(self) -> int:
        return self.model.joint_dim

    @property
    def num_joints(self) -> int:
        return self.model.num_joints


@dataclass
class TrainStepInfo:
    step: int
    sequences: int
    frames: int
    usage: List[CodebookUsage] = field(default_factory=list)

    def usage_summary(self) -> str:
        return " ".join(f"L{u.level}:{u.used}/{u.size}(ppl {u.perplexity:.2f})" for u in self.usage)


@dataclass
class FrozenQuantization:
    """A fixed assignment and the patch values it was computed at"""
    assignment: Assignment
    anchor: np.ndarray


@dataclass
class ForwardResult:
    loss: Tensor
    commit_z: Tensor
    commit_a: Tensor
    spatial: Tensor
    temporal: Tensor
    grid: PatchGrid
    patches: Tensor
    output: HierarchyOutput
    reconstruction: Tensor
    timestamps: Tensor


def _route(output: HierarchyOutput, routing: Routing) -> Tensor:
    if routing is Routing.QZ:
        return output.qz
    if routing is Routing.QA:
        return output.qa
    return ad.scale(output.qz + output.qa, 0.5)


def _merge_assignments(parts: Sequence[Assignment]) -> Assignment:
    levels = parts[0].levels
    return Assignment(
        indices=[np.concatenate([a.indices[l] for a in parts]) for l in range(levels)],
        quantized=[np.concatenate([a.quantized[l] for a in parts], axis=0) for l in range(levels)],
    )


class Trainer:
    """Owns the training procedure; all mutable training state lives in ModelState"""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        self.logger = logging.getLogger(__name__)

    def init_state(self, joint_dim: int, num_joints: int, k_gt: Optional[int] = None) -> ModelState:
        config = copy.deepcopy(self.config)
        if config.hvq.num_actions is None:
            if k_gt is None:
                raise ConfigError("hvq.num_actions is not set and the dataset gives no k_gt", "hvq.num_actions")
            config.hvq.num_actions = k_gt
            self.logger.info(f"Using K={k_gt} actions from the dataset")
        self.config = config
        rng = np.random.default_rng(config.seed)
        model = SkeletonModel(joint_dim, num_joints, config.patch_size, config.encoder, config.temporal_decoder,
                              rng=rng, dtype=config.dtype)
        return ModelState(config=config, model=model, hierarchy=CodebookHierarchy(config.hvq),
                          optimizer=AdamState(), rng=rng)

    def prepare(self, seq: SkeletonSequence) -> np.ndarray:
        """Normalized joints of one sequence as a [1 x C x T x V] array in training precision"""
        prepared = prepare_sequence(seq, self.config.root_joint, self.config.target_fps)
        return prepared.joints.astype(self.config.dtype)[None]

    def _encode_patches(self, state: ModelState, skeletons: Tensor,
                        rng: Optional[np.random.Generator]) -> Tuple[PatchGrid, Tensor]:
        grid = patchify(state.model.encode(skeletons, rng), self.config.patch_size)
        return grid, grid.flat()

    def compute_losses(self, state: ModelState, skeletons: np.ndarray, frozen: Optional[FrozenQuantization] = None,
                       rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Forward pass and every loss term for one [1 x C x T x V] sequence"""
        config = self.config
        source = ad.constant(skeletons, dtype=config.dtype)
        grid, patches = self._encode_patches(state, source, rng)
        if frozen is None:
            output = quantize_hierarchy(patches, state.hierarchy)
        else:
            output = quantize_hierarchy(patches, state.hierarchy, frozen.assignment, frozen.anchor)

        shape = grid.patches.shape
        weights = np.broadcast_to(grid.real_frames()[..., None, None], shape).reshape(patches.shape)
        weights = weights.astype(config.dtype)
        commit_z, commit_a = commitment_terms(patches, output, weights)

        spatial_in = PatchGrid(ad.reshape(_route(output, config.spatial_input), shape), grid.lengths,
                               grid.pad_mask, grid.patch_size)
        reconstruction = state.model.decode_spatial(depatchify(spatial_in), rng)
        spatial = spatial_recon(skeletons, reconstruction)

        predicted = state.model.decode_temporal(ad.reshape(_route(output, config.temporal_input), shape))
        target = make_timestamps(grid.lengths[0], config.patch_size).values[None].astype(config.dtype)
        temporal = temporal_recon(target, predicted)

        loss = weighted_total(commit_z, commit_a, spatial, temporal, config.loss)
        return ForwardResult(loss=loss, commit_z=commit_z, commit_a=commit_a, spatial=spatial, temporal=temporal,
                             grid=grid, patches=patches, output=output, reconstruction=reconstruction,
                             timestamps=predicted)

    def ensure_codebooks(self, state: ModelState, batch: Sequence[np.ndarray]):
        if state.hierarchy.initialized:
            return
        with ad.no_grad():
            rows = [self._encode_patches(state, ad.constant(s), None)[1].data for s in batch]
        state.hierarchy.init_from(np.concatenate(rows, axis=0), state.rng)

    def train_step(self, state: ModelState, batch: Sequence[np.ndarray]) -> Tuple[ModelState, LossReport,
                                                                                 TrainStepInfo]:
        if not batch:
            raise ConfigError("train_step needs a non-empty batch", "batch_size")
        self.ensure_codebooks(state, batch)
        state.model.zero_grad()
        dropout_rng = state.rng if self.config.encoder.dropout > 0 else None

        report = LossReport()
        rows: List[np.ndarray] = []
        assignments: List[Assignment] = []
        frames = 0
        for position, skeletons in enumerate(batch):
            result = self.compute_losses(state, skeletons, rng=dropout_rng)
            part = make_report(result.commit_z, result.commit_a, result.spatial, result.temporal, self.config.loss)
            if not part.is_finite():
                raise NumericError(f"non-finite loss at step {state.step + 1}, batch position {position}: {part}")
            ad.backward(result.loss)
            report = report + part
            rows.append(result.patches.data)
            assignments.append(result.output.assignment)
            frames += result.grid.lengths[0]

        params = state.model.named_parameters()
        adam_update(params, {name: p.grad for name, p in params.items()}, state.optimizer, self.config.lr,
                    self.config.betas, self.config.eps)
        usage = state.hierarchy.update(np.concatenate(rows, axis=0), _merge_assignments(assignments), state.rng)
        state.step += 1
        info = TrainStepInfo(step=state.step, sequences=len(batch), frames=frames, usage=usage)
        self.logger.debug(f"Step {state.step}: {report} {info.usage_summary()}")
        return state, report, info

    def fit(self, state: ModelState, sequences: Sequence[SkeletonSequence], log: Optional[TextIO] = None,
            epochs: Optional[int] = None) -> List[LossReport]:
        """
        Train until `epochs` (default: config.epochs) epochs are complete,
        continuing from state.epoch. One CSV row per step goes to `log`.
        """
        if not sequences:
            raise ConfigError("no training sequences", "data")
        data = [self.prepare(seq) for seq in sequences]
        target = self.config.epochs if epochs is None else epochs
        history: List[LossReport] = []
        while state.epoch < target:
            order = state.rng.permutation(len(data)) if self.config.shuffle else np.arange(len(data))
            epoch_total = LossReport()
            last_info: Optional[TrainStepInfo] = None
            steps = 0
            for start in range(0, len(order), self.config.batch_size):
                batch = [data[i] for i in order[start:start + self.config.batch_size]]
                state, report, last_info = self.train_step(state, batch)
                history.append(report)
                epoch_total = epoch_total + report
                steps += 1
                if log is not None:
                    log.write(report.csv_row(state.step) + "\n")
            state.epoch += 1
            mean = epoch_total.scaled(1.0 / steps)
            usage = last_info.usage_summary() if last_info else ""
            self.logger.info(f"Epoch {state.epoch}/{target}: {mean} | codebooks {usage}")
        if log is not None:
            log.flush()
        return history

    def infer_patch_indices(self, state: ModelState, seq: SkeletonSequence) -> np.ndarray:
        """Action-level codebook index of every patch of one sequence"""
        if not state.hierarchy.initialized:
            raise ConfigError("model has no codebooks yet; train for at least one step", "hvq")
        with ad.no_grad():
            _, patches = self._encode_patches(state, ad.constant(self.prepare(seq)), None)
            return state.hierarchy.quantize(patches.data).level2.copy()
