"""
Checkpoint file for a training run.

Layout (little-endian): magic "HVQ1", u32 format version, u32 section count,
then per section a u16 name length, the UTF-8 name, a u64 payload length, the
32-byte SHA-256 digest of the payload, and the payload. Sections: config,
meta, params, codebooks, optimizer, rng. Saving the same state twice yields
identical bytes.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, ChecksumError, ShapeError
from .hvq import Codebook, CodebookHierarchy
from .serialization import pack_arrays, unpack_arrays
from .trainer import AdamState, ModelState, TrainConfig, Trainer

logger = logging.getLogger(__name__)

MAGIC = b"HVQ1"
FORMAT_VERSION = 1
SECTIONS = ("config", "meta", "params", "codebooks", "optimizer", "rng")

_PREAMBLE = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD_LEN = struct.Struct("<Q")
_DIGEST_SIZE = 32


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_state(state: ModelState) -> bytes:
    meta = {
        "joint_dim": state.joint_dim,
        "num_joints": state.num_joints,
        "latent": state.model.latent_dim,
        "step": state.step,
        "epoch": state.epoch,
        "levels": len(state.hierarchy.codebooks),
    }
    codebooks: Dict[str, np.ndarray] = OrderedDict()
    for level, codebook in enumerate(state.hierarchy.codebooks):
        codebooks.update(codebook.to_arrays(f"level{level}."))
    optimizer: Dict[str, np.ndarray] = OrderedDict([("t", np.asarray(state.optimizer.t, dtype=np.int64))])
    for name in state.optimizer.m:
        optimizer[f"m.{name}"] = state.optimizer.m[name]
        optimizer[f"v.{name}"] = state.optimizer.v[name]

    sections = OrderedDict([
        ("config", _json_bytes(state.config.to_dict())),
        ("meta", _json_bytes(meta)),
        ("params", pack_arrays(state.model.state_arrays())),
        ("codebooks", pack_arrays(codebooks)),
        ("optimizer", pack_arrays(optimizer)),
        ("rng", _json_bytes(state.rng.bit_generator.state)),
    ])
    out = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(sections))]
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        out.append(_NAME_LEN.pack(len(encoded)) + encoded)
        out.append(_PAYLOAD_LEN.pack(len(payload)) + hashlib.sha256(payload).digest())
        out.append(payload)
    return b"".join(out)


def save_checkpoint(state: ModelState, path: Union[str, Path]):
    data = encode_state(state)
    Path(path).write_bytes(data)
    logger.info(f"Saved checkpoint at step {state.step} to {path} ({len(data)} bytes)")


def read_sections(data: bytes) -> "OrderedDict[str, bytes]":
    """Split a checkpoint into verified section payloads"""
    if len(data) < _PREAMBLE.size:
        raise ChecksumError(f"checkpoint truncated: {len(data)} bytes")
    magic, version, count = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")

    sections: "OrderedDict[str, bytes]" = OrderedDict()
    offset = _PREAMBLE.size
    for _ in range(count):
        if offset + _NAME_LEN.size > len(data):
            raise ChecksumError("checkpoint truncated inside a section header")
        (name_len,) = _NAME_LEN.unpack_from(data, offset)
        offset += _NAME_LEN.size
        head_end = offset + name_len + _PAYLOAD_LEN.size + _DIGEST_SIZE
        if head_end > len(data):
            raise ChecksumError("checkpoint truncated inside a section header")
        name = data[offset:offset + name_len].decode("utf-8", errors="replace")
        offset += name_len
        (length,) = _PAYLOAD_LEN.unpack_from(data, offset)
        offset += _PAYLOAD_LEN.size
        digest = data[offset:offset + _DIGEST_SIZE]
        offset += _DIGEST_SIZE
        payload = data[offset:offset + length]
        if len(payload) != length:
            raise ChecksumError(f"section '{name}' truncated: {len(payload)} of {length} bytes")
        if hashlib.sha256(payload).digest() != digest:
            raise ChecksumError(f"section '{name}' failed its checksum")
        sections[name] = payload
        offset += length
    if offset != len(data):
        raise ChecksumError(f"{len(data) - offset} unexpected trailing bytes")
    missing = [s for s in SECTIONS if s not in sections]
    if missing:
        raise CheckpointError(f"checkpoint lacks sections {missing}")
    return sections


def decode_state(data: bytes) -> ModelState:
    sections = read_sections(data)
    config = TrainConfig.from_dict(json.loads(sections["config"]))
    meta = json.loads(sections["meta"])

    trainer = Trainer(config)
    state = trainer.init_state(meta["joint_dim"], meta["num_joints"])
    if state.model.latent_dim != meta["latent"]:
        raise CheckpointError(f"stored latent size {meta['latent']} disagrees with config {state.model.latent_dim}")
    try:
        state.model.load_arrays(unpack_arrays(sections["params"]))
    except ShapeError as e:
        raise CheckpointError(f"parameters do not fit the stored config: {e}") from e

    codebook_arrays = unpack_arrays(sections["codebooks"])
    codebooks = [Codebook.from_arrays(codebook_arrays, f"level{level}.") for level in range(meta["levels"])]
    state.hierarchy = CodebookHierarchy(config.hvq, codebooks)

    optimizer_arrays = unpack_arrays(sections["optimizer"])
    counter = optimizer_arrays.pop("t", None)
    if counter is None or counter.size != 1:
        raise CheckpointError("optimizer section lacks its step counter")
    optimizer = AdamState(t=int(counter.item()))
    for key, array in optimizer_arrays.items():
        kind, name = key.split(".", 1)
        (optimizer.m if kind == "m" else optimizer.v)[name] = array
    state.optimizer = optimizer

    state.rng.bit_generator.state = json.loads(sections["rng"])
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    return state


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    state = decode_state(Path(path).read_bytes())
    logger.info(f"Loaded checkpoint {path} at step {state.step}")
    return state
