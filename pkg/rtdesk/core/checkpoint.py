"""
Versioned binary checkpoint of a policy.

Layout (little-endian)::

    b"RTDK" | uint32 version | uint64 header length | JSON header
    | raw tensor buffers | uint32 CRC32 of everything before it

The header records the policy configuration, the action space, run
metadata (seed, step count, mixing ratios), the optimizer hyperparameters
and an index of every tensor buffer (name, dtype, shape, offset).
"""
import json
import logging
import os
import struct
import zlib
from typing import Any, Dict, Optional

import numpy as np

from .action_codec import ActionSpaceSpec
from .config import PolicyConfig
from .errors import CheckpointFormatError
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RTDK"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")


class PolicyCheckpoint:
    """
    In-memory contents of a checkpoint file.

    Attributes:
        version: Format version
        config: Policy configuration
        spec: Action space
        metadata: Run metadata (seed, step, mixing ratios, ...)
        parameters: Parameter arrays by dotted name
        optimizer_state: Adam moments and step count, possibly empty
        optimizer: Adam hyperparameters, possibly empty
    """

    def __init__(
        self,
        config: PolicyConfig,
        spec: ActionSpaceSpec,
        parameters: Dict[str, np.ndarray],
        metadata: Optional[Dict[str, Any]] = None,
        optimizer_state: Optional[Dict[str, np.ndarray]] = None,
        optimizer: Optional[Dict[str, float]] = None,
        version: int = CHECKPOINT_VERSION,
    ):
        self.version = version
        self.config = config
        self.spec = spec
        self.parameters = dict(parameters)
        self.metadata = dict(metadata or {})
        self.optimizer_state = dict(optimizer_state or {})
        self.optimizer = dict(optimizer or {})

    @classmethod
    def from_model(cls, model, optimizer=None, metadata: Optional[Dict[str, Any]] = None) -> "PolicyCheckpoint":
        meta = {"seed": model.seed}
        meta.update(metadata or {})
        return cls(
            config=model.config,
            spec=model.spec,
            parameters=model.state_dict(),
            metadata=meta,
            optimizer_state=optimizer.state_dict() if optimizer is not None else None,
            optimizer=optimizer.hyperparameters() if optimizer is not None else None,
        )

    @property
    def model(self):
        """Rebuild the policy and load the stored parameters."""
        from ..models.policy_transformer import PolicyModel

        model = PolicyModel(self.config, seed=int(self.metadata.get("seed", 0)), spec=self.spec)
        model.load_state_dict(self.parameters)
        return model

    def header(self) -> Dict[str, Any]:
        return {
            "format_version": self.version,
            "policy_config": self.config.to_dict(),
            "action_space": self.spec.to_dict(),
            "metadata": self.metadata,
            "optimizer": self.optimizer,
        }

    def __repr__(self) -> str:
        return f"PolicyCheckpoint(version={self.version}, tensors={len(self.parameters)}, step={self.metadata.get('step')})"


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


def _to_bytes(ckpt: PolicyCheckpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in ckpt.parameters.items()]
    tensors += [(f"optim/{k}", v) for k, v in ckpt.optimizer_state.items()]
    index = []
    buffers = []
    offset = 0
    for name, value in tensors:
        array = np.ascontiguousarray(value)
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = array.tobytes()
        index.append({
            "name": name,
            "dtype": array.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    header = ckpt.header()
    header["tensors"] = index
    header_bytes = json.dumps(header, sort_keys=True, default=_json_default).encode("utf-8")
    body = _PREAMBLE.pack(CHECKPOINT_MAGIC, ckpt.version, len(header_bytes)) + header_bytes + b"".join(buffers)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _parse(payload: bytes) -> PolicyCheckpoint:
    minimum = _PREAMBLE.size + _CRC.size
    if len(payload) < minimum:
        raise CheckpointFormatError(f"File holds {len(payload)} bytes, fewer than the {minimum}-byte frame", len(payload))
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})", 4)
    body_end = len(payload) - _CRC.size
    if _PREAMBLE.size + header_len > body_end:
        raise CheckpointFormatError(f"Header length {header_len} runs past the end of the file", 8)
    (stored_crc,) = _CRC.unpack_from(payload, body_end)
    actual_crc = zlib.crc32(payload[:body_end]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointFormatError(
            f"Checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})", body_end
        )
    header_start = _PREAMBLE.size
    try:
        header = json.loads(payload[header_start:header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        position = header_start + getattr(exc, "pos", getattr(exc, "start", 0))
        raise CheckpointFormatError(f"Header is not valid JSON: {exc}", position)
    data_start = header_start + header_len
    parameters: Dict[str, np.ndarray] = {}
    optimizer_state: Dict[str, np.ndarray] = {}
    try:
        config = PolicyConfig.from_dict(header["policy_config"])
        spec = ActionSpaceSpec.from_dict(header["action_space"])
        entries = header["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"Header is incomplete: {exc}", header_start)
    for entry in entries:
        start = data_start + int(entry["offset"])
        end = start + int(entry["nbytes"])
        if end > body_end:
            raise CheckpointFormatError(f"Tensor '{entry['name']}' runs past the end of the data", start)
        array = np.frombuffer(payload[start:end], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        kind, _, name = entry["name"].partition("/")
        (parameters if kind == "param" else optimizer_state)[name] = array
    return PolicyCheckpoint(
        config=config,
        spec=spec,
        parameters=parameters,
        metadata=header.get("metadata", {}),
        optimizer_state=optimizer_state,
        optimizer=header.get("optimizer", {}),
        version=version,
    )


def save_checkpoint(path: str, model, optimizer=None, metadata: Optional[Dict[str, Any]] = None) -> PolicyCheckpoint:
    """
    Atomically write a checkpoint of ``model`` (and optionally its optimizer).

    Returns:
        The checkpoint that was written
    """
    ckpt = PolicyCheckpoint.from_model(model, optimizer, metadata)
    write_checkpoint(path, ckpt)
    return ckpt


def write_checkpoint(path: str, ckpt: PolicyCheckpoint) -> None:
    atomic_write_bytes(path, _to_bytes(ckpt))
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path: str) -> PolicyCheckpoint:
    """
    Read a checkpoint file.

    Raises:
        FileNotFoundError: the file does not exist
        CheckpointFormatError: the file is truncated, corrupted or of another version
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as fh:
        payload = fh.read()
    return _parse(payload)


def read_header(path: str) -> Dict[str, Any]:
    """Header of a checkpoint without building the model."""
    ckpt = load_checkpoint(path)
    header = ckpt.header()
    header["tensors"] = {name: list(value.shape) for name, value in ckpt.parameters.items()}
    return header
