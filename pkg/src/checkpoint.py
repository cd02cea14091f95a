"""
Checkpoint container: JSON header followed by little-endian float64 payloads.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, payload.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Union

import numpy as np
from pydantic import ValidationError

from src.errors import CheckpointError
from src.logger import get_logger
from src.model import LayerParams, ModelParams
from src.schemas import ModelConfig
from src.tensor import Tensor

logger = get_logger(__name__)

MAGIC = b"LPCKPT01"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def payload_bytes(params: ModelParams) -> bytes:
    return b"".join(np.ascontiguousarray(t.values, dtype=_DTYPE).tobytes() for _, t in params.named_tensors())


def model_hash(params: ModelParams) -> str:
    """SHA-256 over config and raw weights; identifies a model in profiles."""
    digest = hashlib.sha256(params.config.model_dump_json().encode("utf-8"))
    digest.update(payload_bytes(params))
    return digest.hexdigest()


def encode_checkpoint(params: ModelParams, meta: dict[str, Any] | None = None) -> bytes:
    index = []
    offset = 0
    for name, tensor in params.named_tensors():
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size * _DTYPE.itemsize
    header = {
        "format_version": FORMAT_VERSION,
        "config": params.config.model_dump(),
        "meta": meta or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + payload_bytes(params)


def decode_checkpoint(blob: bytes) -> tuple[ModelParams, dict[str, Any]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a layerprune checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(blob) < start:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes, header needs {start}")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : start])
    if header_len > len(blob) - start:
        raise CheckpointError(f"header length {header_len} runs past the end of the checkpoint")
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
        config = ModelConfig.model_validate(header["config"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")

    payload = memoryview(blob)[start + header_len :]
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + count * _DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the payload")
        values = np.frombuffer(payload[entry["offset"] : end], dtype=_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = Tensor(values.astype(np.float64), requires_grad=True)

    try:
        layers = [
            LayerParams(**{name: tensors[f"layers.{i}.{name}"] for name in LayerParams.__dataclass_fields__})
            for i in range(config.n_layers)
        ]
        params = ModelParams(
            config=config,
            token_embedding=tensors["token_embedding"],
            position_embedding=tensors["position_embedding"],
            layers=layers,
            final_gain=tensors["final_gain"],
            final_bias=tensors["final_bias"],
            output_projection=tensors["output_projection"],
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from e
    return params, header.get("meta", {})


def save_checkpoint(params: ModelParams, path: Union[str, Path], meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, meta))
    logger.info(f"Wrote checkpoint {path} (depth={params.config.n_layers})")
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelParams, dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
