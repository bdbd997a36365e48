"""Checkpoint files: magic, length-prefixed JSON header, length-prefixed float32 blobs."""
import json
import logging
import os
import struct
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .errors import CheckpointError
from .network import INIT_RECIPE, ParModel

logger = logging.getLogger(__name__)

MAGIC = b"PARCKPT1"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: ParModel, path: str) -> None:
    params = sorted(model.named_parameters(), key=lambda kv: kv[0])
    header = {
        "format": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "init_recipe": INIT_RECIPE,
        "params": [[name, list(p.shape)] for name, p in params],
    }
    head = _canonical(header)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_U32.pack(len(head)))
        f.write(head)
        for _, p in params:
            blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            f.write(_U32.pack(len(blob)))
            f.write(blob)
    os.replace(tmp, path)
    logger.info("saved checkpoint %s (%d tensors)", path, len(params))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> ParModel:
    """Rebuild a float32 ParModel; raises CheckpointError without returning a partial model."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a PAR checkpoint (bad magic)")
        (head_len,) = _U32.unpack(_read_exact(f, _U32.size, "header length"))
        try:
            header = json.loads(_read_exact(f, head_len, "header").decode("utf-8"))
            config = ModelConfig.model_validate(header["config"])
        except (ValueError, KeyError, TypeError, ValidationError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}: {exc}") from exc
        if header.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
        if expected_config is not None and expected_config != config:
            raise CheckpointError("checkpoint config does not match the requested model config")

        model = ParModel(config, dtype=np.float32)
        params = dict(model.named_parameters())
        listed = [(name, tuple(shape)) for name, shape in header.get("params", [])]
        if sorted(params) != [name for name, _ in listed]:
            raise CheckpointError("checkpoint parameter names do not match the model")

        values = {}
        for name, shape in listed:
            if params[name].shape != shape:
                raise CheckpointError(f"shape mismatch for {name}: file {shape}, model {params[name].shape}")
            (n_bytes,) = _U32.unpack(_read_exact(f, _U32.size, f"length of {name}"))
            if n_bytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"blob for {name} has {n_bytes} bytes, expected shape {shape}")
            blob = _read_exact(f, n_bytes, name)
            values[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        if f.read(1):
            raise CheckpointError("trailing bytes after the last parameter blob")

    for name, value in values.items():
        params[name].data = value
    logger.debug("loaded checkpoint %s", path)
    return model
