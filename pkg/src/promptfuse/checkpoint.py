"""Single-file checkpoint format.

Layout: magic ``PFCK``, u32 version, u32 length + UTF-8 JSON metadata (enough
to rebuild the model), then one record per parameter in declaration order:
u32 name length, name bytes, u64 element count, little-endian float32 data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .encoders import (
    EncoderConfig,
    MultimodalClassifier,
    ParameterPartition,
    PromptConfig,
)
from .errors import DataError, ValidationError

MAGIC = b"PFCK"
VERSION = 1


def serialize_model(model: MultimodalClassifier, meta: dict) -> bytes:
    meta = dict(meta)
    meta.setdefault("format_version", VERSION)
    meta["encoder"] = _encoder_dict(model.encoder_cfg)
    meta["prompt"] = _prompt_dict(model.prompt_cfg)
    meta["audio_enabled"] = model.audio_enabled
    meta["seed"] = model.seed
    if model.audio_encoder is not None:
        meta["audio_input_shape"] = list(model.audio_encoder.input_shape)
        meta["audio_floor_log"] = model.audio_encoder.floor_log
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    for name, param in model.named_parameters():
        data = param.detach().cpu().numpy().astype("<f4").tobytes()
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<Q", param.numel())
        out += data
    return bytes(out)


def write_checkpoint(path, model: MultimodalClassifier, meta: dict) -> None:
    Path(path).write_bytes(serialize_model(model, meta))


def read_checkpoint(source) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (metadata, flat name -> float32 array)."""
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        p = Path(source)
        if not p.is_file():
            raise DataError(f"checkpoint not found: {p}")
        data = p.read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 8)
    pos = 12
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        params: dict[str, np.ndarray] = {}
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            end = pos + 4 * count
            if end > len(data):
                raise DataError(f"truncated parameter record {name!r}")
            params[name] = np.frombuffer(data[pos:end], dtype="<f4").copy()
            pos = end
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    return meta, params


def model_from_checkpoint(source) -> tuple[MultimodalClassifier, dict]:
    """Reconstruct the model a checkpoint was written from."""
    meta, params = read_checkpoint(source)
    try:
        enc = meta["encoder"]
        enc["audio_channels"] = tuple(enc["audio_channels"])
        encoder_cfg = EncoderConfig(**enc)
        prompt_cfg = PromptConfig(**meta["prompt"])
        audio_enabled = bool(meta["audio_enabled"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint metadata incomplete: {exc}") from exc
    model = MultimodalClassifier(
        encoder_cfg=encoder_cfg,
        prompt_cfg=prompt_cfg,
        audio_enabled=audio_enabled,
        audio_input_shape=tuple(meta.get("audio_input_shape") or ()) or None,
        audio_floor_log=meta.get("audio_floor_log", float(np.log(1e-10))),
        seed=int(meta.get("seed", 0)),
    )
    model_params = dict(model.named_parameters())
    if set(model_params) != set(params):
        missing = sorted(set(model_params) ^ set(params))
        raise ValidationError(f"checkpoint does not match model construction: {missing}")
    with torch.no_grad():
        for name, array in params.items():
            target = model_params[name]
            if array.size != target.numel():
                raise ValidationError(
                    f"parameter {name!r} has {array.size} elements, expected {target.numel()}"
                )
            target.copy_(torch.from_numpy(array.reshape(tuple(target.shape))))
    return model, meta


def frozen_blob(model: MultimodalClassifier, partition: ParameterPartition) -> bytes:
    """Concatenated float32 bytes of every frozen parameter, declaration order."""
    parts = []
    for name, param in model.named_parameters():
        if name in partition.frozen:
            parts.append(param.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def frozen_hash(model: MultimodalClassifier, partition: ParameterPartition) -> str:
    return hashlib.sha256(frozen_blob(model, partition)).hexdigest()


def _encoder_dict(cfg: EncoderConfig) -> dict:
    return {
        "width": cfg.width,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "patch_size": cfg.patch_size,
        "image_size": cfg.image_size,
        "vocab_size": cfg.vocab_size,
        "max_text_len": cfg.max_text_len,
        "audio_channels": list(cfg.audio_channels),
        "embed_dim": cfg.embed_dim,
        "audio_embed_dim": cfg.audio_embed_dim,
    }


def _prompt_dict(cfg: PromptConfig) -> dict:
    return {
        "text_tokens": cfg.text_tokens,
        "video_tokens": cfg.video_tokens,
        "text_depth": cfg.text_depth,
        "video_depth": cfg.video_depth,
        "enabled_text": cfg.enabled_text,
        "enabled_video": cfg.enabled_video,
        "freeze_text_prompts": cfg.freeze_text_prompts,
        "freeze_video_prompts": cfg.freeze_video_prompts,
    }
