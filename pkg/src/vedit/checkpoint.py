"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VEDT"  u32 version
    u32 config_len   config JSON (UTF-8, sorted keys)
    u32 n_tensors
    n_tensors x { u16 name_len, name, u8 ndim, u32 dims[ndim], u64 offset }
    u64 payload_len  payload (float32 LE, tensors back to back)
    u32 crc32(payload)
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import BadMagic, CrcMismatch, MissingTensor, ShapeMismatch

MAGIC = b"VEDT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> float32 ndarray


def write_checkpoint(path, config: dict, tensors: dict) -> None:
    header = bytearray()
    header += MAGIC + struct.pack("<I", FORMAT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    header += struct.pack("<I", len(cfg)) + cfg
    header += struct.pack("<I", len(tensors))
    chunks, offset = [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        enc = name.encode("utf-8")
        shape = np.shape(arr)
        header += struct.pack("<H", len(enc)) + enc + struct.pack("<B", len(shape))
        header += struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<Q", offset)
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path} is not a checkpoint (magic {buf[:4]!r})")
    try:
        pos = 4
        (version,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise BadMagic(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        config = json.loads(buf[pos : pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        table = []
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            table.append((name, shape, offset))
        (payload_len,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        payload = buf[pos : pos + payload_len]
        (crc,) = struct.unpack_from("<I", buf, pos + payload_len)
    except (struct.error, UnicodeDecodeError, ValueError) as e:
        raise CrcMismatch(f"truncated or malformed checkpoint {path}: {e}") from e
    if len(payload) != payload_len or zlib.crc32(payload) != crc:
        raise CrcMismatch(f"payload checksum mismatch in {path}")
    tensors = {}
    for name, shape, offset in table:
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > payload_len:
            raise ShapeMismatch(f"tensor {name!r} runs past the payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return Checkpoint(config, tensors)


def module_tensors(module: torch.nn.Module) -> dict:
    return {name: p.detach().cpu().numpy() for name, p in module.named_parameters()}


def restore_parameters(module: torch.nn.Module, tensors: dict) -> None:
    """Copy named tensors into ``module``; unknown names are ignored with a warning."""
    params = dict(module.named_parameters())
    missing = [n for n in params if n not in tensors]
    if missing:
        raise MissingTensor(f"checkpoint lacks {len(missing)} tensor(s): {missing[:5]}")
    extra = [n for n in tensors if n not in params]
    if extra:
        warnings.warn(f"ignoring {len(extra)} unknown checkpoint tensor(s): {extra[:5]}", stacklevel=2)
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatch(f"{name}: checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))


def save_checkpoint(module: torch.nn.Module, path, meta: dict | None = None) -> None:
    config = module.checkpoint_config()
    if meta:
        config = {**config, "meta": meta}
    write_checkpoint(path, config, module_tensors(module))


def build_from_config(config: dict) -> torch.nn.Module:
    from .core import ModelConfig
    from .model import VEDiT
    from .pipeline import Predictor

    kind = config.get("kind")
    if kind == "vedit":
        return VEDiT(ModelConfig.from_dict(config["model"]))
    if kind == "predictor":
        return Predictor.from_config(config)
    raise BadMagic(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path, dtype=torch.float32) -> torch.nn.Module:
    ckpt = read_checkpoint(path)
    module = build_from_config(ckpt.config).to(dtype)
    restore_parameters(module, ckpt.tensors)
    module.eval()
    return module
