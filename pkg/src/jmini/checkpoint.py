"""Self-describing checkpoint container.

Byte layout::

    b"JMINI1\\n"
    uint64 little-endian  N = byte length of the metadata block
    N bytes               UTF-8 JSON metadata
    raw arrays            little-endian, concatenated in metadata["arrays"] order

Each metadata array entry records ``name``, ``group``, ``shape`` and
``dtype`` (``"<f4"`` for every tensor written by this module).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from jmini.config import CodecConfig, ModelConfig
from jmini.model import GROUPS, JanusMini

MAGIC = b"JMINI1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint."""


def _entries(model: JanusMini, optimizer=None):
    for group, params in model.parameter_groups().items():
        for name, p in params.items():
            yield f"param/{group}/{name}", group, p.detach()
    if optimizer is not None:
        for name, t in optimizer.state_arrays().items():
            yield f"opt/{name}", "optimizer", t.detach()


def array_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().to(torch.float32).contiguous().numpy().tobytes()).hexdigest()[:16]


def group_hashes(model: JanusMini) -> dict[str, str]:
    """sha256 over the float32 bytes of every parameter in each group."""
    out = {}
    for group, params in model.parameter_groups().items():
        h = hashlib.sha256()
        for name, p in params.items():
            h.update(name.encode())
            h.update(p.detach().to(torch.float32).contiguous().numpy().tobytes())
        out[group] = h.hexdigest()[:16]
    return out


def save_checkpoint(path, model: JanusMini, progress: dict | None = None, optimizer=None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    entries = list(_entries(model, optimizer))
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "codec_config": model.codec.to_dict(),
        "progress": progress or {},
        "tokenizer_frozen": bool(model.gen_tokenizer.frozen),
        "codebook_usage": model.gen_tokenizer.codebook.usage.tolist(),
        "arrays": [{"name": n, "group": g, "shape": list(t.shape), "dtype": "<f4"} for n, g, t in entries],
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".partial")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for _, _, t in entries:
                f.write(t.to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container into ``(metadata, {name: array})`` without building a model."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a JMINI checkpoint (bad header)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated before metadata length")
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        meta = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata ({e})") from None
    pos += n
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    arrays = {}
    for e in meta["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * np.dtype(e["dtype"]).itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated inside array {e['name']}")
        arrays[e["name"]] = np.frombuffer(data, dtype=e["dtype"], count=count, offset=pos).reshape(e["shape"])
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return meta, arrays


def load_into(model: JanusMini, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    for group, params in model.parameter_groups().items():
        for name, p in params.items():
            key = f"param/{group}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks {key}")
            a = arrays[key]
            if tuple(a.shape) != tuple(p.shape):
                raise CheckpointError(f"{key}: shape {tuple(a.shape)} in file, model expects {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(a.copy()).to(p.dtype))
    model.gen_tokenizer.frozen = bool(meta.get("tokenizer_frozen", False))
    usage = meta.get("codebook_usage")
    if usage and len(usage) == model.gen_tokenizer.codebook.size:
        model.gen_tokenizer.codebook.usage.copy_(torch.tensor(usage, dtype=torch.int64))


def load_checkpoint(path) -> tuple[JanusMini, dict, dict[str, np.ndarray]]:
    """Rebuild the model stored at ``path``; returns ``(model, metadata, optimizer arrays)``."""
    meta, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig(**meta["model_config"])
        codec = CodecConfig(**meta["codec_config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad configuration block ({e})") from None
    model = JanusMini(cfg, codec, seed=None)
    load_into(model, meta, arrays)
    opt = {k[len("opt/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("opt/")}
    return model, meta, opt


def describe_checkpoint(path) -> str:
    """Human-readable summary: version, configs, per-group shapes and hashes."""
    meta, arrays = read_checkpoint(path)
    lines = [f"format_version: {meta['format_version']}",
             f"model_config: {json.dumps(meta['model_config'], sort_keys=True)}",
             f"codec_config: {json.dumps(meta['codec_config'], sort_keys=True)}",
             f"progress: {json.dumps(meta.get('progress', {}), sort_keys=True)}"]
    for group in GROUPS:
        entries = [e for e in meta["arrays"] if e["group"] == group]
        h = hashlib.sha256()
        n = 0
        for e in entries:
            h.update(e["name"].split("/", 2)[2].encode())
            h.update(arrays[e["name"]].tobytes())
            n += int(np.prod(e["shape"]))
        lines.append(f"group {group}: {len(entries)} tensors, {n} values, sha256 {h.hexdigest()[:16]}")
        for e in entries:
            lines.append(f"    {e['name'].split('/', 2)[2]} {tuple(e['shape'])}")
    return "\n".join(lines)
