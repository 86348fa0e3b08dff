"""Checkpoint container.

``<stem>.npz`` is a stored (uncompressed) zip archive of ``<name>.npy`` members,
readable with ``numpy.load``. Members are written in sorted order with a fixed
1980-01-01 timestamp so identical weights give byte-identical files.
``<stem>.json`` is the sidecar: format tag, architecture (enough to rebuild
the module), seed, provenance and the array manifest.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .models import (AnswerHead, CompressedConfig, CompressedProjector, EncoderConfig, HeadConfig,
                     ToyLVLM, UncompressedConfig, UncompressedProjector, VisualEncoder,
                     module_config)

FORMAT = "projprobe-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def load_arrays(path) -> dict:
    with np.load(path, allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


def describe(module) -> dict:
    """Architecture record from which ``build`` recreates an untrained module."""
    if isinstance(module, ToyLVLM):
        return {"kind": "lvlm", "encoder": describe(module.encoder),
                "projector": describe(module.projector), "head": describe(module.head)}
    if isinstance(module, VisualEncoder):
        return {"kind": "encoder", "config": module_config(module)}
    if isinstance(module, (CompressedProjector, UncompressedProjector)):
        return {"kind": module.kind, "config": module_config(module)}
    if isinstance(module, AnswerHead):
        return {"kind": "head", "config": module_config(module)}
    raise ConfigurationError(f"cannot describe {type(module).__name__}")


def build(arch: dict):
    kind = arch["kind"]
    if kind == "lvlm":
        return ToyLVLM(build(arch["encoder"]), build(arch["projector"]), build(arch["head"]))
    cfg = arch["config"]
    if kind == "encoder":
        return VisualEncoder(EncoderConfig(**cfg))
    if kind == "compressed":
        return CompressedProjector(CompressedConfig(**cfg))
    if kind == "uncompressed":
        return UncompressedProjector(UncompressedConfig(**cfg))
    if kind == "head":
        return AnswerHead(HeadConfig(**cfg))
    raise ConfigurationError(f"unknown module kind {kind!r}")


def state_arrays(module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_module(stem, module, seed=None, provenance=None):
    stem = Path(stem)
    arrays = state_arrays(module)
    save_arrays(stem.with_suffix(".npz"), arrays)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "architecture": describe(module),
        "seed": seed,
        "provenance": provenance or {},
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(arrays.items())},
    }
    tmp = stem.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, stem.with_suffix(".json"))
    return meta


def load_module(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("format") != FORMAT:
        raise ConfigurationError(f"{stem}: not a {FORMAT} sidecar")
    module = build(meta["architecture"])
    arrays = load_arrays(stem.with_suffix(".npz"))
    module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    module.eval()
    return module, meta
