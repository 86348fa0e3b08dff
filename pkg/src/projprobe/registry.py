"""On-disk model registry: one checkpoint pair per model plus ``index.json``.

Index entries (model id -> record)::

    {"id", "role", "kind", "head_variant", "projector_kind", "pool_factor",
     "encoder_id", "provenance", "seed", "config_hash", "sha256"}

``role`` is one of encoder / target / sibling / head / surrogate. The index is
rewritten atomically (temp file + rename) on every update, under an
exclusive file lock so concurrent writers never drop each other's entries.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import os
from collections import Counter
from pathlib import Path

from .checkpoint import load_module, save_module
from .errors import RegistryLookupError, ValidationError
from .models import ToyLVLM

ROLES = ("encoder", "target", "sibling", "head", "surrogate")


class AccessAudit:
    """Counts reads of model components, bucketed by the active phase."""

    def __init__(self):
        self.reads = Counter()
        self.calls = Counter()
        self.phase = "setup"
        self._hooks = []

    @contextlib.contextmanager
    def during(self, phase):
        previous, self.phase = self.phase, phase
        try:
            yield self
        finally:
            self.phase = previous

    def record(self, model_id, component):
        self.reads[(self.phase, model_id, component)] += 1

    def watch(self, module, model_id, component="projector"):
        """Count forward invocations of ``module`` while attached."""
        def hook(_module, _inputs):
            self.calls[(self.phase, model_id, component)] += 1
        handle = module.register_forward_pre_hook(hook)
        self._hooks.append(handle)
        return handle

    def unwatch(self):
        for handle in self._hooks:
            handle.remove()
        self._hooks.clear()

    def count(self, model_id, component="projector", phase="attack"):
        return (self.reads[(phase, model_id, component)]
                + self.calls[(phase, model_id, component)])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Registry:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.exists() else {}
        self.audit = AccessAudit()
        self._cache = {}

    def __contains__(self, model_id):
        if model_id not in self.index:
            self.reload()
        return model_id in self.index

    def ids(self, role=None):
        return sorted(k for k, v in self.index.items() if role is None or v["role"] == role)

    def entry(self, model_id) -> dict:
        if model_id not in self.index:
            self.reload()
        try:
            return self.index[model_id]
        except KeyError:
            raise RegistryLookupError(f"model {model_id!r} not found in registry {self.root}") from None

    def add(self, model_id, module, role, head_variant=None, encoder_id=None, provenance=None,
            seed=None, config_hash=None):
        if role not in ROLES:
            raise ValidationError(f"unknown registry role {role!r}")
        stem = self.root / model_id
        meta = save_module(stem, module, seed=seed, provenance=provenance)
        arch = meta["architecture"]
        projector = arch.get("projector") if arch["kind"] == "lvlm" else (
            arch if arch["kind"] in ("compressed", "uncompressed") else None)
        record = {
            "id": model_id,
            "role": role,
            "kind": arch["kind"],
            "head_variant": head_variant,
            "projector_kind": projector["kind"] if projector else None,
            "pool_factor": projector["config"].get("pool_factor") if projector else None,
            "encoder_id": encoder_id,
            "provenance": provenance or {},
            "seed": seed,
            "config_hash": config_hash,
            "sha256": file_sha256(stem.with_suffix(".npz")),
        }
        with self._locked():
            # merge with the on-disk index: other processes may have added entries
            if self.index_path.exists():
                self.index = {**json.loads(self.index_path.read_text()), **self.index}
            self.index[model_id] = record
            self._write_index()
        self._cache.pop(model_id, None)
        return record

    @contextlib.contextmanager
    def _locked(self):
        with (self.root / ".lock").open("a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _write_index(self):
        tmp = self.index_path.with_name(f"index.json.{os.getpid()}.tmp")
        tmp.write_text(json.dumps(self.index, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.index_path)

    def reload(self):
        if self.index_path.exists():
            self.index = json.loads(self.index_path.read_text())

    def _load(self, model_id):
        self.entry(model_id)
        if model_id not in self._cache:
            self._cache[model_id] = load_module(self.root / model_id)[0]
        return self._cache[model_id]

    def encoder(self, model_id):
        module = self._load(model_id)
        self.audit.record(model_id, "encoder")
        return module.encoder if isinstance(module, ToyLVLM) else module

    def projector(self, model_id):
        module = self._load(model_id)
        self.audit.record(model_id, "projector")
        return module.projector if isinstance(module, ToyLVLM) else module

    def head(self, model_id):
        module = self._load(model_id)
        self.audit.record(model_id, "head")
        return module.head if isinstance(module, ToyLVLM) else module

    def model(self, model_id) -> ToyLVLM:
        module = self._load(model_id)
        if not isinstance(module, ToyLVLM):
            raise ValidationError(f"{model_id!r} is a {self.entry(model_id)['kind']}, not a full model")
        for component in ("encoder", "projector", "head"):
            self.audit.record(model_id, component)
        return module
