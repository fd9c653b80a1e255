"""Single-file weight archive: a zip holding ``manifest.json`` plus one raw blob per tensor.

Blobs are little-endian float32 in C order. The manifest maps each parameter
name to ``{"file", "shape", "dtype"}`` and also carries the model config, the
vocabulary and free-form metadata. See ``docs/checkpoint-format.md``.
"""
from __future__ import annotations

import json
from dataclasses import asdict
import zipfile
from pathlib import Path

import numpy as np
import torch

from .conditioning import Vocabulary
from .config import ModelConfig
from .errors import LoadError

FORMAT = "faceinpaint-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)   # fixed timestamp keeps archives byte-stable
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def write_archive(path, state: dict, header: dict) -> None:
    """Write ``state`` (name -> tensor) and the JSON ``header`` into one zip file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    with zipfile.ZipFile(path, "w") as zf:
        for k, (name, t) in enumerate(state.items()):
            arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
            fname = f"tensors/{k:04d}.bin"
            _write(zf, fname, arr.tobytes())
            tensors[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f4"}
        manifest = {"format": FORMAT, **header, "tensors": tensors}
        _write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise LoadError(f"{path}: not a checkpoint archive ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise LoadError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def read_tensors(path, manifest: dict) -> dict:
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name, info in manifest["tensors"].items():
            arr = np.frombuffer(zf.read(info["file"]), dtype=info["dtype"]).reshape(info["shape"])
            state[name] = torch.from_numpy(arr.astype(np.float32))
    return state


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    cfg = asdict(model.cfg)
    cfg["widths"] = list(model.cfg.widths)
    write_archive(path, model.state_dict(), {"kind": "edit-model", "model": cfg,
                                             "vocab": model.vocab.itos, "meta": meta or {}})


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the model described by the archive and load its weights."""
    from .pipeline import EditModel
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("kind") != "edit-model":
        raise LoadError(f"{path}: not an edit-model checkpoint (kind {manifest.get('kind')!r})")
    cfg_d = dict(manifest["model"])
    cfg_d["widths"] = tuple(cfg_d["widths"])
    model = EditModel(ModelConfig(**cfg_d), Vocabulary.from_itos(manifest["vocab"]))
    state = read_tensors(path, manifest)
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise LoadError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.to(dtype).eval()
    return model, manifest.get("meta", {})
