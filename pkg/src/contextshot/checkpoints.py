"""Checkpoint IO: an .npz tensor container plus a JSON sidecar.

The sidecar (`<file>.json`) carries the configs needed to rebuild the
modules, run metadata, a format version, and the SHA-256 of the binary;
loading verifies the hash and the version before touching any tensor.
Round-trips are bit-exact because parameters are stored as raw arrays in
their native dtype.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import configio
from .encoders import Encoder, EncoderConfig, build_encoder
from .errors import CheckpointError
from .icl import IclModel, IclModelConfig

FORMAT_VERSION = 1


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_sha256(path) -> str:
    return _sha256(Path(path))


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # zipfile entries get a fixed timestamp so identical tensors produce
    # identical bytes regardless of when the checkpoint is written
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, arr)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def _read_npz(path: Path) -> dict[str, np.ndarray]:
    try:
        with np.load(path) as data:
            return {name: data[name] for name in data.files}
    except Exception as exc:
        raise CheckpointError(f"cannot read tensor container {path}: {exc}") from exc


def _state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for key, tensor in module.state_dict().items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise CheckpointError(f"tensor {name} missing from checkpoint")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {tuple(tensor.shape)}")
        state[key] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_sidecar(path: Path, meta: dict) -> None:
    configio.write_json(_sidecar_path(path), meta)


def _read_sidecar(path: Path) -> dict:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise CheckpointError(f"missing sidecar {sidecar}")
    meta = configio.read_json(sidecar)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')} != supported {FORMAT_VERSION}"
        )
    recorded = meta.get("tensor_sha256")
    actual = _sha256(path)
    if recorded != actual:
        raise CheckpointError(f"tensor container hash mismatch for {path}")
    return meta


def save_encoder(encoder: Encoder, path, pretrain_objective: str = "none", epochs: int = 0, val_accuracy=None) -> Path:
    """Write an encoder checkpoint; returns the binary path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_npz(path, _state_arrays(encoder, "enc"))
    meta = {
        "kind": encoder.config.kind,
        "config": configio.to_dict(encoder.config),
        "init_seed": getattr(encoder, "init_seed", 0),
        "pretrain_objective": pretrain_objective,
        "epochs": epochs,
        "val_accuracy": val_accuracy,
        "format_version": FORMAT_VERSION,
        "tensor_sha256": _sha256(path),
    }
    _write_sidecar(path, meta)
    return path


def load_encoder(path):
    """Read an encoder checkpoint; returns (encoder, sidecar metadata)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint does not exist: {path}")
    meta = _read_sidecar(path)
    config = configio.from_dict(EncoderConfig, meta["config"], "encoder config")
    encoder = build_encoder(config, int(meta["init_seed"]))
    arrays = _read_npz(path)
    if any(a.dtype == np.float64 for a in arrays.values()):
        encoder.double()
    _load_state(encoder, arrays, "enc")
    encoder.eval()
    return encoder, meta


def save_checkpoint(model: IclModel, encoder: Encoder, meta: dict, path) -> Path:
    """Write a full in-context model checkpoint (model + encoder + metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {**_state_arrays(model, "icl"), **_state_arrays(encoder, "enc")}
    _write_npz(path, arrays)
    sidecar = {
        "icl_config": configio.to_dict(model.config),
        "icl_init_seed": getattr(model, "init_seed", 0),
        "encoder_config": configio.to_dict(encoder.config),
        "encoder_init_seed": getattr(encoder, "init_seed", 0),
        "format_version": FORMAT_VERSION,
        "tensor_sha256": _sha256(path),
        **meta,
    }
    _write_sidecar(path, sidecar)
    return path


def load_checkpoint(path):
    """Read a full checkpoint; returns (model, encoder, sidecar metadata)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint does not exist: {path}")
    meta = _read_sidecar(path)
    icl_config = configio.from_dict(IclModelConfig, meta["icl_config"], "icl config")
    encoder_config = configio.from_dict(EncoderConfig, meta["encoder_config"], "encoder config")
    model = IclModel(icl_config, init_seed=int(meta.get("icl_init_seed", 0)))
    encoder = build_encoder(encoder_config, int(meta.get("encoder_init_seed", 0)))
    if icl_config.precision == "double":
        encoder.double()
    arrays = _read_npz(path)
    _load_state(model, arrays, "icl")
    _load_state(encoder, arrays, "enc")
    model.eval()
    encoder.eval()
    return model, encoder, meta
