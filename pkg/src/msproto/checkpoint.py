"""Single-file checkpoints: an uncompressed ``.npz`` of little-endian arrays plus a JSON manifest."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .errors import ConfigError
from .model import STAGES, MultiScaleProtoNet, PrototypeConfig
from .training import TrainingPlan

FORMAT_VERSION = 1
MANIFEST_KEY = "__manifest__"
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _to_le(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype == np.bool_:
        return a.copy()
    return a.astype(a.dtype.newbyteorder("<"), copy=True)


def model_arrays(model: MultiScaleProtoNet) -> dict[str, np.ndarray]:
    return {k: _to_le(v) for k, v in model.state_dict().items()}


def digest_arrays(arrays: dict[str, np.ndarray], manifest: dict) -> str:
    h = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode())
    for name in sorted(arrays):
        a = arrays[name]
        h.update(name.encode())
        h.update(str(a.dtype.str).encode())
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def build_manifest(model: MultiScaleProtoNet, plan: TrainingPlan | None = None,
                   experiment: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "stage": model.stage,
        "seed": model.seed,
        "dtype": str(model.dtype).replace("torch.", ""),
        "num_classes": model.num_classes,
        "backbone": dataclasses.asdict(model.backbone.cfg),
        "prototypes": dataclasses.asdict(model.proto_cfg),
        "plan": plan.to_dict() if plan is not None else None,
        "experiment": experiment,
        "has_groups": model.groups is not None,
        "has_raw_groups": model.raw_groups is not None,
    }


def save_checkpoint(path, model: MultiScaleProtoNet, plan: TrainingPlan | None = None,
                    experiment: dict | None = None) -> str:
    """Write the checkpoint and return its sha256 digest (also stored in the manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model_arrays(model)
    manifest = build_manifest(model, plan, experiment)
    digest = digest_arrays(arrays, manifest)
    manifest["digest"] = digest
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{MANIFEST_KEY: blob})
    return digest


def read_manifest(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        if MANIFEST_KEY not in z:
            raise ConfigError(f"{path}: not a checkpoint (no manifest)")
        return json.loads(z[MANIFEST_KEY].tobytes().decode())


def load_checkpoint(path, verify: bool = True):
    """Rebuild the model; returns ``(model, plan or None, manifest)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        if MANIFEST_KEY not in z:
            raise ConfigError(f"{path}: not a checkpoint (no manifest)")
        manifest = json.loads(z[MANIFEST_KEY].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != MANIFEST_KEY}
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {manifest.get('format_version')}")
    if verify:
        body = {k: v for k, v in manifest.items() if k != "digest"}
        if digest_arrays(arrays, body) != manifest.get("digest"):
            raise ConfigError(f"{path}: digest mismatch, file is corrupt")
    if manifest["stage"] not in STAGES:
        raise ConfigError(f"{path}: unknown stage {manifest['stage']!r}")
    dtype = _TORCH_DTYPES[manifest["dtype"]]
    model = MultiScaleProtoNet(BackboneConfig(**manifest["backbone"]), manifest["num_classes"],
                               PrototypeConfig(**manifest["prototypes"]), seed=manifest["seed"],
                               dtype=dtype)
    # group modules must exist before their parameters can be loaded
    if manifest["has_raw_groups"]:
        model.raw_groups = model.init_groups(0)
    if manifest["has_groups"]:
        model.init_groups(0)
    state = {k: torch.from_numpy(np.array(v, dtype=v.dtype.newbyteorder("="))) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.stage = manifest["stage"]
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    plan = TrainingPlan.from_dict(manifest["plan"]) if manifest.get("plan") else None
    return model, plan, manifest
