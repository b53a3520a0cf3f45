"""Checkpoint persistence: raw little-endian tensor blob + JSON manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneSpec, ConvBackbone
from .paramgen import GeneratorSpec, ParamGenerator

FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    backbone: ConvBackbone
    generator: ParamGenerator
    config: dict
    manifest: dict


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    backbone: ConvBackbone,
    generator: ParamGenerator,
    config: dict | None = None,
) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    tensors: list[tuple[str, torch.Tensor]] = []
    for prefix, module in (("backbone", backbone), ("generator", generator)):
        for name, t in module.state_dict().items():
            tensors.append((f"{prefix}.{name}", t))

    blob = bytearray()
    table = []
    for name, t in tensors:
        dtype = _DTYPES[t.dtype]
        raw = t.detach().cpu().numpy().astype(dtype).tobytes()
        table.append(
            {"name": name, "shape": list(t.shape), "dtype": dtype, "offset": len(blob), "nbytes": len(raw)}
        )
        blob.extend(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "backbone_spec": {
            "n_blocks": backbone.spec.n_blocks,
            "channels": list(backbone.spec.channels),
            "n_classes": backbone.spec.n_classes,
            "image_size": backbone.spec.image_size,
            "in_channels": backbone.spec.in_channels,
        },
        "generator_spec": generator.spec.to_dict(),
        "slots": [
            {"slot_id": s.slot_id, "kind": s.kind, "shape": list(s.shape), "depth_index": s.depth_index}
            for s in backbone.list_slots()
        ],
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "tensors": table,
        "sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    (out / "tensors.bin").write_bytes(bytes(blob))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path) -> Checkpoint:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"missing manifest in {src}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version: {manifest.get('format_version')}")

    blob = (src / "tensors.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("tensor blob checksum mismatch (corrupted checkpoint)")

    bs = manifest["backbone_spec"]
    backbone = ConvBackbone(
        BackboneSpec(
            n_blocks=bs["n_blocks"],
            channels=tuple(bs["channels"]),
            n_classes=bs["n_classes"],
            image_size=bs["image_size"],
            in_channels=bs["in_channels"],
        )
    )
    generator = ParamGenerator(
        backbone.list_slots(),
        backbone.spec.feature_dim,
        GeneratorSpec.from_dict(manifest["generator_spec"]),
    )

    states: dict[str, dict[str, torch.Tensor]] = {"backbone": {}, "generator": {}}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        prefix, name = entry["name"].split(".", 1)
        states[prefix][name] = torch.from_numpy(arr).to(_TORCH_DTYPES[entry["dtype"]])
    backbone.load_state_dict(states["backbone"])
    generator.load_state_dict(states["generator"])
    backbone.eval()
    generator.eval()
    return Checkpoint(backbone=backbone, generator=generator, config=manifest.get("config", {}), manifest=manifest)
