"""Deterministic multi-domain synthetic datasets and evaluation streams.

Domains are built from procedurally drawn class glyphs so that everything is
reproducible from a seed: rotated domains realize input-level shift, category
splits realize output-level shift, and disjoint glyph variants of the same
superclasses realize feature-level shift.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


@dataclass
class DomainDataset:
    """Labeled samples from one domain."""

    domain_id: int
    inputs: torch.Tensor  # [N, C, H, W], float32 in [0, 1]
    labels: torch.Tensor  # [N], int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.meta.get("n_classes", int(self.labels.max().item()) + 1))


@dataclass
class DomainBatch:
    inputs: torch.Tensor  # [B, C, H, W]
    labels: torch.Tensor  # [B]
    domain_ids: torch.Tensor  # [B], per-sample provenance (never shown to strategies)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def domain_id(self) -> int:
        """Single domain id of the batch, or -1 for a mixed batch."""
        ids = torch.unique(self.domain_ids)
        return int(ids.item()) if ids.numel() == 1 else -1


@dataclass
class DomainStream:
    batches: list[DomainBatch]
    order_policy: str  # "single_domain" | "interleaved_random"
    batch_size: int
    seed: int

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def rotate_images(images: torch.Tensor, angle_deg: float) -> torch.Tensor:
    """Rotate [..., H, W] images about their center, bilinear, zero padding."""
    h, w = images.shape[-2], images.shape[-1]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    ys = torch.arange(h, dtype=images.dtype) - cy
    xs = torch.arange(w, dtype=images.dtype) - cx
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    # inverse mapping: output pixel pulls from source coordinates
    src_x = cos_t * gx + sin_t * gy + cx
    src_y = -sin_t * gx + cos_t * gy + cy

    x0 = torch.floor(src_x)
    y0 = torch.floor(src_y)
    wx = src_x - x0
    wy = src_y - y0

    flat = images.reshape(-1, h, w)
    out = torch.zeros_like(flat)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = (x0 + dx).long()
            yi = (y0 + dy).long()
            weight = (wx if dx else 1 - wx) * (wy if dy else 1 - wy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = xi.clamp(0, w - 1)
            yi_c = yi.clamp(0, h - 1)
            gathered = flat[:, yi_c, xi_c] * valid.to(images.dtype)
            out = out + weight * gathered
    return out.reshape(images.shape)


def _glyph(cls: int, variant: int, size: int, offset: tuple[float, float], scale: float) -> np.ndarray:
    """Antialiased class glyph on a [size, size] grid, values in [0, 1].

    The basic shape is fixed by the class; the variant changes the drawing
    style (fill, pre-rotation, stroke width), which is what subpopulation
    shift perturbs.
    """
    lin = np.linspace(-1.0, 1.0, size)
    y, x = np.meshgrid(lin, lin, indexing="ij")
    x = (x - offset[0]) / scale
    y = (y - offset[1]) / scale
    if variant % 2 == 1:
        # 45-degree style rotation of the canvas
        x, y = (x + y) / math.sqrt(2), (y - x) / math.sqrt(2)
    aa = 2.0 / size  # antialias band

    def soft(d: np.ndarray) -> np.ndarray:
        # inside where d <= 0
        return np.clip(0.5 - d / aa, 0.0, 1.0)

    thick = 0.16 if variant < 2 else 0.28
    shape = cls % 5
    if shape == 0:  # square (outline or filled)
        d_out = np.maximum(np.abs(x), np.abs(y)) - 0.68
        if variant >= 2:
            img = soft(d_out)
        else:
            d_in = 0.68 - 2 * thick - np.maximum(np.abs(x), np.abs(y))
            img = soft(np.maximum(d_out, d_in))
    elif shape == 1:  # plus
        bar_h = np.maximum(np.abs(y) - thick, np.abs(x) - 0.72)
        bar_v = np.maximum(np.abs(x) - thick, np.abs(y) - 0.72)
        img = np.maximum(soft(bar_h), soft(bar_v))
    elif shape == 2:  # upward triangle
        e1 = y - 0.6
        e2 = -y + 1.4 * x - 0.6
        e3 = -y - 1.4 * x - 0.6
        d_tri = np.maximum(e1, np.maximum(e2, e3))
        if variant >= 2:
            img = soft(d_tri)
        else:
            img = soft(np.maximum(d_tri, -(d_tri + 2.2 * thick)))
    elif shape == 3:  # circle
        r = np.sqrt(x**2 + y**2)
        d_out = r - 0.66
        if variant >= 2:
            img = soft(d_out)
        else:
            img = soft(np.maximum(d_out, 0.66 - 2 * thick - r))
    else:  # two horizontal bars
        b1 = np.maximum(np.abs(y - 0.36) - thick, np.abs(x) - 0.7)
        b2 = np.maximum(np.abs(y + 0.36) - thick, np.abs(x) - 0.7)
        img = np.maximum(soft(b1), soft(b2))
    return np.clip(img, 0.0, 1.0)


def _base_samples(
    rng: np.random.Generator,
    n: int,
    n_classes: int,
    image_size: int,
    variant_of_class=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Round-robin labels with per-sample jitter; class glyphs fixed by seed."""
    images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        cls = i % n_classes
        variant = 0 if variant_of_class is None else variant_of_class(cls)
        off = rng.uniform(-0.12, 0.12, size=2)
        scale = rng.uniform(0.85, 1.1)
        intensity = rng.uniform(0.75, 1.0)
        images[i, 0] = intensity * _glyph(cls, variant, image_size, (off[0], off[1]), scale)
        labels[i] = cls
    return torch.from_numpy(images), torch.from_numpy(labels)


def make_rotated_domains(
    seed: int,
    angles: list[float],
    n_per_domain: int,
    n_classes: int = 5,
    image_size: int = 16,
) -> list[DomainDataset]:
    """One domain per rotation angle; the same base samples rotated per domain."""
    if not angles:
        raise ValueError("angles must be non-empty")
    if len(set(angles)) != len(angles):
        raise ValueError(f"duplicate angles: {angles}")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_per_domain < n_classes:
        raise ValueError("n_per_domain must be >= n_classes")

    rng = np.random.default_rng(seed)
    base, labels = _base_samples(rng, n_per_domain, n_classes, image_size)
    out = []
    for d, angle in enumerate(angles):
        inputs = rotate_images(base, angle).clamp_(0.0, 1.0) if angle != 0 else base.clone()
        out.append(
            DomainDataset(
                domain_id=d,
                inputs=inputs,
                labels=labels.clone(),
                meta={"angle": angle, "seed": seed, "n_classes": n_classes},
            )
        )
    return out


def make_category_shift_split(
    datasets: list[DomainDataset],
    class_assignment: dict[int, set[int]],
) -> list[DomainDataset]:
    """Filter each assigned source domain to its class subset (output-level shift).

    Domains absent from the assignment (the targets) pass through untouched.
    """
    if not datasets:
        return []
    n_classes = datasets[0].n_classes
    full = set(range(n_classes))
    subsets = [set(v) for v in class_assignment.values()]
    union = set().union(*subsets) if subsets else set()
    if union != full:
        raise ValueError(f"class assignment must cover the full label set {sorted(full)}")
    # the identity assignment (every domain keeps every class) is allowed;
    # any other overlap makes the per-domain label spaces ambiguous
    if not all(s == full for s in subsets):
        seen: set[int] = set()
        for s in subsets:
            if seen & s:
                raise ValueError(f"overlapping class assignment: {sorted(seen & s)}")
            seen |= s
    out = []
    for ds in datasets:
        if ds.domain_id not in class_assignment:
            out.append(ds)
            continue
        keep = torch.tensor(
            [int(l) in class_assignment[ds.domain_id] for l in ds.labels], dtype=torch.bool
        )
        out.append(
            DomainDataset(
                domain_id=ds.domain_id,
                inputs=ds.inputs[keep].clone(),
                labels=ds.labels[keep].clone(),
                meta={**ds.meta, "classes": sorted(class_assignment[ds.domain_id])},
            )
        )
    return out


def make_subpopulation_domains(
    seed: int,
    n_super: int,
    subs_per_super: int,
    n_per_sub: int,
    image_size: int = 16,
) -> tuple[DomainDataset, DomainDataset]:
    """Feature-level shift: same superclass labels, disjoint glyph variants."""
    if subs_per_super < 2:
        raise ValueError("subs_per_super must be >= 2")
    if subs_per_super % 2 != 0:
        raise ValueError("subs_per_super must be even for a disjoint half split")

    half = subs_per_super // 2
    rng = np.random.default_rng(seed)

    def build(domain_id: int, variants: range) -> DomainDataset:
        n = n_super * len(variants) * n_per_sub
        images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
        labels = np.zeros(n, dtype=np.int64)
        subs = np.zeros(n, dtype=np.int64)
        i = 0
        for cls in range(n_super):
            for v in variants:
                for _ in range(n_per_sub):
                    off = rng.uniform(-0.12, 0.12, size=2)
                    scale = rng.uniform(0.85, 1.1)
                    intensity = rng.uniform(0.75, 1.0)
                    images[i, 0] = intensity * _glyph(cls, v, image_size, (off[0], off[1]), scale)
                    labels[i] = cls
                    subs[i] = v
                    i += 1
        return DomainDataset(
            domain_id=domain_id,
            inputs=torch.from_numpy(images),
            labels=torch.from_numpy(labels),
            meta={
                "seed": seed,
                "n_classes": n_super,
                "subpopulations": list(variants),
            },
        )

    source = build(0, range(half))
    target = build(1, range(half, subs_per_super))
    return source, target


def stream(
    datasets: list[DomainDataset],
    batch_size: int,
    order_policy: str = "single_domain",
    seed: int = 0,
) -> DomainStream:
    """Deterministic batch sequence over all samples of all datasets."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if order_policy not in ("single_domain", "interleaved_random"):
        raise ValueError(f"unknown order_policy: {order_policy}")

    gen = torch.Generator().manual_seed(seed)
    batches: list[DomainBatch] = []
    if order_policy == "single_domain":
        for ds in datasets:
            perm = torch.randperm(len(ds), generator=gen)
            for start in range(0, len(ds), batch_size):
                idx = perm[start : start + batch_size]
                batches.append(
                    DomainBatch(
                        inputs=ds.inputs[idx],
                        labels=ds.labels[idx],
                        domain_ids=torch.full((len(idx),), ds.domain_id, dtype=torch.int64),
                    )
                )
    else:
        inputs = torch.cat([ds.inputs for ds in datasets])
        labels = torch.cat([ds.labels for ds in datasets])
        ids = torch.cat(
            [torch.full((len(ds),), ds.domain_id, dtype=torch.int64) for ds in datasets]
        )
        perm = torch.randperm(len(labels), generator=gen)
        for start in range(0, len(labels), batch_size):
            idx = perm[start : start + batch_size]
            batches.append(DomainBatch(inputs[idx], labels[idx], ids[idx]))
    return DomainStream(batches=batches, order_policy=order_policy, batch_size=batch_size, seed=seed)


def export_datasets(datasets: list[DomainDataset], out_dir: str | Path) -> None:
    """Write raw little-endian float32 tensors plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "domains": []}
    for ds in datasets:
        stem = f"domain_{ds.domain_id}"
        ds.inputs.numpy().astype("<f4").tofile(out / f"{stem}_inputs.bin")
        ds.labels.numpy().astype("<i8").tofile(out / f"{stem}_labels.bin")
        manifest["domains"].append(
            {
                "domain_id": ds.domain_id,
                "inputs": f"{stem}_inputs.bin",
                "labels": f"{stem}_labels.bin",
                "shape": list(ds.inputs.shape),
                "meta": ds.meta,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def import_datasets(in_dir: str | Path) -> list[DomainDataset]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format_version") != 1:
        raise ValueError(f"unknown dataset format version: {manifest.get('format_version')}")
    out = []
    for entry in manifest["domains"]:
        shape = tuple(entry["shape"])
        inputs = np.fromfile(src / entry["inputs"], dtype="<f4").reshape(shape)
        labels = np.fromfile(src / entry["labels"], dtype="<i8")
        out.append(
            DomainDataset(
                domain_id=entry["domain_id"],
                inputs=torch.from_numpy(inputs.copy()),
                labels=torch.from_numpy(labels.copy()),
                meta=entry.get("meta", {}),
            )
        )
    return out
