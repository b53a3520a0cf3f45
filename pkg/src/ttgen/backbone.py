"""Small convolutional classifier with injectable BN-affine and classifier slots.

The forward pass is functional over the generatable slots: every call resolves
each slot to either the stored parameter or a caller-supplied override, so
injection is call-scoped and never mutates the model. BN running statistics
are owned by the model and frozen whenever it is in generalization mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

ParamSet = dict[str, torch.Tensor]

KIND_BN_GAMMA = "bn_gamma"
KIND_BN_BETA = "bn_beta"
KIND_CLASSIFIER = "classifier"


@dataclass(frozen=True)
class ParameterSlot:
    slot_id: str
    kind: str
    shape: tuple[int, ...]
    depth_index: int  # 1..L for BN slots, 0 for the classifier


@dataclass
class BackboneSpec:
    n_blocks: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    n_classes: int = 5
    image_size: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != self.n_blocks:
            raise ValueError("channels must have one entry per block")
        if self.n_blocks < 1 or self.n_classes < 2:
            raise ValueError("need n_blocks >= 1 and n_classes >= 2")

    @property
    def n_bn_layers(self) -> int:
        return self.n_blocks

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class ConvBackbone(nn.Module):
    """Conv(3x3) -> BN -> ReLU -> 2x pool per block, global average pool, linear head.

    The classifier has no bias, so its slot is exactly the matrix of class
    vectors. ``bn_mode`` selects the statistics used for normalization:
    "running" (inference), "batch" (current-batch stats, no buffer writes),
    or "train" (batch stats + running-stat update).
    """

    BN_EPS = 1e-5
    BN_MOMENTUM = 0.1

    def __init__(self, spec: BackboneSpec | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec or BackboneSpec()
        s = self.spec
        self.generalization_mode = False  # when True, BN buffer writes are forbidden

        in_ch = s.in_channels
        for i, out_ch in enumerate(s.channels, start=1):
            w = torch.empty(out_ch, in_ch, 3, 3, dtype=dtype)
            nn.init.kaiming_normal_(w, nonlinearity="relu")
            self.register_parameter(f"conv{i}_weight", nn.Parameter(w))
            self.register_parameter(
                f"conv{i}_bias", nn.Parameter(torch.zeros(out_ch, dtype=dtype))
            )
            self.register_parameter(f"bn{i}_gamma", nn.Parameter(torch.ones(out_ch, dtype=dtype)))
            self.register_parameter(f"bn{i}_beta", nn.Parameter(torch.zeros(out_ch, dtype=dtype)))
            self.register_buffer(f"bn{i}_mean", torch.zeros(out_ch, dtype=dtype))
            self.register_buffer(f"bn{i}_var", torch.ones(out_ch, dtype=dtype))
            in_ch = out_ch
        cls = torch.empty(s.n_classes, s.feature_dim, dtype=dtype)
        nn.init.kaiming_uniform_(cls, a=5**0.5)
        self.register_parameter("classifier_weight", nn.Parameter(cls))

    # ---- slot table ----------------------------------------------------

    def list_slots(self) -> list[ParameterSlot]:
        slots = []
        for i, ch in enumerate(self.spec.channels, start=1):
            slots.append(ParameterSlot(f"bn{i}.gamma", KIND_BN_GAMMA, (ch,), i))
            slots.append(ParameterSlot(f"bn{i}.beta", KIND_BN_BETA, (ch,), i))
        slots.append(
            ParameterSlot(
                "classifier", KIND_CLASSIFIER, (self.spec.n_classes, self.spec.feature_dim), 0
            )
        )
        return slots

    def slot_table(self) -> dict[str, ParameterSlot]:
        # Slots are fixed by the spec, so the table is built once and reused.
        table = getattr(self, "_slot_table", None)
        if table is None:
            table = {s.slot_id: s for s in self.list_slots()}
            self._slot_table = table
        return table

    def _slot_param(self, slot_id: str) -> torch.Tensor:
        if slot_id == "classifier":
            return self.classifier_weight
        try:
            name, part = slot_id.split(".")
            return getattr(self, f"{name}_{part}")
        except (ValueError, AttributeError):
            raise KeyError(f"unknown slot: {slot_id}") from None

    def extract(self, slot_ids: list[str] | None = None) -> ParamSet:
        """Detached copies of slot tensors; mutating them never touches the model."""
        table = self.slot_table()
        if slot_ids is None:
            slot_ids = list(table)
        out: ParamSet = {}
        for sid in slot_ids:
            if sid not in table:
                raise KeyError(f"unknown slot: {sid}")
            out[sid] = self._slot_param(sid).detach().clone()
        return out

    def _resolve(self, slot_id: str, injected: ParamSet | None) -> torch.Tensor:
        if injected is not None and slot_id in injected:
            value = injected[slot_id]
            expected = self.slot_table()[slot_id].shape
            if tuple(value.shape) != expected:
                raise ValueError(
                    f"slot {slot_id}: injected shape {tuple(value.shape)} != {expected}"
                )
            return value
        return self._slot_param(slot_id)

    @staticmethod
    def _check_injected(injected: ParamSet | None, table: dict[str, ParameterSlot]) -> None:
        if injected is None:
            return
        for sid in injected:
            if sid not in table:
                raise KeyError(f"unknown slot: {sid}")

    # ---- forward -------------------------------------------------------

    def _trunk(
        self, x: torch.Tensor, injected: ParamSet | None, bn_mode: str
    ) -> torch.Tensor:
        if bn_mode not in ("running", "batch", "train"):
            raise ValueError(f"unknown bn_mode: {bn_mode}")
        if self.generalization_mode and bn_mode == "train":
            raise RuntimeError("BN statistics are read-only in generalization mode")
        self._check_injected(injected, self.slot_table())
        h = x
        for i in range(1, self.spec.n_blocks + 1):
            h = F.conv2d(h, getattr(self, f"conv{i}_weight"), getattr(self, f"conv{i}_bias"), padding=1)
            gamma = self._resolve(f"bn{i}.gamma", injected)
            beta = self._resolve(f"bn{i}.beta", injected)
            if bn_mode == "running":
                mean = getattr(self, f"bn{i}_mean")
                var = getattr(self, f"bn{i}_var")
            else:
                mean = h.mean(dim=(0, 2, 3))
                var = h.var(dim=(0, 2, 3), unbiased=False)
                if bn_mode == "train":
                    with torch.no_grad():
                        n = h.numel() / h.shape[1]
                        unbiased = var * n / max(n - 1, 1)
                        m = self.BN_MOMENTUM
                        getattr(self, f"bn{i}_mean").mul_(1 - m).add_(m * mean)
                        getattr(self, f"bn{i}_var").mul_(1 - m).add_(m * unbiased)
            h = bn_apply(h, mean, var, gamma, beta, self.BN_EPS)
            h = F.relu(h)
            h = F.max_pool2d(h, 2)
        return h.mean(dim=(2, 3))  # global average pool -> [B, F]

    def features(
        self, x: torch.Tensor, injected: ParamSet | None = None, bn_mode: str = "running"
    ) -> torch.Tensor:
        """Penultimate representation [B, F]."""
        return self._trunk(x, injected, bn_mode)

    def forward(
        self, x: torch.Tensor, injected: ParamSet | None = None, bn_mode: str = "running"
    ) -> torch.Tensor:
        """Logits [B, K], optionally with call-scoped slot overrides."""
        z = self._trunk(x, injected, bn_mode)
        return F.linear(z, self._resolve("classifier", injected))

    def checksum(self) -> float:
        """Cheap change detector over all parameters and buffers."""
        total = 0.0
        for t in list(self.parameters()) + list(self.buffers()):
            total += float(t.detach().double().abs().sum())
        return total


def bn_apply(
    z: torch.Tensor,
    mean: torch.Tensor,
    var: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float,
) -> torch.Tensor:
    """gamma * (z - mean) / sqrt(var + eps) + beta, broadcast over spatial dims."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    shape = [1, -1] + [1] * (z.dim() - 2)
    mean = mean.reshape(shape)
    var = var.reshape(shape)
    gamma = gamma.reshape(shape)
    beta = beta.reshape(shape)
    return gamma * (z - mean) / torch.sqrt(var + eps) + beta
