"""Unsupervised test-time losses and per-slot gradient extraction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import ConvBackbone, ParamSet
from .synthdata import rotate_images

LOSS_NAMES = ("entropy", "pseudo_label", "augmentation_consistency")

# fixed MEMO-style view set: small rotations and flips
_MEMO_ANGLES = (10.0, -10.0)


@dataclass
class GradSet:
    """Detached per-slot gradients of one unsupervised loss."""

    entries: dict[str, torch.Tensor]
    loss_name: str

    def __getitem__(self, slot_id: str) -> torch.Tensor:
        return self.entries[slot_id]

    def __contains__(self, slot_id: str) -> bool:
        return slot_id in self.entries


def entropy_loss(logits: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy (natural log) of the softmax predictions."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    log_p = F.log_softmax(logits, dim=-1)
    return -(log_p.exp() * log_p).sum(dim=-1).mean()


def pseudo_label_loss(logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against per-sample argmax labels (ties -> lowest class)."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    # explicit first-max tie-break (argmax order is not guaranteed for ties)
    is_max = logits == logits.max(dim=-1, keepdim=True).values
    first_max = is_max & (is_max.cumsum(dim=-1) == 1)
    labels = first_max.to(torch.int64).argmax(dim=-1)
    return F.cross_entropy(logits, labels)


def augmentation_consistency_loss(
    model: ConvBackbone, x: torch.Tensor, injected: ParamSet | None = None
) -> torch.Tensor:
    """Entropy of the prediction averaged over a fixed set of augmented views."""
    views = [rotate_images(x, a) for a in _MEMO_ANGLES]
    views.append(torch.flip(x, dims=[-1]))
    views.append(torch.flip(x, dims=[-2]))
    probs = torch.stack(
        [F.softmax(model.forward(v, injected=injected), dim=-1) for v in views]
    ).mean(dim=0)
    log_p = torch.log(probs.clamp_min(1e-12))
    return -(probs * log_p).sum(dim=-1).mean()


def unsupervised_loss(
    loss_name: str, model: ConvBackbone, x: torch.Tensor, injected: ParamSet | None
) -> torch.Tensor:
    if loss_name == "entropy":
        return entropy_loss(model.forward(x, injected=injected))
    if loss_name == "pseudo_label":
        return pseudo_label_loss(model.forward(x, injected=injected))
    if loss_name == "augmentation_consistency":
        return augmentation_consistency_loss(model, x, injected)
    raise ValueError(f"unknown loss: {loss_name}")


def layer_gradients(
    loss_name: str,
    model: ConvBackbone,
    x: torch.Tensor,
    params: ParamSet,
    slot_ids: list[str] | None = None,
) -> GradSet:
    """Gradient of the chosen loss w.r.t. each slot, evaluated at ``params``.

    All non-slot parameters are treated as constants; results are detached so
    no second-order terms can flow through them downstream.
    """
    table = model.slot_table()
    if slot_ids is None:
        slot_ids = [sid for sid in table if sid in params]
    unknown = [sid for sid in slot_ids if sid not in table]
    if unknown:
        raise KeyError(f"unknown slots: {unknown}")

    leaves = {sid: params[sid].detach().clone().requires_grad_(True) for sid in slot_ids}
    loss = unsupervised_loss(loss_name, model, x, leaves)
    if not torch.isfinite(loss):
        raise ValueError(f"{loss_name} loss is non-finite")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=False)
    entries = {sid: g.detach() for sid, g in zip(leaves, grads)}
    return GradSet(entries=entries, loss_name=loss_name)


def rms_normalize(grad: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Scale a gradient tensor to unit RMS; decouples loss scale from tokens."""
    rms = grad.pow(2).mean().sqrt()
    return grad / (rms + eps)
