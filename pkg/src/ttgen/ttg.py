"""Test-time generalization engine and baseline adaptation strategies.

All strategies consume unlabeled batches online. The parameter-generation
strategy is stateless across batches and never writes to the stored source
checkpoint; the baselines keep whatever mutable state they need locally.
"""

from __future__ import annotations

import copy
import time
from collections import deque
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import ConvBackbone, ParamSet
from .objectives import GradSet, entropy_loss, layer_gradients
from .paramgen import ParamGenerator
from .synthdata import DomainBatch, DomainStream

STRATEGY_NAMES = ("generalizeformer", "erm", "tent", "prototype_adjust")


@dataclass
class RunMetrics:
    records: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        n = sum(r["n"] for r in self.records)
        return sum(r["n_correct"] for r in self.records) / max(n, 1)

    def per_domain_accuracy(self) -> dict[int, float]:
        correct: dict[int, int] = {}
        total: dict[int, int] = {}
        for r in self.records:
            for did, ok in zip(r["sample_domain_ids"], r["sample_correct"]):
                correct[did] = correct.get(did, 0) + int(ok)
                total[did] = total.get(did, 0) + 1
        return {d: correct[d] / total[d] for d in sorted(total)}

    @property
    def median_adapt_ms(self) -> float:
        times = sorted(r["adapt_ms"] for r in self.records)
        return times[len(times) // 2] if times else 0.0


def adapt_batch_generalizeformer(
    x: torch.Tensor,
    backbone: ConvBackbone,
    generator: ParamGenerator,
    grad_loss: str = "entropy",
) -> tuple[ParamSet, torch.Tensor]:
    """Generate batch-specific parameters and predict; no stored weight changes.

    The gradient pass evaluates at the source parameters, so its feature
    activations double as z_t and only one graph-building forward is needed.
    """
    params = backbone.extract()
    if grad_loss == "entropy":
        leaves = {sid: p.clone().requires_grad_(True) for sid, p in params.items()}
        z_graph = backbone.features(x, injected=leaves)
        logits_src = F.linear(z_graph, leaves["classifier"])
        loss = entropy_loss(logits_src)
        raw = torch.autograd.grad(loss, list(leaves.values()))
        grads = GradSet(
            entries={sid: g.detach() for sid, g in zip(leaves, raw)}, loss_name=grad_loss
        )
        z = z_graph.detach()
    else:
        grads = layer_gradients(grad_loss, backbone, x, params)
        with torch.no_grad():
            z = backbone.features(x)
    with torch.inference_mode():
        generated = generator.generate(params, z, grads)
        logits = backbone.forward(x, injected=generated)
    return generated, logits


class GeneralizeFormerStrategy:
    name = "generalizeformer"

    def __init__(self, backbone: ConvBackbone, generator: ParamGenerator, grad_loss: str = "entropy"):
        self.backbone = backbone
        self.generator = generator
        self.grad_loss = grad_loss
        self.backbone.eval()
        self.backbone.generalization_mode = True
        self.generator.eval()
        self.generated_history: list[ParamSet] = []

    def adapt(self, batch: DomainBatch) -> torch.Tensor:
        generated, logits = adapt_batch_generalizeformer(
            batch.inputs, self.backbone, self.generator, self.grad_loss
        )
        self.generated_history.append(generated)
        return logits

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Evaluation with the stored checkpoint; adaptation never mutates it."""
        with torch.no_grad():
            return self.backbone.forward(x)


class ERMStrategy:
    name = "erm"

    def __init__(self, backbone: ConvBackbone):
        self.backbone = backbone
        self.backbone.eval()

    def adapt(self, batch: DomainBatch) -> torch.Tensor:
        with torch.no_grad():
            return self.backbone.forward(batch.inputs)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.backbone.forward(x)


class TentStrategy:
    """Online entropy minimization on BN affine parameters with batch statistics."""

    name = "tent"

    def __init__(self, backbone: ConvBackbone, lr: float = 1e-3, steps: int = 1, full_model: bool = False):
        self.model = copy.deepcopy(backbone)  # source checkpoint stays untouched
        self.model.generalization_mode = False
        self.lr = lr
        self.steps = steps
        if full_model:
            trainable = [p for p in self.model.parameters()]
        else:
            trainable = [
                getattr(self.model, f"bn{i}_{part}")
                for i in range(1, self.model.spec.n_blocks + 1)
                for part in ("gamma", "beta")
            ]
        self._trainable = set(id(p) for p in trainable)
        for p in self.model.parameters():
            p.requires_grad_(id(p) in self._trainable)
        self.optimizer = torch.optim.Adam(trainable, lr=lr)
        self.degenerate_batches = 0

    def _degenerate(self, x: torch.Tensor) -> bool:
        # single samples make batch statistics unreliable; exactly constant
        # channels make them undefined up to eps
        if x.shape[0] == 1:
            return True
        var = x.var(dim=(0, 2, 3), unbiased=False)
        return bool((var < 1e-12).any())

    def adapt(self, batch: DomainBatch) -> torch.Tensor:
        x = batch.inputs
        if self._degenerate(x):
            self.degenerate_batches += 1
        logits = None
        for _ in range(self.steps):
            logits = self.model.forward(x, bn_mode="batch")
            loss = entropy_loss(logits)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
        return logits.detach()

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Evaluation with the current (possibly drifted) affine parameters,
        in Tent's own batch-statistics inference mode; no update."""
        with torch.no_grad():
            return self.model.forward(x, bn_mode="batch")


class PrototypeStrategy:
    """Entropy-filtered per-class feature supports with FIFO eviction; classifies
    by dot product with class centroids (source classifier row always included),
    so an empty support reduces to the source classifier."""

    name = "prototype_adjust"

    def __init__(self, backbone: ConvBackbone, capacity: int = 20):
        self.backbone = backbone
        self.backbone.eval()
        self.capacity = capacity
        k = backbone.spec.n_classes
        self.supports: list[deque] = [deque(maxlen=capacity) for _ in range(k)]
        self.seen_entropies: list[float] = []

    def _class_vectors(self) -> torch.Tensor:
        rows = []
        source = self.backbone.extract(["classifier"])["classifier"]
        for k, sup in enumerate(self.supports):
            members = list(sup) + [source[k]]
            rows.append(torch.stack(members).mean(dim=0))
        return torch.stack(rows)

    def adapt(self, batch: DomainBatch) -> torch.Tensor:
        with torch.no_grad():
            z = self.backbone.features(batch.inputs)
            logits = F.linear(z, self._class_vectors())
            # update supports after predicting, so the batch itself is classified
            # by the state accumulated from previous batches
            probs = F.softmax(logits, dim=-1)
            ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=-1)
            pseudo = logits.argmax(dim=-1)
            self.seen_entropies.extend(float(e) for e in ent)
            threshold = torch.tensor(self.seen_entropies).median()
            for i in range(len(z)):
                if ent[i] <= threshold:
                    self.supports[int(pseudo[i])].append(z[i].clone())
        return logits

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Classification with the current centroids; supports stay untouched."""
        with torch.no_grad():
            return F.linear(self.backbone.features(x), self._class_vectors())


def make_strategy(name: str, backbone: ConvBackbone, generator: ParamGenerator | None = None, **kwargs):
    if name == "generalizeformer":
        if generator is None:
            raise ValueError("generalizeformer needs a trained generator")
        return GeneralizeFormerStrategy(backbone, generator, **kwargs)
    if name == "erm":
        return ERMStrategy(backbone)
    if name == "tent":
        return TentStrategy(backbone, **kwargs)
    if name == "prototype_adjust":
        return PrototypeStrategy(backbone, **kwargs)
    raise ValueError(f"unknown strategy: {name}")


def run_stream(stream: DomainStream, strategy) -> RunMetrics:
    """Sequential online evaluation; domain ids are recorded but never given to
    the strategy."""
    metrics = RunMetrics()
    for batch_idx, batch in enumerate(stream):
        t0 = time.perf_counter()
        logits = strategy.adapt(batch)
        adapt_ms = (time.perf_counter() - t0) * 1000.0
        probs = F.softmax(logits, dim=-1)
        ent = -(probs * torch.log(probs.clamp_min(1e-12))).sum(dim=-1)
        correct = logits.argmax(dim=-1) == batch.labels
        metrics.records.append(
            {
                "batch_idx": batch_idx,
                "domain_id": batch.domain_id,
                "n": len(batch),
                "n_correct": int(correct.sum()),
                "mean_entropy": float(ent.mean()),
                "adapt_ms": adapt_ms,
                "sample_domain_ids": [int(d) for d in batch.domain_ids],
                "sample_correct": [bool(c) for c in correct],
            }
        )
    return metrics
