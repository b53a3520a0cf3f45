"""Episodic meta-training: per iteration, the source domains are split into
meta-source domains and one random meta-target domain. A cross-entropy step
trains the backbone on the meta-source batch; a second cross-entropy step
trains only the parameter generator through generated weights on the
meta-target batch, simulating the test-time shift."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone import BackboneSpec, ConvBackbone
from .objectives import layer_gradients
from .paramgen import GeneratorSpec, ParamGenerator
from .synthdata import DomainDataset


@dataclass
class TrainConfig:
    n_iter: int = 500
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    grad_loss: str = "entropy"
    channels: tuple[int, ...] = (8, 16, 32)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    log_every: int = 100
    eval_every: int = 100
    holdout_frac: float = 0.1
    model_selection: bool = True

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if isinstance(d.get("generator"), dict):
            d["generator"] = GeneratorSpec.from_dict(d["generator"])
        return cls(**d)


@dataclass
class TrainResult:
    backbone: ConvBackbone
    generator: ParamGenerator
    config: TrainConfig
    metrics: list[dict]
    val_history: list[dict]
    best_iter: int


def split_meta(domain_ids: list[int], gen: torch.Generator) -> tuple[list[int], int]:
    """Pick one meta-target domain uniformly; the rest form the meta-source set."""
    if len(domain_ids) < 2:
        raise ValueError("need at least 2 source domains for a meta split")
    pick = int(torch.randint(len(domain_ids), (1,), generator=gen))
    target = domain_ids[pick]
    return [d for d in domain_ids if d != target], target


def _holdout_split(n: int, frac: float, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    n_val = max(1, int(round(n * frac))) if frac > 0 else 0
    return perm[n_val:], perm[:n_val]


def meta_source_step(
    model: ConvBackbone, optimizer: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor
) -> float:
    logits = model.forward(x, bn_mode="train")
    loss = F.cross_entropy(logits, y)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite meta-source loss: {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def meta_target_step(
    model: ConvBackbone,
    generator: ParamGenerator,
    optimizer: torch.optim.Optimizer,
    x: torch.Tensor,
    y: torch.Tensor,
    grad_loss: str,
) -> float:
    """Train the generator only; the backbone and its BN statistics are untouched."""
    params = model.extract()
    with torch.no_grad():
        z = model.features(x)
    grads = layer_gradients(grad_loss, model, x, params)

    frozen = [p for p in model.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        generated = generator.generate(params, z, grads)
        logits = model.forward(x, injected=generated)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite meta-target loss: {loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return float(loss.detach())


class Trainer:
    """Single-writer training loop with resumable state."""

    def __init__(self, config: TrainConfig, source_domains: list[DomainDataset]):
        if len(source_domains) < 2:
            raise ValueError("need at least 2 source domains")
        self.config = config
        self.domains = source_domains
        torch.manual_seed(config.seed)

        first = source_domains[0]
        spec = BackboneSpec(
            n_blocks=len(config.channels),
            channels=config.channels,
            n_classes=first.n_classes,
            image_size=first.inputs.shape[-1],
            in_channels=first.inputs.shape[1],
        )
        self.backbone = ConvBackbone(spec)
        self.generator = ParamGenerator(self.backbone.list_slots(), spec.feature_dim, config.generator)
        self.opt_theta = torch.optim.Adam(self.backbone.parameters(), lr=config.lr)
        self.opt_phi = torch.optim.Adam(self.generator.parameters(), lr=config.lr)
        self.sampler = torch.Generator().manual_seed(config.seed + 1)

        split_gen = torch.Generator().manual_seed(config.seed + 2)
        self.train_idx: dict[int, torch.Tensor] = {}
        self.val_idx: dict[int, torch.Tensor] = {}
        for ds in source_domains:
            tr, va = _holdout_split(len(ds), config.holdout_frac, split_gen)
            self.train_idx[ds.domain_id] = tr
            self.val_idx[ds.domain_id] = va

        self.iter = 0
        self.metrics: list[dict] = []
        self.val_history: list[dict] = []
        self.best_iter = 0
        self.best_val = -1.0
        self.best_state: tuple[dict, dict] | None = None
        self._t0 = time.perf_counter()

    # ---- batching -------------------------------------------------------

    def _sample_batch(self, domain_ids: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        by_id = {ds.domain_id: ds for ds in self.domains}
        pools = [(by_id[d], self.train_idx[d]) for d in domain_ids]
        sizes = torch.tensor([len(idx) for _, idx in pools])
        offsets = torch.cumsum(sizes, 0) - sizes
        total = int(sizes.sum())
        flat = torch.randint(total, (self.config.batch_size,), generator=self.sampler)
        xs, ys = [], []
        for j in flat:
            which = int(torch.searchsorted(offsets, j, right=True)) - 1
            ds, idx = pools[which]
            i = int(idx[int(j - offsets[which])])
            xs.append(ds.inputs[i])
            ys.append(ds.labels[i])
        return torch.stack(xs), torch.stack(ys)

    # ---- validation -----------------------------------------------------

    def _validate(self) -> float:
        """Generated-parameter accuracy on the held-out split of each domain."""
        self.backbone.eval()
        self.generator.eval()
        correct, total = 0, 0
        for ds in self.domains:
            idx = self.val_idx[ds.domain_id]
            if len(idx) == 0:
                continue
            x, y = ds.inputs[idx], ds.labels[idx]
            params = self.backbone.extract()
            grads = layer_gradients(self.config.grad_loss, self.backbone, x, params)
            with torch.no_grad():
                z = self.backbone.features(x)
                generated = self.generator.generate(params, z, grads)
                pred = self.backbone.forward(x, injected=generated).argmax(dim=-1)
            correct += int((pred == y).sum())
            total += len(y)
        return correct / max(total, 1)

    # ---- loop -----------------------------------------------------------

    def run(self, out_dir: str | Path | None = None) -> TrainResult:
        torch.set_num_threads(1)  # bitwise run-to-run reproducibility
        cfg = self.config
        out = Path(out_dir) if out_dir else None
        metrics_file = None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            metrics_file = (out / "metrics.jsonl").open("a")

        domain_ids = [ds.domain_id for ds in self.domains]
        try:
            while self.iter < cfg.n_iter:
                source_ids, target_id = split_meta(domain_ids, self.sampler)
                xs, ys = self._sample_batch(source_ids)
                xt, yt = self._sample_batch([target_id])
                ms_loss = meta_source_step(self.backbone, self.opt_theta, xs, ys)
                mt_loss = meta_target_step(
                    self.backbone, self.generator, self.opt_phi, xt, yt, cfg.grad_loss
                )
                self.iter += 1

                if self.iter % cfg.log_every == 0 or self.iter == cfg.n_iter:
                    row = {
                        "iter": self.iter,
                        "meta_source_ce": ms_loss,
                        "meta_target_ce": mt_loss,
                        "wallclock_s": time.perf_counter() - self._t0,
                    }
                    self.metrics.append(row)
                    if metrics_file:
                        metrics_file.write(json.dumps(row) + "\n")
                        metrics_file.flush()

                if cfg.model_selection and (
                    self.iter % cfg.eval_every == 0 or self.iter == cfg.n_iter
                ):
                    acc = self._validate()
                    self.val_history.append({"iter": self.iter, "val_acc": acc})
                    if acc > self.best_val:
                        self.best_val = acc
                        self.best_iter = self.iter
                        self.best_state = (
                            copy.deepcopy(self.backbone.state_dict()),
                            copy.deepcopy(self.generator.state_dict()),
                        )
        finally:
            if metrics_file:
                metrics_file.close()

        if cfg.model_selection and self.best_state is not None:
            self.backbone.load_state_dict(self.best_state[0])
            self.generator.load_state_dict(self.best_state[1])
        self.backbone.eval()
        self.generator.eval()
        return TrainResult(
            backbone=self.backbone,
            generator=self.generator,
            config=cfg,
            metrics=self.metrics,
            val_history=self.val_history,
            best_iter=self.best_iter,
        )

    # ---- resumable state ------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "iter": self.iter,
            "backbone": copy.deepcopy(self.backbone.state_dict()),
            "generator": copy.deepcopy(self.generator.state_dict()),
            "opt_theta": copy.deepcopy(self.opt_theta.state_dict()),
            "opt_phi": copy.deepcopy(self.opt_phi.state_dict()),
            "sampler": self.sampler.get_state(),
            "metrics": copy.deepcopy(self.metrics),
            "val_history": copy.deepcopy(self.val_history),
            "best_iter": self.best_iter,
            "best_val": self.best_val,
            "best_state": copy.deepcopy(self.best_state),
        }

    def load_state_dict(self, state: dict) -> None:
        self.iter = state["iter"]
        self.backbone.load_state_dict(state["backbone"])
        self.generator.load_state_dict(state["generator"])
        self.opt_theta.load_state_dict(state["opt_theta"])
        self.opt_phi.load_state_dict(state["opt_phi"])
        self.sampler.set_state(state["sampler"])
        self.metrics = list(state["metrics"])
        self.val_history = list(state["val_history"])
        self.best_iter = state["best_iter"]
        self.best_val = state["best_val"]
        self.best_state = state["best_state"]


def train(
    config: TrainConfig, source_domains: list[DomainDataset], out_dir: str | Path | None = None
) -> TrainResult:
    return Trainer(config, source_domains).run(out_dir)
