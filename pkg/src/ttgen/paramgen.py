"""Transformer that maps (source slots, batch features, slot gradients) to
fresh BN-affine and classifier parameters in a single feedforward pass.

Tokens are grouped per BN layer plus one classifier group. Each token is a
projected vector (parameter value, batch-mean feature, or RMS-normalized
gradient) tagged with learned role/kind embeddings; there are no positional
encodings, so classifier class tokens are permutation-equivariant. Generated
values are read back residually at the parameter-token positions through
zero-initialized output projections, so an untrained generator reproduces the
source model exactly.
"""

from __future__ import annotations

import weakref
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import (
    KIND_BN_BETA,
    KIND_BN_GAMMA,
    KIND_CLASSIFIER,
    ParameterSlot,
    ParamSet,
)
from .objectives import GradSet, rms_normalize

_ROLE = {"param": 0, "feature": 1, "grad": 2}
_KIND = {"gamma": 0, "beta": 1, "classifier": 2, "feature": 3}

_SCRIPT_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


@dataclass
class GeneratorSpec:
    model_dim: int = 64
    n_layers: int = 8
    n_heads: int = 4
    ff_dim: int = 128
    gen_bn: bool = True
    gen_classifier: bool = True
    use_param_tokens: bool = True
    use_feature_token: bool = True
    use_grad_tokens: bool = True
    joint_pass: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


@dataclass
class TokenBundle:
    tokens: torch.Tensor  # [T, d]
    roles: list[str]  # per-token: param | feature | grad
    slot_binding: list[tuple[str, int | None]]  # (slot_id, class row) for param tokens


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer (multi-head self-attention + ReLU FFN),
    hand-rolled to keep per-call overhead low on very short token sequences."""

    def __init__(self, d: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff_dim)
        self.ff2 = nn.Linear(ff_dim, d)

    def forward(self, x: torch.Tensor, key_bias: Optional[torch.Tensor]) -> torch.Tensor:
        g, t, d = x.shape
        qkv = self.qkv(x).reshape(g, t, 3, self.n_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)  # [3, g, heads, t, head_dim]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5
        if key_bias is not None:
            scores = scores + key_bias
        y = torch.softmax(scores, dim=-1) @ v
        y = self.attn_out(y.transpose(1, 2).reshape(g, t, d))
        x = self.norm1(x + y)
        return self.norm2(x + self.ff2(torch.relu(self.ff1(x))))


class Encoder(nn.Module):
    def __init__(self, d: int, n_layers: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, n_heads, ff_dim) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, src_key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        key_bias: Optional[torch.Tensor] = None
        if src_key_padding_mask is not None:
            # [g, 1, 1, t]: -inf on padded key positions
            key_bias = torch.where(
                src_key_padding_mask, -float("inf"), 0.0
            ).to(x.dtype)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, key_bias)
        return x


class ParamGenerator(nn.Module):
    def __init__(self, slots: list[ParameterSlot], feature_dim: int, spec: GeneratorSpec | None = None):
        super().__init__()
        self.spec = spec or GeneratorSpec()
        self.slots = list(slots)
        self.feature_dim = feature_dim
        d = self.spec.model_dim

        self.bn_depths = sorted({s.depth_index for s in slots if s.depth_index > 0})
        self._by_id = {s.slot_id: s for s in slots}
        self.classifier_slot = next((s for s in slots if s.kind == KIND_CLASSIFIER), None)

        # per-token-vector-width projections; BN slots are rank-1 of the channel
        # count, classifier tokens are rows of width feature_dim
        widths = sorted({s.shape[0] for s in slots if s.kind != KIND_CLASSIFIER})
        if self.classifier_slot is not None:
            widths = sorted(set(widths) | {self.classifier_slot.shape[1]})
        self.in_proj = nn.ModuleDict({str(w): nn.Linear(w, d) for w in widths})
        self.out_proj = nn.ModuleDict({str(w): nn.Linear(d, w) for w in widths})
        for proj in self.out_proj.values():
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
        self.feat_proj = nn.Linear(feature_dim, d)

        self.role_embed = nn.Embedding(len(_ROLE), d)
        self.kind_embed = nn.Embedding(len(_KIND), d)
        self.null_token = nn.Parameter(torch.zeros(d))

        self.encoder = Encoder(d, self.spec.n_layers, self.spec.n_heads, self.spec.ff_dim)
        self._layouts: dict = {}

    def _fast_encoder(self):
        """Scripted twin of the encoder (shared parameters) for inference calls."""
        cached = _SCRIPT_CACHE.get(self.encoder)
        if cached is None:
            cached = torch.jit.script(self.encoder)
            _SCRIPT_CACHE[self.encoder] = cached
        return cached

    def _padding_mask(self, lengths: tuple[int, ...]) -> torch.Tensor:
        cached = self._layouts.get(("mask", lengths))
        if cached is None:
            # built outside inference mode so the cached tensor stays usable
            # in later grad-enabled calls
            with torch.inference_mode(False):
                t_max = max(lengths)
                cached = torch.ones(len(lengths), t_max, dtype=torch.bool)
                for i, t in enumerate(lengths):
                    cached[i, :t] = False
            self._layouts[("mask", lengths)] = cached
        return cached

    def _run_encoder(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        enc = self.encoder if torch.is_grad_enabled() else self._fast_encoder()
        return enc(tokens, mask)

    # ---- tokenization ---------------------------------------------------

    def _embed(self, content: torch.Tensor | None, role: str, kind: str) -> torch.Tensor:
        if content is None:
            content = self.null_token
        return content + self.role_embed.weight[_ROLE[role]] + self.kind_embed.weight[_KIND[kind]]

    def _project(self, vec: torch.Tensor) -> torch.Tensor:
        return self.in_proj[str(vec.shape[-1])](vec)

    def _feature_token_content(self, z_t: torch.Tensor) -> torch.Tensor | None:
        if not self.spec.use_feature_token:
            return None
        return self.feat_proj(z_t.mean(dim=0))

    def _bundle_layout(self, group: int | str) -> tuple[torch.Tensor, torch.Tensor, list[str], list[tuple[str, int | None]]]:
        """Cached (role indices, kind indices, roles, slot binding) for a group."""
        cached = self._layouts.get(group)
        if cached is not None:
            return cached
        if group == "classifier":
            slot = self.classifier_slot
            if slot is None:
                raise KeyError("backbone declares no classifier slot")
            k = slot.shape[0]
            roles = ["param"] * k + ["feature"] + ["grad"] * k
            kinds = ["classifier"] * k + ["feature"] + ["classifier"] * k
            binding = (
                [(slot.slot_id, i) for i in range(k)]
                + [(None, None)]
                + [(slot.slot_id, i) for i in range(k)]
            )
        else:
            gamma_id, beta_id = f"bn{group}.gamma", f"bn{group}.beta"
            if gamma_id not in self._by_id or beta_id not in self._by_id:
                raise KeyError(f"unknown BN depth: {group}")
            roles = ["param", "param", "feature", "grad", "grad"]
            kinds = ["gamma", "beta", "feature", "gamma", "beta"]
            binding = [(gamma_id, None), (beta_id, None), (None, None), (gamma_id, None), (beta_id, None)]
        with torch.inference_mode(False):
            # cached outside inference mode so later grad-enabled calls can
            # index embeddings with these tensors
            role_idx = torch.tensor([_ROLE[r] for r in roles])
            kind_idx = torch.tensor([_KIND[c] for c in kinds])
        self._layouts[group] = (role_idx, kind_idx, roles, binding)
        return self._layouts[group]

    def tokenize(self, group: int | str, params: ParamSet, z_t: torch.Tensor, grads: GradSet) -> TokenBundle:
        """Token bundle for one BN depth (int) or the classifier group ("classifier")."""
        use_p = self.spec.use_param_tokens
        use_g = self.spec.use_grad_tokens
        role_idx, kind_idx, roles, binding = self._bundle_layout(group)
        for sid, _ in binding:
            if sid is not None and (sid not in params or sid not in grads):
                raise KeyError(f"missing parameter or gradient for slot {sid}")
        feat = self._feature_token_content(z_t)
        null2 = self.null_token.unsqueeze(0)

        if group == "classifier":
            c_s = params[self.classifier_slot.slot_id]
            g_c = grads[self.classifier_slot.slot_id]
            k = c_s.shape[0]
            p_tok = self._project(c_s) if use_p else null2.expand(k, -1)
            g_tok = self._project(rms_normalize(g_c)) if use_g else null2.expand(k, -1)
        else:
            gamma_id, beta_id = f"bn{group}.gamma", f"bn{group}.beta"
            p_vec = torch.stack([params[gamma_id], params[beta_id]])
            g_vec = torch.stack([rms_normalize(grads[gamma_id]), rms_normalize(grads[beta_id])])
            p_tok = self._project(p_vec) if use_p else null2.expand(2, -1)
            g_tok = self._project(g_vec) if use_g else null2.expand(2, -1)

        f_tok = feat.unsqueeze(0) if feat is not None else null2
        content = torch.cat([p_tok, f_tok, g_tok])
        tokens = content + self.role_embed.weight[role_idx] + self.kind_embed.weight[kind_idx]
        return TokenBundle(tokens=tokens, roles=roles, slot_binding=binding)

    # ---- generation -----------------------------------------------------

    def _readback(self, bundle: TokenBundle, encoded: torch.Tensor, params: ParamSet, out: ParamSet) -> None:
        by_slot: dict[str, list[tuple[int, int | None]]] = {}
        for pos, (sid, row) in enumerate(bundle.slot_binding):
            if sid is not None and bundle.roles[pos] == "param":
                by_slot.setdefault(sid, []).append((pos, row))
        for sid, items in by_slot.items():
            src = params[sid]
            if items[0][1] is None:  # rank-1 BN slot, single token
                (pos, _), = items
                out[sid] = src + self.out_proj[str(src.shape[-1])](encoded[pos])
            else:  # classifier rows; tokenize emits them in row order
                assert [row for _, row in items] == list(range(src.shape[0]))
                positions = [pos for pos, _ in items]
                out[sid] = src + self.out_proj[str(src.shape[-1])](encoded[positions])

    def generate(self, params: ParamSet, z_t: torch.Tensor, grads: GradSet) -> ParamSet:
        """One feedforward pass per group; returns a full ParamSet, inputs untouched."""
        out: ParamSet = {}
        bundles: list[TokenBundle] = []
        if self.spec.gen_bn:
            bundles.extend(self.tokenize(depth, params, z_t, grads) for depth in self.bn_depths)
        if self.spec.gen_classifier and self.classifier_slot is not None:
            bundles.append(self.tokenize("classifier", params, z_t, grads))

        if bundles:
            if self.spec.joint_pass:
                joint = torch.cat([b.tokens for b in bundles])
                encoded = self._run_encoder(joint.unsqueeze(0)).squeeze(0)
                offset = 0
                for b in bundles:
                    self._readback(b, encoded[offset : offset + len(b.roles)], params, out)
                    offset += len(b.roles)
            elif len(bundles) == 1:
                encoded = self._run_encoder(bundles[0].tokens.unsqueeze(0)).squeeze(0)
                self._readback(bundles[0], encoded, params, out)
            else:
                # one padded encoder call over all groups; key-padding masks keep
                # each group's attention identical to a standalone pass
                lengths = [len(b.roles) for b in bundles]
                t_max = max(lengths)
                d = self.spec.model_dim
                mask = self._padding_mask(tuple(lengths))
                rows = []
                for b in bundles:
                    t = len(b.roles)
                    row = torch.cat([b.tokens, b.tokens.new_zeros(t_max - t, d)]) if t < t_max else b.tokens
                    rows.append(row)
                padded = torch.stack(rows)
                encoded = self._run_encoder(padded, mask)
                for b, enc, t in zip(bundles, encoded, lengths):
                    self._readback(b, enc[:t], params, out)

        for sid, value in params.items():
            if sid not in out:
                out[sid] = value.clone()  # non-generated slots stay at source values
        for sid, value in out.items():
            if not torch.isfinite(value).all():
                raise FloatingPointError(f"non-finite generated parameters for slot {sid}")
        return out

    def encoder_parameter_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters())


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
