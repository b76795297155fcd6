"""Tiny ViT backbone with group tokens, masked message passing, and a
fusion attention head that collapses the N group tokens into the single
feature used for classification and domain alignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (AttentionWeights, GroupAssignment, GumbelConfig,
                        MessagePassingMode, TokenLayout, gumbel_assign,
                        masked_attention, mode_masks)
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    num_group_tokens: int = 4
    mode: MessagePassingMode = MessagePassingMode.SAMB_D
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.num_group_tokens < 1:
            raise ConfigError("need at least one group token")
        if self.mode.has_group_tokens and self.num_group_tokens > self.num_patches:
            raise ConfigError(
                f"{self.num_group_tokens} group tokens exceed {self.num_patches} patches")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(self.mode, self.num_group_tokens, self.num_patches)


@dataclass
class ForwardResult:
    logits: Tensor                     # [B, C]
    feature: Tensor                    # [B, d] fused alignment feature
    fusion_weights: Tensor             # [B, N] (ones for the vanilla mode)
    assignments: list[GroupAssignment]  # one per layer, dynamic modes only


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Glorot-scaled init; the 0.02 ViT default is too small to train a
    model this size from scratch with plain SGD."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return trunc_normal(rng, (fan_in, fan_out), std)


class VitSamb:
    """Pre-norm ViT blocks with mode-dependent attention masks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        p = cfg.patch_size
        patch_dim = p * p * cfg.in_channels

        def param(data):
            return Tensor(data, requires_grad=True)

        self.patch_w = param(xavier(rng, patch_dim, d))
        self.patch_b = param(np.zeros(d))
        self.pos_embed = param(trunc_normal(rng, (cfg.num_patches, d)))
        self.group_tokens = (param(trunc_normal(rng, (cfg.num_group_tokens, d)))
                             if cfg.mode.has_group_tokens else None)
        self.cls_token = (param(trunc_normal(rng, (d,)))
                          if cfg.mode.has_class_token else None)
        self.blocks = []
        for _ in range(cfg.depth):
            attn = AttentionWeights(
                wq=param(xavier(rng, d, d)), bq=param(np.zeros(d)),
                wk=param(xavier(rng, d, d)), bk=param(np.zeros(d)),
                wv=param(xavier(rng, d, d)), bv=param(np.zeros(d)),
                wo=param(xavier(rng, d, d)), bo=param(np.zeros(d)))
            block = {
                "ln1_g": param(np.ones(d)), "ln1_b": param(np.zeros(d)),
                "attn": attn,
                "ln2_g": param(np.ones(d)), "ln2_b": param(np.zeros(d)),
                "mlp_w1": param(xavier(rng, d, cfg.mlp_ratio * d)),
                "mlp_b1": param(np.zeros(cfg.mlp_ratio * d)),
                "mlp_w2": param(xavier(rng, cfg.mlp_ratio * d, d)),
                "mlp_b2": param(np.zeros(d)),
            }
            self.blocks.append(block)
        self.ln_f_g = param(np.ones(d))
        self.ln_f_b = param(np.zeros(d))
        self.fusion_query = (param(xavier(rng, d, 1))
                             if cfg.mode.has_group_tokens else None)
        self.head_w = param(xavier(rng, d, cfg.num_classes))
        self.head_b = param(np.zeros(cfg.num_classes))

    # -- parameter plumbing -------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {"patch_w": self.patch_w, "patch_b": self.patch_b,
               "pos_embed": self.pos_embed}
        if self.group_tokens is not None:
            out["group_tokens"] = self.group_tokens
        if self.cls_token is not None:
            out["cls_token"] = self.cls_token
        for i, blk in enumerate(self.blocks):
            for k, v in blk.items():
                if k == "attn":
                    out.update(v.named(f"block{i}.attn"))
                else:
                    out[f"block{i}.{k}"] = v
        out["ln_f_g"] = self.ln_f_g
        out["ln_f_b"] = self.ln_f_b
        if self.fusion_query is not None:
            out["fusion_query"] = self.fusion_query
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def save(self, path):
        T.save_checkpoint(path, self.named_params())

    def load(self, path):
        loaded = T.load_checkpoint(path)
        own = self.named_params()
        # extra records (e.g. discriminator weights) are fine; missing are not
        missing = set(own) - set(loaded)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, t in own.items():
            if t.shape != loaded[name].shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            t.data = loaded[name].data

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    # -- forward ------------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """[B, C, H, W] -> [B, M, p*p*C] row-major patch flattening."""
        cfg = self.cfg
        b, c, h, w = images.shape
        if c != cfg.in_channels or h != cfg.image_size or w != cfg.image_size:
            raise ConfigError(f"image shape {images.shape[1:]} does not match config")
        p, g = cfg.patch_size, cfg.grid
        x = images.reshape(b, c, g, p, g, p)
        x = x.transpose(0, 2, 4, 3, 5, 1)        # [B, gh, gw, p, p, C]
        return x.reshape(b, g * g, p * p * c)

    def _layer_assignment(self, x: Tensor, attn: AttentionWeights, train: bool,
                          rng: Optional[np.random.Generator]) -> GroupAssignment:
        """Gumbel assignment from this layer's own projections.

        Logits are the full-dimension Q_p.K_g products; the resulting hard
        mask enters attention as a constant so the loss stays locally
        differentiable in every parameter.
        """
        cfg = self.cfg
        layout = cfg.layout
        gs, ps = layout.group_start, layout.patch_start
        q = np.matmul(x.data, attn.wq.data) + attn.bq.data
        k = np.matmul(x.data, attn.wk.data) + attn.bk.data
        qp = q[:, ps:, :]
        kg = k[:, gs:gs + cfg.num_group_tokens, :]
        logits = np.matmul(qp, np.swapaxes(kg, -1, -2)) / np.sqrt(cfg.embed_dim)
        gcfg = cfg.gumbel
        if not train:
            gcfg = GumbelConfig(temperature=gcfg.temperature, noise_enabled=False,
                                rng_seed=gcfg.rng_seed)
        return gumbel_assign(Tensor(logits), gcfg, rng)

    def forward(self, images: np.ndarray, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        cfg = self.cfg
        layout = cfg.layout
        b = images.shape[0]
        d = cfg.embed_dim
        n, m = cfg.num_group_tokens, cfg.num_patches

        patches = Tensor(self.patchify(np.asarray(images, dtype=np.float64)))
        x = patches @ self.patch_w + self.patch_b + self.pos_embed
        parts = []
        if self.cls_token is not None:
            parts.append(T.broadcast_to(T.reshape(self.cls_token, (1, 1, d)),
                                        (b, 1, d)))
        if self.group_tokens is not None:
            parts.append(T.broadcast_to(T.reshape(self.group_tokens, (1, n, d)),
                                        (b, n, d)))
        parts.append(x)
        x = T.concat(parts, axis=1) if len(parts) > 1 else x

        static_mask = (mode_masks(cfg.mode, n, m)
                       if not cfg.mode.dynamic else None)
        assignments: list[GroupAssignment] = []
        for blk in self.blocks:
            h = T.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            if cfg.mode.dynamic:
                assignment = self._layer_assignment(h, blk["attn"], train, rng)
                assignments.append(assignment)
                mask = mode_masks(cfg.mode, n, m, assignment.hard)
            else:
                mask = static_mask
            x = x + masked_attention(h, blk["attn"], cfg.heads, mask)
            h = T.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            h = T.gelu(h @ blk["mlp_w1"] + blk["mlp_b1"])
            x = x + (h @ blk["mlp_w2"] + blk["mlp_b2"])
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)

        if cfg.mode.has_group_tokens:
            gs = layout.group_start
            xg = T.narrow(x, 1, gs, n)                       # [B, N, d]
            scores = T.reshape(xg @ self.fusion_query, (b, n)) * (1.0 / np.sqrt(d))
            weights = T.softmax(scores, axis=-1)             # [B, N]
            fused = T.sum_axis(T.reshape(weights, (b, n, 1)) * xg, axis=1)
        else:
            fused = T.reshape(T.narrow(x, 1, 0, 1), (b, d))  # class token
            weights = Tensor(np.ones((b, 1)))
        logits = fused @ self.head_w + self.head_b
        return ForwardResult(logits=logits, feature=fused,
                             fusion_weights=weights, assignments=assignments)

    # -- complexity ---------------------------------------------------------

    def flops_estimate(self, batch: int = 1) -> float:
        """Analytic multiply-add count for one forward pass, covering exactly
        the dense matmuls the forward performs (2*m*n*k per product)."""
        cfg = self.cfg
        d = cfg.embed_dim
        t = cfg.layout.total
        m = cfg.num_patches
        p2c = cfg.patch_size ** 2 * cfg.in_channels
        flops = 2.0 * batch * m * p2c * d                      # patch embedding
        per_layer = (3 * 2.0 * batch * t * d * d               # q, k, v
                     + 2 * 2.0 * batch * t * t * d             # scores, probs @ v
                     + 2.0 * batch * t * d * d                 # output projection
                     + 2 * 2.0 * batch * t * d * cfg.mlp_ratio * d)  # mlp
        flops += cfg.depth * per_layer
        if cfg.mode.has_group_tokens:
            flops += 2.0 * batch * cfg.num_group_tokens * d    # fusion scores
        flops += 2.0 * batch * d * cfg.num_classes             # classifier
        return flops
