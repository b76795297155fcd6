"""Masked attention with group tokens.

Builds the {0, -inf} additive masks that route message broadcasting and
aggregation between group tokens and image tokens, for every
message-passing mode, and implements the straight-through Gumbel-Softmax
hard assignment of image tokens to group tokens.

Token layout inside a sequence: [class token (some modes)] + [N group
tokens] + [M image tokens].
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor

NEG_INF = -np.inf


class MessagePassingMode(Enum):
    SAMB = "samb"
    SAMB_D = "samb-d"
    SAMG = "samg"
    SAMG_D = "samg-d"
    G_G = "g-g"
    G_L = "g-l"
    G_L_D = "g-l-d"
    VANILLA_CLS = "vanilla"

    @property
    def dynamic(self) -> bool:
        return self in (MessagePassingMode.SAMB_D, MessagePassingMode.SAMG_D,
                        MessagePassingMode.G_L_D)

    @property
    def has_class_token(self) -> bool:
        return self in (MessagePassingMode.G_L, MessagePassingMode.G_L_D,
                        MessagePassingMode.VANILLA_CLS)

    @property
    def has_group_tokens(self) -> bool:
        return self is not MessagePassingMode.VANILLA_CLS


@dataclass
class TokenLayout:
    """Index bookkeeping for a token sequence under one mode."""
    mode: MessagePassingMode
    num_groups: int
    num_patches: int

    @property
    def has_cls(self) -> bool:
        return self.mode.has_class_token

    @property
    def n_groups(self) -> int:
        return self.num_groups if self.mode.has_group_tokens else 0

    @property
    def total(self) -> int:
        return int(self.has_cls) + self.n_groups + self.num_patches

    @property
    def group_start(self) -> int:
        return int(self.has_cls)

    @property
    def patch_start(self) -> int:
        return int(self.has_cls) + self.n_groups


@dataclass
class AttentionMaskPair:
    """broadcast_mask [M, N]: which group token reaches each image token.
    group_mask [N, N]: 0 on the diagonal, -inf elsewhere."""
    broadcast_mask: np.ndarray
    group_mask: np.ndarray


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    noise_enabled: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"gumbel temperature must be > 0, got {self.temperature}")


@dataclass
class GroupAssignment:
    """Hard token-to-group assignment plus its differentiable surrogates.

    ``one_hot_st`` evaluates to an exact one-hot matrix but backpropagates
    the gradient of the soft relaxation (straight-through).
    """
    hard: np.ndarray            # [..., M] int indices into [0, N)
    soft_logits: Tensor         # [..., M, N]
    soft: Tensor                # [..., M, N] Gumbel-perturbed softmax
    one_hot_st: Tensor          # [..., M, N]


def group_exclusion_mask(n: int) -> np.ndarray:
    mask = np.full((n, n), NEG_INF)
    np.fill_diagonal(mask, 0.0)
    return mask


def contiguous_regions(n: int, m: int) -> np.ndarray:
    """Owner group index per image token: N even splits, the last region
    absorbs the remainder."""
    if n < 1:
        raise ConfigError(f"need at least one group token, got {n}")
    if n > m:
        raise ConfigError(f"more group tokens ({n}) than image tokens ({m})")
    base = m // n
    owners = np.minimum(np.arange(m) // base, n - 1)
    return owners.astype(np.int64)


def assignment_to_broadcast_mask(hard: np.ndarray, n: int) -> np.ndarray:
    """[..., M] indices -> [..., M, N] mask with 0 at the owner, -inf else."""
    hard = np.asarray(hard)
    mask = np.full(hard.shape + (n,), NEG_INF)
    np.put_along_axis(mask, hard[..., None], 0.0, axis=-1)
    return mask


def handcrafted_mask(n: int, m: int) -> AttentionMaskPair:
    owners = contiguous_regions(n, m)
    return AttentionMaskPair(broadcast_mask=assignment_to_broadcast_mask(owners, n),
                             group_mask=group_exclusion_mask(n))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    # rng.random() is in [0, 1); flip to (0, 1] so log never sees 0
    return -np.log(-np.log(1.0 - u))


def gumbel_assign(soft_logits: Tensor, cfg: GumbelConfig,
                  rng: Optional[np.random.Generator] = None) -> GroupAssignment:
    """Hard assignment of each image token (row) to one group token (column).

    ``soft_logits`` has shape [..., M, N].  With noise enabled, each entry is
    perturbed with an independent Gumbel(0, 1) draw before the temperature
    softmax and the argmax.  Ties break to the lowest index.
    """
    if not np.all(np.isfinite(soft_logits.data)):
        raise NumericError("gumbel_assign: non-finite assignment logits")
    if cfg.noise_enabled:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        noise = sample_gumbel(rng, soft_logits.shape)
        perturbed = soft_logits + Tensor(noise)
    else:
        perturbed = soft_logits
    soft = T.softmax(perturbed * (1.0 / cfg.temperature), axis=-1)
    hard = np.argmax(perturbed.data, axis=-1)
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, hard[..., None], 1.0, axis=-1)
    # forward: exact one-hot; backward: identity onto the soft path
    st = T.custom_op(one_hot, (soft,), lambda g: (g,))
    return GroupAssignment(hard=hard, soft_logits=soft_logits, soft=soft, one_hot_st=st)


def mode_masks(mode: MessagePassingMode, n: int, m: int,
               hard_assignment: Optional[np.ndarray] = None) -> np.ndarray:
    """Full additive score mask for one sequence, shape [..., T, T].

    For static modes the contiguous even split defines the regions; dynamic
    modes require ``hard_assignment`` ([..., M] group index per image token).
    Entries are 0 (keep) or -inf (cut).
    """
    if mode.dynamic:
        if hard_assignment is None:
            raise ContractError(f"{mode.value} requires a dynamic assignment")
        hard = np.asarray(hard_assignment)
    elif mode.has_group_tokens and mode is not MessagePassingMode.G_G:
        hard = contiguous_regions(n, m)
    else:
        hard = None

    layout = TokenLayout(mode, n, m)
    t = layout.total
    lead = () if hard is None or hard.ndim == 1 else hard.shape[:-1]
    mask = np.zeros(lead + (t, t))
    if not mode.has_group_tokens:
        return mask

    gs, ps = layout.group_start, layout.patch_start
    mask[..., gs:gs + n, gs:gs + n] = group_exclusion_mask(n)
    if mode is MessagePassingMode.G_G:
        return mask

    bmask = assignment_to_broadcast_mask(hard, n)            # [..., M, N]
    amask = np.swapaxes(bmask, -1, -2)                       # [..., N, M]
    if mode in (MessagePassingMode.SAMB, MessagePassingMode.SAMB_D):
        mask[..., ps:, gs:gs + n] = bmask
    elif mode in (MessagePassingMode.SAMG, MessagePassingMode.SAMG_D):
        mask[..., gs:gs + n, ps:] = amask
    elif mode in (MessagePassingMode.G_L, MessagePassingMode.G_L_D):
        # group tokens are local in both directions; the class token row and
        # column stay fully unmasked
        mask[..., ps:, gs:gs + n] = bmask
        mask[..., gs:gs + n, ps:] = amask
    return mask


@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def masked_attention(tokens: Tensor, weights: AttentionWeights, n_heads: int,
                     mask: Optional[np.ndarray]) -> Tensor:
    """Multi-head attention over [..., T, d] tokens with one shared additive
    score mask per sequence (the same mask for every head)."""
    squeeze = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    b, t, d = x.shape
    if d % n_heads != 0:
        raise ConfigError(f"embed dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split_heads(y: Tensor) -> Tensor:
        return T.transpose(T.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = split_heads(x @ weights.wq + weights.bq)
    k = split_heads(x @ weights.wk + weights.bk)
    v = split_heads(x @ weights.wv + weights.bv)
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim == 2:
            mask = mask[None, None, :, :]
        elif mask.ndim == 3:                     # per-sequence masks
            mask = mask[:, None, :, :]
        assert not np.any(np.all(np.isneginf(mask), axis=-1)), \
            "mask invariants violated: a fully masked attention row"
        scores = scores + Tensor(mask)
    probs = T.softmax(scores, axis=-1)
    out = probs @ v
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = out @ weights.wo + weights.bo
    return T.reshape(out, (t, d)) if squeeze else out
