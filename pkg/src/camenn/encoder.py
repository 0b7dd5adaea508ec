"""Multi-head transformer encoder block (post-norm, gelu FFN).

The same block implements the shared bottom, every expert of kind
"transformer", and every task tower; callers pass a parameter prefix to
select their weights out of the flat parameter dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

MASKED_BIAS = -1e30


@dataclass
class EncoderConfig:
    d_model: int
    num_heads: int = 8
    num_blocks: int = 1
    ffn_hidden: int = 0       # 0 -> 4 * d_model
    dropout_rate: float = 0.0  # kept at 0 for determinism

    def __post_init__(self):
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.d_model
        if self.d_model % self.num_heads:
            raise ContractError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        prefix: str) -> dict[str, Tensor]:
    """Seeded scaled-uniform init for all blocks under ``prefix``."""
    d, f = cfg.d_model, cfg.ffn_hidden
    params: dict[str, Tensor] = {}
    for b in range(cfg.num_blocks):
        p = f"{prefix}.{b}"
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{p}.{w}"] = Tensor(_uniform(rng, (d, d), d), requires_grad=True)
        params[f"{p}.w1"] = Tensor(_uniform(rng, (d, f), d), requires_grad=True)
        params[f"{p}.b1"] = Tensor(np.zeros(f), requires_grad=True)
        params[f"{p}.w2"] = Tensor(_uniform(rng, (f, d), f), requires_grad=True)
        params[f"{p}.b2"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{p}.ln1_g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.ln1_b"] = Tensor(np.zeros(d), requires_grad=True)
        params[f"{p}.ln2_g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.ln2_b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def _mask_bias(mask: Optional[np.ndarray], length: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length,):
        raise ContractError(f"mask shape {mask.shape} != ({length},)")
    if not mask.any():
        raise ContractError("attention mask hides every position")
    bias = np.zeros((length, length))
    bias[:, ~mask] = MASKED_BIAS
    return bias


def mha(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig, prefix: str,
        mask: Optional[np.ndarray] = None, collect_weights: Optional[list] = None) -> Tensor:
    """Multi-head self-attention over an L x d sequence.

    With a mask, masked positions get zero attention weight and every
    row of each head's weight matrix still sums to 1 over the rest.
    ``collect_weights``, when a list, receives one L x L array per head.
    """
    L = x.shape[0]
    dh = cfg.head_dim
    bias = _mask_bias(mask, L)
    q = ag.matmul(x, params[f"{prefix}.wq"])
    k = ag.matmul(x, params[f"{prefix}.wk"])
    v = ag.matmul(x, params[f"{prefix}.wv"])
    heads = []
    for h in range(cfg.num_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = ag.add(scores, Tensor(bias))
        attn = ag.softmax(scores, axis=-1)
        if collect_weights is not None:
            collect_weights.append(attn.data.copy())
        heads.append(ag.matmul(attn, vh))
    return ag.matmul(ag.concat(heads, axis=1), params[f"{prefix}.wo"])


def encoder_block(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig,
                  prefix: str, mask: Optional[np.ndarray] = None) -> Tensor:
    h = ag.layer_norm(ag.add(x, mha(x, params, cfg, prefix, mask)),
                      params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"])
    ffn = ag.add(ag.matmul(ag.gelu(ag.add(ag.matmul(h, params[f"{prefix}.w1"]),
                                          params[f"{prefix}.b1"])),
                           params[f"{prefix}.w2"]),
                 params[f"{prefix}.b2"])
    return ag.layer_norm(ag.add(h, ffn),
                         params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"])


def encoder_forward(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig,
                    prefix: str, mask: Optional[np.ndarray] = None) -> Tensor:
    """Full stack of cfg.num_blocks post-norm encoder blocks; shape-preserving."""
    for b in range(cfg.num_blocks):
        x = encoder_block(x, params, cfg, f"{prefix}.{b}", mask)
    return x


def attention_weights(x: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig,
                      prefix: str, block: int = 0,
                      mask: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Per-head attention matrices of one block (inspection helper)."""
    out: list[np.ndarray] = []
    with ag.no_grad():
        mha(x, params, cfg, f"{prefix}.{block}", mask, collect_weights=out)
    return out
