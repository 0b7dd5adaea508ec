"""Gated mixture of sequence experts with per-task towers.

Per task: a softmax gate (mean-pooled input -> M logits, optional top-k
renormalization) weights M shared experts applied to the shared-bottom
output, then a task-specific encoder tower refines the mixture.

Expert kinds: "transformer" (default), "mlp_relu" (position-wise two-layer
MLP), "recurrent" (single-layer gated recurrent map over positions) for
multi-task frame comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig, encoder_forward, init_encoder_params, _uniform
from .errors import ConfigError, ContractError

EXPERT_KINDS = ("transformer", "mlp_relu", "recurrent")
GATING_MODES = ("conventional", "literal")

TASKS = ("ita", "tia", "cvr")


@dataclass
class MoeConfig:
    num_experts: int = 4
    top_k: int = 2
    expert_kind: str = "transformer"
    gating_mode: str = "conventional"

    def __post_init__(self):
        if self.expert_kind not in EXPERT_KINDS:
            raise ConfigError(f"unknown expert kind {self.expert_kind!r}")
        if self.gating_mode not in GATING_MODES:
            raise ConfigError(f"unknown gating mode {self.gating_mode!r}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k={self.top_k} outside [1, {self.num_experts}]")


def init_gate_params(d_model: int, num_experts: int, rng: np.random.Generator,
                     tasks=TASKS) -> dict[str, Tensor]:
    return {f"gate.{t}.wg": Tensor(_uniform(rng, (d_model, num_experts), d_model),
                                   requires_grad=True)
            for t in tasks}


def init_expert_params(moe: MoeConfig, enc: EncoderConfig,
                       rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    d = enc.d_model
    for j in range(moe.num_experts):
        prefix = f"expert.{j}"
        if moe.expert_kind == "transformer":
            params.update(init_encoder_params(enc, rng, prefix))
        elif moe.expert_kind == "mlp_relu":
            f = enc.ffn_hidden
            params[f"{prefix}.w1"] = Tensor(_uniform(rng, (d, f), d), requires_grad=True)
            params[f"{prefix}.b1"] = Tensor(np.zeros(f), requires_grad=True)
            params[f"{prefix}.w2"] = Tensor(_uniform(rng, (f, d), f), requires_grad=True)
            params[f"{prefix}.b2"] = Tensor(np.zeros(d), requires_grad=True)
        else:  # recurrent
            for w in ("wz", "uz", "wc", "uc"):
                params[f"{prefix}.{w}"] = Tensor(_uniform(rng, (d, d), d), requires_grad=True)
            params[f"{prefix}.bz"] = Tensor(np.zeros(d), requires_grad=True)
            params[f"{prefix}.bc"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def init_tower_params(enc: EncoderConfig, rng: np.random.Generator,
                      tasks=TASKS) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for t in tasks:
        params.update(init_encoder_params(enc, rng, f"tower.{t}"))
    return params


def expert_forward(kind: str, x: Tensor, params: Mapping[str, Tensor],
                   enc: EncoderConfig, prefix: str,
                   mask: Optional[np.ndarray] = None) -> Tensor:
    """Apply one expert; every kind maps L x d -> L x d."""
    if kind == "transformer":
        return encoder_forward(x, params, enc, prefix, mask)
    if kind == "mlp_relu":
        h = ag.relu(ag.add(ag.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
        return ag.add(ag.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    if kind == "recurrent":
        L, d = x.shape
        ones = Tensor(np.ones((1, d)))
        h = Tensor(np.zeros((1, d)))
        rows = []
        for t in range(L):
            xt = x[t:t + 1, :]
            z = ag.sigmoid(ag.add(ag.add(ag.matmul(xt, params[f"{prefix}.wz"]),
                                         ag.matmul(h, params[f"{prefix}.uz"])),
                                  params[f"{prefix}.bz"]))
            c = ag.tanh(ag.add(ag.add(ag.matmul(xt, params[f"{prefix}.wc"]),
                                      ag.matmul(h, params[f"{prefix}.uc"])),
                               params[f"{prefix}.bc"]))
            h = ag.add(ag.mul(z, h), ag.mul(ag.add(ones, ag.neg(z)), c))
            rows.append(h)
        return ag.concat(rows, axis=0)
    raise ConfigError(f"unknown expert kind {kind!r}")


def gate_forward(task: str, e_input_rows: Tensor, params: Mapping[str, Tensor],
                 moe: MoeConfig) -> Tensor:
    """Length-M simplex weights from the mean-pooled input sequence.

    With top_k < M the largest top_k entries (ties broken by lower expert
    index) are kept and renormalized to sum 1; the rest are exactly zero.
    """
    pooled = ag.reshape(ag.mean_pool(e_input_rows, axis=0), (1, e_input_rows.shape[1]))
    logits = ag.matmul(pooled, params[f"gate.{task}.wg"])
    probs = ag.softmax(logits, axis=-1)
    m = moe.num_experts
    if moe.top_k >= m:
        return ag.reshape(probs, (m,))
    order = np.argsort(-probs.data[0], kind="stable")  # stable => lower index wins ties
    keep = np.zeros(m)
    keep[order[:moe.top_k]] = 1.0
    kept = ag.mul(probs, Tensor(keep.reshape(1, m)))
    renorm = ag.div(kept, ag.tensor_sum(kept))
    return ag.reshape(renorm, (m,))


def moe_forward(task: str, e_input_rows: Tensor, x_shared: Tensor,
                params: Mapping[str, Tensor], moe: MoeConfig, enc: EncoderConfig,
                mask: Optional[np.ndarray] = None,
                force_dense: bool = False) -> Tensor:
    """Mix expert outputs with the task's gate weights.

    Conventional mode computes sum_j g_j * Expert_j(X) and skips experts
    whose weight is exactly zero (conditional computation; ``force_dense``
    evaluates all of them, used by the equivalence oracle). Literal mode
    computes sum_j Expert_j(g_j * X) instead.
    """
    gate = gate_forward(task, e_input_rows, params, moe)
    terms = []
    for j in range(moe.num_experts):
        gj = ag.reshape(gate[j:j + 1], (1, 1))
        if not force_dense and gate.data[j] == 0.0:
            continue
        if moe.gating_mode == "conventional":
            out = expert_forward(moe.expert_kind, x_shared, params, enc,
                                 f"expert.{j}", mask)
            terms.append(ag.mul(out, gj))
        else:
            scaled = ag.mul(x_shared, gj)
            terms.append(expert_forward(moe.expert_kind, scaled, params, enc,
                                        f"expert.{j}", mask))
    if not terms:
        raise ContractError("gate produced no nonzero expert weight")
    acc = terms[0]
    for t in terms[1:]:
        acc = ag.add(acc, t)
    return acc


def tower_forward(task: str, x_task: Tensor, params: Mapping[str, Tensor],
                  enc: EncoderConfig, mask: Optional[np.ndarray] = None) -> Tensor:
    """Task-specific encoder pass over the mixed features."""
    return encoder_forward(x_task, params, enc, f"tower.{task}", mask)
