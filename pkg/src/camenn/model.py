"""The full multi-task model: embeddings -> shared bottom -> gated expert
mixture -> per-task towers -> per-task heads.

Parameters live in one flat name->Tensor dict (the checkpoint namespace);
frozen provider tensors are stored alongside trainable ones but have
``requires_grad=False`` and are never optimized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .embeddings import (ImageProvider, InputSequence, ItemBlock, TextProvider, Vocab,
                         assemble_input, check_position_injectivity, encode_image,
                         encode_text, split_patches, tokenize)
from .encoder import EncoderConfig, encoder_forward, init_encoder_params, _uniform
from .errors import ConfigError, ContractError
from .moe import (TASKS, MoeConfig, init_expert_params, init_gate_params,
                  init_tower_params, moe_forward, tower_forward)
from .synth import ItemRecord

CVR_HEAD_MODES = ("mean_pool", "cls")


@dataclass
class ModelConfig:
    d_model: int = 16
    num_heads: int = 8
    num_blocks: int = 1
    ffn_hidden: int = 0
    moe: MoeConfig = field(default_factory=MoeConfig)
    max_text_len: int = 50
    max_patch_len: int = 9
    max_behavior: int = 2
    patch_grid: int = 3
    image_size: int = 30
    image_channels: int = 1
    num_users: int = 500
    num_contexts: int = 1
    cvr_head: str = "mean_pool"
    seed: int = 0

    def __post_init__(self):
        if self.cvr_head not in CVR_HEAD_MODES:
            raise ConfigError(f"unknown cvr head mode {self.cvr_head!r}")
        if self.patch_grid ** 2 > self.max_patch_len:
            raise ConfigError(
                f"{self.patch_grid}x{self.patch_grid} patches exceed "
                f"max_patch_len={self.max_patch_len}")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.num_heads, self.num_blocks,
                             self.ffn_hidden)

    @property
    def patch_pixels(self) -> int:
        return ((self.image_size // self.patch_grid) ** 2) * self.image_channels


class CameNNModel:
    """Holds parameters, providers, and the per-task forward pass."""

    def __init__(self, config: ModelConfig, vocab: Vocab):
        self.config = config
        self.vocab = vocab
        d = config.d_model
        rng = np.random.default_rng([config.seed, 5005])
        self.text_provider = TextProvider(len(vocab), d, config.seed)
        self.image_provider = ImageProvider(config.patch_pixels, d, config.seed)
        enc = config.encoder

        p: dict[str, Tensor] = {}
        p["embed.cls"] = Tensor(_uniform(rng, d, d), requires_grad=True)
        p["embed.sep"] = Tensor(_uniform(rng, d, d), requires_grad=True)
        p["embed.seg_t"] = Tensor(_uniform(rng, d, d), requires_grad=True)
        p["embed.seg_i"] = Tensor(_uniform(rng, d, d), requires_grad=True)
        p["embed.pos_text"] = Tensor(_uniform(rng, (config.max_text_len, d), d),
                                     requires_grad=True)
        p["embed.pos_patch"] = Tensor(_uniform(rng, (config.max_patch_len, d), d),
                                      requires_grad=True)
        p["embed.user_table"] = Tensor(_uniform(rng, (config.num_users, d), d),
                                       requires_grad=True)
        p["embed.context_table"] = Tensor(_uniform(rng, (config.num_contexts, d), d),
                                          requires_grad=True)
        p.update(init_encoder_params(enc, rng, "encoder.shared"))
        p.update(init_gate_params(d, config.moe.num_experts, rng))
        p.update(init_expert_params(config.moe, enc, rng))
        p.update(init_tower_params(enc, rng))
        for t in TASKS:
            p[f"head.{t}.w"] = Tensor(_uniform(rng, (d, 1), d), requires_grad=True)
            p[f"head.{t}.b"] = Tensor(np.zeros((1, 1)), requires_grad=True)
        self.params = p
        check_position_injectivity(p["embed.pos_text"])
        check_position_injectivity(p["embed.pos_patch"])

    # ------------------------------------------------------------------
    # parameter access / persistence

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {TextProvider.TABLE_NAME: self.text_provider.table.data,
               ImageProvider.PROJECTION_NAME: self.image_provider.projection}
        for n, t in self.params.items():
            out[n] = t.data
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        if TextProvider.TABLE_NAME in arrays:
            self.text_provider = TextProvider(len(self.vocab), self.config.d_model,
                                              self.config.seed,
                                              table=arrays[TextProvider.TABLE_NAME])
        if ImageProvider.PROJECTION_NAME in arrays:
            self.image_provider = ImageProvider(
                self.config.patch_pixels, self.config.d_model, self.config.seed,
                projection=arrays[ImageProvider.PROJECTION_NAME])
        for n, t in self.params.items():
            if n in arrays:
                if arrays[n].shape != t.data.shape:
                    raise ContractError(
                        f"checkpoint tensor {n!r} has shape {arrays[n].shape}, "
                        f"expected {t.data.shape}")
                t.data = arrays[n].astype(t.data.dtype).copy()

    # ------------------------------------------------------------------
    # input assembly

    def item_block(self, item: ItemRecord) -> ItemBlock:
        cfg = self.config
        ids = [self.vocab.id_of(t) for t in item.text_tokens][:cfg.max_text_len]
        grid = split_patches(item.image, cfg.patch_grid, cfg.patch_grid)
        e_txt = encode_text(ids, self.text_provider, self.params["embed.pos_text"],
                            self.params["embed.seg_t"])
        e_img = encode_image(grid, self.image_provider, self.params["embed.pos_patch"],
                             self.params["embed.seg_i"])
        return ItemBlock(self.params["embed.cls"], e_txt,
                         self.params["embed.sep"], e_img)

    def mixed_item_block(self, text_item: ItemRecord, image_item: ItemRecord) -> ItemBlock:
        """Block whose text and image may come from different items."""
        cfg = self.config
        ids = [self.vocab.id_of(t) for t in text_item.text_tokens][:cfg.max_text_len]
        grid = split_patches(image_item.image, cfg.patch_grid, cfg.patch_grid)
        e_txt = encode_text(ids, self.text_provider, self.params["embed.pos_text"],
                            self.params["embed.seg_t"])
        e_img = encode_image(grid, self.image_provider, self.params["embed.pos_patch"],
                             self.params["embed.seg_i"])
        return ItemBlock(self.params["embed.cls"], e_txt,
                         self.params["embed.sep"], e_img)

    def alignment_sequence(self, text_item: ItemRecord,
                           image_item: ItemRecord) -> InputSequence:
        """Alignment inputs contain only the target item block."""
        return assemble_input(None, [], self.mixed_item_block(text_item, image_item))

    def other_features(self, user_id: int, context_id: int = 0) -> Tensor:
        user = ag.embedding_lookup(self.params["embed.user_table"],
                                   np.array([user_id]))
        ctx = ag.embedding_lookup(self.params["embed.context_table"],
                                  np.array([context_id]))
        return ag.transpose(ag.concat([user, ctx], axis=0))

    def cvr_sequence(self, user_id: int, history: Sequence[ItemRecord],
                     target: ItemRecord, context_id: int = 0) -> InputSequence:
        blocks = [self.item_block(i) for i in history[-self.config.max_behavior:]]
        return assemble_input(self.other_features(user_id, context_id), blocks,
                              self.item_block(target))

    # ------------------------------------------------------------------
    # forward passes

    def task_features(self, seq: InputSequence, task: str) -> Tensor:
        """Tower input X^task (L x d rows) for one assembled sequence."""
        rows = ag.transpose(seq.embeddings)
        shared = encoder_forward(rows, self.params, self.config.encoder, "encoder.shared")
        return moe_forward(task, rows, shared, self.params, self.config.moe,
                           self.config.encoder)

    def forward(self, seq: InputSequence, task: str) -> Tensor:
        """Probability (1x1 tensor) for one sequence under one task head."""
        from .tasks import head_forward  # local import to avoid a cycle
        xk = self.task_features(seq, task)
        tower_out = tower_forward(task, xk, self.params, self.config.encoder)
        mode = self.config.cvr_head if task == "cvr" else "cls"
        return head_forward(task, tower_out, seq.cls_index,
                            self.params[f"head.{task}.w"],
                            self.params[f"head.{task}.b"], mode)

    def pooled_text_image(self, item: ItemRecord, task: str = "ita"
                          ) -> tuple[np.ndarray, np.ndarray]:
        """Mean-pooled tower-input vectors over the item's text / image positions."""
        with ag.no_grad():
            seq = self.alignment_sequence(item, item)
            xk = self.task_features(seq, task).data
        seg = np.array(seq.segment_ids)
        return xk[seg == "T"].mean(axis=0), xk[seg == "I"].mean(axis=0)
