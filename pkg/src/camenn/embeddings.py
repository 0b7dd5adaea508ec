"""Text / image representations and model-input assembly.

Text tokens and image patches become d-dim columns via frozen provider
encoders (stand-ins for pre-trained nets, replaceable through checkpoint
import), plus trainable position and segment embeddings. Item blocks are
laid out as [CLS], text tokens, [SEP], image patches and concatenated
with other-feature and behavior blocks into one input sequence.

Column convention: encoders return d x n tensors (one column per token
or patch).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError

DEFAULT_MAX_TEXT_LEN = 50
DEFAULT_MAX_PATCH_LEN = 9

UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Vocab:
    """Closed vocabulary with an unknown token at id 0."""

    def __init__(self, tokens: Sequence[str]):
        self._token_to_id = {UNK_TOKEN: 0}
        for t in tokens:
            if t not in self._token_to_id:
                self._token_to_id[t] = len(self._token_to_id)

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        seen = []
        for text in texts:
            seen.extend(_TOKEN_RE.findall(text.lower()))
        return cls(sorted(set(seen)))

    @property
    def unk_id(self) -> int:
        return 0

    def __len__(self):
        return len(self._token_to_id)

    def __contains__(self, token):
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, 0)


def tokenize(text: str, vocab: Vocab, max_text_len: int = DEFAULT_MAX_TEXT_LEN) -> list[int]:
    """Lowercase, split on non-alphanumerics, map to vocab ids, truncate."""
    if len(vocab) == 0:
        raise ContractError("tokenize: empty vocabulary")
    ids = [vocab.id_of(t) for t in _TOKEN_RE.findall(text.lower())]
    return ids[:max_text_len]


class TextProvider:
    """Frozen token-embedding table, deterministically seeded per token id.

    Stands in for a pre-trained language model; excluded from training.
    A real table can be imported via the checkpoint tensor name
    ``text_provider.table``.
    """

    TABLE_NAME = "text_provider.table"

    def __init__(self, vocab_size: int, dim: int, seed: int, table: Optional[np.ndarray] = None):
        if table is None:
            rows = [np.random.default_rng([seed, 1001, tid]).uniform(-1.0, 1.0, dim)
                    for tid in range(vocab_size)]
            table = np.stack(rows) if rows else np.zeros((0, dim))
        if table.shape != (vocab_size, dim):
            raise ContractError(
                f"text provider table shape {table.shape} != ({vocab_size}, {dim})")
        self.table = Tensor(table, requires_grad=False, name=self.TABLE_NAME)
        self.dim = dim

    def lookup(self, token_ids) -> Tensor:
        return ag.embedding_lookup(self.table, np.asarray(token_ids, dtype=np.int64))


class ImageProvider:
    """Frozen random projection of flattened patch pixels, tanh-squashed.

    Stands in for a pre-trained vision model; excluded from training.
    Importable via checkpoint name ``image_provider.projection``.
    """

    PROJECTION_NAME = "image_provider.projection"

    def __init__(self, patch_pixels: int, dim: int, seed: int,
                 projection: Optional[np.ndarray] = None):
        if projection is None:
            rng = np.random.default_rng([seed, 2002])
            projection = rng.standard_normal((patch_pixels, dim)) / np.sqrt(patch_pixels)
        if projection.shape != (patch_pixels, dim):
            raise ContractError(
                f"image projection shape {projection.shape} != ({patch_pixels}, {dim})")
        self.projection = projection
        self.patch_pixels = patch_pixels
        self.dim = dim

    def embed(self, patches: Sequence[np.ndarray]) -> Tensor:
        """Map patches to an n_P x d constant (non-trainable) tensor."""
        if not patches:
            return Tensor(np.zeros((0, self.dim)))
        flat = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in patches])
        if flat.shape[1] != self.patch_pixels:
            raise ContractError(
                f"patch has {flat.shape[1]} pixels, provider expects {self.patch_pixels}")
        return Tensor(np.tanh(flat @ self.projection))


@dataclass
class ImagePatchGrid:
    """Row-major, non-repeated patches of equal pixel dimensions."""

    patches: list[np.ndarray]
    grid_rows: int
    grid_cols: int
    patch_shape: tuple


def split_patches(image: np.ndarray, grid_rows: int, grid_cols: int) -> ImagePatchGrid:
    """Cut an H x W x C image into an equal-pixel patch grid, row-major."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, _ = image.shape
    if h % grid_rows or w % grid_cols:
        raise ContractError(
            f"image {h}x{w} not divisible by grid {grid_rows}x{grid_cols} (no padding)")
    ph, pw = h // grid_rows, w // grid_cols
    patches = [image[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw, :].copy()
               for r in range(grid_rows) for c in range(grid_cols)]
    return ImagePatchGrid(patches, grid_rows, grid_cols, patches[0].shape)


def reassemble_patches(grid: ImagePatchGrid) -> np.ndarray:
    """Inverse of split_patches (test oracle and sanity check)."""
    rows = [np.concatenate(grid.patches[r * grid.grid_cols:(r + 1) * grid.grid_cols], axis=1)
            for r in range(grid.grid_rows)]
    return np.concatenate(rows, axis=0)


def encode_text(token_ids, provider: TextProvider, position_table: Tensor,
                segment_vec: Tensor) -> Tensor:
    """Eq-style text columns: provider(token) + position + text-segment."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = len(token_ids)
    if n > position_table.shape[0]:
        raise ContractError(
            f"{n} tokens exceed position table of {position_table.shape[0]} entries")
    if n == 0:
        return Tensor(np.zeros((provider.dim, 0)))
    rows = provider.lookup(token_ids)
    rows = ag.add(ag.add(rows, position_table[0:n]), segment_vec)
    return ag.transpose(rows)


def encode_image(grid: ImagePatchGrid, provider: ImageProvider, position_table: Tensor,
                 segment_vec: Tensor) -> Tensor:
    """Image-patch columns: provider(patch) + position + image-segment."""
    n = len(grid.patches)
    if n > position_table.shape[0]:
        raise ContractError(
            f"{n} patches exceed position table of {position_table.shape[0]} entries")
    rows = provider.embed(grid.patches)
    rows = ag.add(ag.add(rows, position_table[0:n]), segment_vec)
    return ag.transpose(rows)


def check_position_injectivity(position_table: Tensor) -> None:
    """Distinct positions must map to distinct vectors after init."""
    data = position_table.data
    for i in range(len(data)):
        for j in range(i + 1, len(data)):
            if np.array_equal(data[i], data[j]):
                raise ContractError(f"position table rows {i} and {j} are identical")


@dataclass
class ItemBlock:
    """One item's embedded layout: [CLS], text tokens, [SEP], image patches."""

    e_cls: Tensor   # (d,)
    e_txt: Tensor   # (d, n_T)
    e_sep: Tensor   # (d,)
    e_img: Tensor   # (d, n_P)

    @property
    def length(self) -> int:
        return 2 + self.e_txt.shape[1] + self.e_img.shape[1]

    def columns(self) -> Tensor:
        d = self.e_cls.shape[0]
        return ag.concat([ag.reshape(self.e_cls, (d, 1)), self.e_txt,
                          ag.reshape(self.e_sep, (d, 1)), self.e_img], axis=1)

    def segment_ids(self) -> list[str]:
        return (["C"] + ["T"] * self.e_txt.shape[1]
                + ["S"] + ["I"] * self.e_img.shape[1])

    def position_ids(self) -> list[int]:
        return ([0] + list(range(self.e_txt.shape[1]))
                + [0] + list(range(self.e_img.shape[1])))


@dataclass
class InputSequence:
    """The assembled model input: d x L columns with per-position annotations."""

    embeddings: Tensor                       # (d, L)
    segment_ids: list[str] = field(default_factory=list)
    position_ids: list[int] = field(default_factory=list)
    block_boundaries: list[tuple] = field(default_factory=list)  # (label, start, end)
    cls_index: int = 0

    @property
    def length(self) -> int:
        return self.embeddings.shape[1]


def assemble_input(other: Optional[Tensor], user_items: Sequence[ItemBlock],
                   target: ItemBlock) -> InputSequence:
    """Concatenate [other features, behavior item blocks, target block]."""
    d = target.e_cls.shape[0]
    pieces, segments, positions, boundaries = [], [], [], []
    offset = 0
    if other is not None:
        if other.shape[0] != d:
            raise ContractError(
                f"other-feature dim {other.shape[0]} != item dim {d}")
        n_o = other.shape[1]
        pieces.append(other)
        segments += ["O"] * n_o
        positions += list(range(n_o))
        boundaries.append(("other", 0, n_o))
        offset = n_o
    for i, block in enumerate(user_items):
        pieces.append(block.columns())
        segments += block.segment_ids()
        positions += block.position_ids()
        boundaries.append((f"item{i}", offset, offset + block.length))
        offset += block.length
    pieces.append(target.columns())
    segments += target.segment_ids()
    positions += target.position_ids()
    boundaries.append(("target", offset, offset + target.length))
    cls_index = offset
    emb = ag.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    return InputSequence(emb, segments, positions, boundaries, cls_index)
