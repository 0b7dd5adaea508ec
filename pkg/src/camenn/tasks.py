"""Task heads, batch construction, and the joint training loss.

Tasks: "ita" (does the text comply with the image), "tia" (does the image
match the text), "cvr" (will the user buy the target item). Alignment
batches pair each item's own text and image as positives and substitute
a uniformly random *different* item's text (ita) or image (tia) for
negatives. CVR batches carry the user's strictly-earlier purchases as
behavior history (no temporal leakage).

Batch rows store item / user ids, not tensors: sequences are embedded
fresh inside every training step so gradients reach the current tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .synth import InteractionRecord, ItemRecord

ALIGNMENT_TASKS = ("ita", "tia")


@dataclass
class AlignmentPair:
    text_item_id: int
    image_item_id: int
    label: int


@dataclass
class CvrExample:
    user_id: int
    history_item_ids: list[int]
    target_item_id: int
    label: int


@dataclass
class TaskBatch:
    task: str
    rows: list = field(default_factory=list)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.float64)


def build_alignment_batch(task: str, items: Sequence[ItemRecord],
                          negative_ratio: float, rng_seed: int) -> TaskBatch:
    """One positive per item plus round(ratio * n) mismatched negatives."""
    if task not in ALIGNMENT_TASKS:
        raise ContractError(f"not an alignment task: {task!r}")
    if negative_ratio < 0:
        raise ContractError("negative_ratio must be >= 0")
    n = len(items)
    num_neg = round(negative_ratio * n)
    if n < 2 and num_neg > 0:
        raise ContractError("cannot build negatives from a catalog of one item")
    rng = np.random.default_rng([rng_seed, 44])
    rows = [AlignmentPair(i.item_id, i.item_id, 1) for i in items]
    for _ in range(num_neg):
        idx = int(rng.integers(n))
        anchor = items[idx]
        other = items[(idx + 1 + int(rng.integers(n - 1))) % n]
        if task == "ita":
            rows.append(AlignmentPair(other.item_id, anchor.item_id, 0))
        else:
            rows.append(AlignmentPair(anchor.item_id, other.item_id, 0))
    rng.shuffle(rows)
    return TaskBatch(task, rows)


def build_cvr_batch(interactions: Sequence[InteractionRecord], rng_seed: int,
                    max_history: int = 2) -> TaskBatch:
    """One row per interaction; history = items bought strictly earlier."""
    if not interactions:
        raise ContractError("empty interaction log")
    by_user: dict[int, list[InteractionRecord]] = {}
    for r in interactions:
        by_user.setdefault(r.user_id, []).append(r)
    for seq in by_user.values():
        seq.sort(key=lambda r: r.timestamp)
    rows = []
    for r in interactions:
        history = [p.item_id for p in by_user[r.user_id]
                   if p.bought == 1 and p.timestamp < r.timestamp]
        rows.append(CvrExample(r.user_id, history[-max_history:], r.item_id, r.bought))
    np.random.default_rng([rng_seed, 55]).shuffle(rows)
    return TaskBatch("cvr", rows)


def head_forward(task: str, tower_output: Tensor, cls_index: int,
                 w: Tensor, b: Tensor, mode: str = "cls") -> Tensor:
    """Binary-classifier probability from one pooled tower feature.

    Alignment heads read the target [CLS] position; the CVR head defaults
    to a mean pool over all positions (configurable to [CLS]).
    """
    L, d = tower_output.shape
    if mode == "cls":
        if not 0 <= cls_index < L:
            raise ContractError(f"cls_index {cls_index} outside sequence of length {L}")
        feat = tower_output[cls_index:cls_index + 1, :]
    else:
        feat = ag.reshape(ag.mean_pool(tower_output, axis=0), (1, d))
    return ag.sigmoid(ag.add(ag.matmul(feat, w), b))


def batch_probabilities(model, batch: TaskBatch,
                        catalog_by_id: Mapping[int, ItemRecord]) -> Tensor:
    """Forward every row of a batch; returns an (n, 1) probability tensor."""
    probs = []
    for row in batch.rows:
        if batch.task in ALIGNMENT_TASKS:
            seq = model.alignment_sequence(catalog_by_id[row.text_item_id],
                                           catalog_by_id[row.image_item_id])
        else:
            history = [catalog_by_id[i] for i in row.history_item_ids]
            seq = model.cvr_sequence(row.user_id, history,
                                     catalog_by_id[row.target_item_id])
        probs.append(model.forward(seq, batch.task))
    return ag.concat(probs, axis=0)


@dataclass
class JointLossResult:
    total: Tensor
    per_task: dict[str, float]


def joint_loss(model, batches: Mapping[str, TaskBatch],
               catalog_by_id: Mapping[int, ItemRecord],
               lambdas: Mapping[str, float]) -> JointLossResult:
    """Weighted sum of per-task mean BCE losses; zero-weight tasks are
    skipped entirely (their parameters see no gradient)."""
    if all(lambdas.get(t, 0.0) == 0.0 for t in ("ita", "tia", "cvr")):
        raise ContractError("all task weights are zero")
    for t, lam in lambdas.items():
        if lam < 0:
            raise ContractError(f"negative task weight for {t!r}")
    total: Optional[Tensor] = None
    per_task: dict[str, float] = {}
    for task in ("ita", "tia", "cvr"):
        lam = lambdas.get(task, 0.0)
        if lam == 0.0 or task not in batches or not batches[task].rows:
            continue
        probs = batch_probabilities(model, batches[task], catalog_by_id)
        labels = Tensor(batches[task].labels().reshape(-1, 1))
        loss = ag.bce_loss(probs, labels)
        per_task[task] = loss.item()
        term = ag.scale(loss, lam)
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ContractError("no non-empty batch with positive weight")
    return JointLossResult(total, per_task)
